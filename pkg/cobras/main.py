"""
Command-line entry point.

Every subcommand reads one INI experiment config (`--config`, or the shipped
defaults) and accepts `--set section.key=value` overrides. Results go to
`[output] directory`, or to `$COBRAS_OUTPUT_DIR/<subcommand>` when unset.
Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 numerical failure.
"""
import argparse
import configparser
import logging
import os
import sys
import traceback
from datetime import datetime
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

# Load environment variables from .env file
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass  # dotenv not available, environment variables must be set externally

from . import __version__
from . import deps
from .balance import bpod_projection, cobras_balance, pod_basis
from .bench import (HeldOutSet, build_sinusoid_run, build_system, build_test_set, emit_results, evaluate_rom,
                    fit_learned_roms, horizon_sweep, impulse_states, run_surrogate_experiment, run_toy_experiment,
                    summarize, training_data, training_trajectories)
from .errors import EXIT_CONFIG, EXIT_FAILURE, EXIT_NUMERICAL, EXIT_OK, ConfigError, NumericalError
from .fom import Trajectory, linearize
from .kernelspace import KernelSpec, kernel_balance_from_snapshots
from .models import Run
from .rom import build_galerkin_rom, simulate_rom_many
from .schemas import ExperimentConfig, ResultManifest, default_config
from .storage import (compute_hash, config_hash, load_learned_rom, load_pod, load_projection, load_snapshots,
                      output_root, save_kernel_map, save_learned_rom, save_pod, save_projection, save_snapshots,
                      save_trajectory, write_spectrum)

logger = logging.getLogger(__name__)


def _configure_logging() -> None:
    level = os.getenv("COBRAS_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=level, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')


# ---------- config and paths ----------

def load_config(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if args.out:
        overrides.append(f"output.directory={args.out}")
    if args.config:
        return ExperimentConfig.load(Path(args.config), overrides)
    return ExperimentConfig.from_ini_text(default_config(args.experiment).to_ini(), overrides)


def output_dir(config: ExperimentConfig, command: str) -> Path:
    if config.output.directory:
        return Path(config.output.directory)
    return output_root() / command


def _snapshot_dir(args, config: ExperimentConfig) -> Path:
    if args.snapshots:
        return Path(args.snapshots)
    return output_dir(config, "sample")


def _held_out_trajectories(test: HeldOutSet, dt: float) -> List[Trajectory]:
    trajectories = []
    for j in range(test.states.shape[0]):
        inputs = test.inputs[j] if test.inputs.ndim == 3 else test.inputs
        trajectories.append(Trajectory(states=test.states[j], inputs=inputs, dt=dt, label=f"{test.label}-{j}"))
    return trajectories


def _load_model(path: Path, config: ExperimentConfig):
    """Galerkin ROM from a projection or POD directory, or a saved learned ROM."""
    fom_ode = build_system(config.system)
    if (path / "hyperparameters.json").exists():
        return load_learned_rom(path, base=fom_ode.discretize())
    if (path / "modes.csv").exists():
        return build_galerkin_rom(load_pod(path), fom_ode)
    if (path / "phi.csv").exists():
        proj = load_projection(path)
        return build_galerkin_rom(proj, fom_ode, method=proj.meta.get("method"))
    raise ConfigError(f"{path} holds no projection, POD basis or learned ROM")


def _model_name(model) -> str:
    return getattr(model, "method", None) or model.meta.get("method", "learned")


# ---------- subcommands ----------

def cmd_simulate(args, config: ExperimentConfig) -> int:
    """Training and held-out full-order trajectories as CSV."""
    fom = build_system(config.system).discretize()
    out = output_dir(config, "simulate")
    trajectories = training_trajectories(config, fom)
    for i, traj in enumerate(trajectories):
        save_trajectory(out / "train" / f"traj_{i:03d}.csv", traj, fom)
    test = build_test_set(config, fom)
    held_out = _held_out_trajectories(test, fom.dt)
    for i, traj in enumerate(held_out):
        save_trajectory(out / "test" / f"traj_{i:03d}.csv", traj, fom)
    logger.info(f"MAIN: wrote {len(trajectories)} training and {len(held_out)} test trajectories to {out}")
    print(out)
    return EXIT_OK


def cmd_sample(args, config: ExperimentConfig) -> int:
    fom = build_system(config.system).discretize()
    data = training_data(config, fom)
    out = output_dir(config, "sample")
    save_snapshots(out, "X", data.X)
    save_snapshots(out, "Y", data.Y)
    print(out)
    return EXIT_OK


def cmd_cobras(args, config: ExperimentConfig) -> int:
    source = _snapshot_dir(args, config)
    X, Y = load_snapshots(source, "X"), load_snapshots(source, "Y")
    out = output_dir(config, "cobras")
    for r in config.reduction.r:
        proj = cobras_balance(X, Y, r)
        save_projection(out / f"cobras_{r}", proj)
        write_spectrum(out / f"cobras_{r}" / "spectrum.csv", proj.spectrum)
    print(out)
    return EXIT_OK


def cmd_kcobras(args, config: ExperimentConfig) -> int:
    source = _snapshot_dir(args, config)
    X, Y = load_snapshots(source, "X"), load_snapshots(source, "Y")
    k = config.kernel
    kernel = KernelSpec(family=k.family, alpha=k.alpha, degree=k.degree, sigma=k.sigma)
    out = output_dir(config, "kcobras")
    for r in config.reduction.r:
        fm = kernel_balance_from_snapshots(kernel, X, Y, r)
        save_kernel_map(out / f"kcobras_{r}", fm)
        write_spectrum(out / f"kcobras_{r}" / "spectrum.csv", fm.spectrum)
    print(out)
    return EXIT_OK


def cmd_pod(args, config: ExperimentConfig) -> int:
    X = load_snapshots(_snapshot_dir(args, config), "X")
    out = output_dir(config, "pod")
    for r in config.reduction.r:
        save_pod(out / f"pod_{r}", pod_basis(X, r))
    print(out)
    return EXIT_OK


def cmd_bpod(args, config: ExperimentConfig) -> int:
    fom = build_system(config.system).discretize()
    linear = linearize(fom)
    out = output_dir(config, "bpod")
    for r in config.reduction.r:
        proj = bpod_projection(linear, config.reduction.bpod_horizon, r,
                               output_projection_rank=config.reduction.output_projection_rank,
                               impulse_states=impulse_states(config.system, [1.0]))
        save_projection(out / f"bpod_{r}", proj)
        write_spectrum(out / f"bpod_{r}" / "spectrum.csv", proj.spectrum)
    print(out)
    return EXIT_OK


def cmd_rom(args, config: ExperimentConfig) -> int:
    """Predicted trajectories of a saved model on the held-out set (and the sinusoid run)."""
    model = _load_model(Path(args.model), config)
    fom = build_system(config.system).discretize()
    out = output_dir(config, "rom") / _model_name(model)
    runs = [build_test_set(config, fom)]
    if config.test.sinusoid:
        runs.append(build_sinusoid_run(config, fom))
    for run in runs:
        batch = simulate_rom_many(model, run.inputs, x0s=run.x0s)
        for j in range(batch.states.shape[0]):
            inputs = run.inputs[j] if run.inputs.ndim == 3 else run.inputs
            predicted = Trajectory(states=batch.states[j], inputs=inputs, dt=fom.dt, label=f"{run.label}-{j}")
            save_trajectory(out / run.label / f"traj_{j:03d}.csv", predicted, fom)
        if batch.diverged:
            logger.warning(f"MAIN: {batch.diverged} {run.label} trajectories blew up")
    print(out)
    return EXIT_OK


def cmd_learn(args, config: ExperimentConfig) -> int:
    fom = build_system(config.system).discretize()
    data = training_data(config, fom)
    out = output_dir(config, "learn")
    for name, rom in fit_learned_roms(config, fom, data).items():
        save_learned_rom(out / name, rom)
    print(out)
    return EXIT_OK


def cmd_evaluate(args, config: ExperimentConfig) -> int:
    """Error curves and summaries of saved models on the held-out set."""
    fom = build_system(config.system).discretize()
    test = build_test_set(config, fom)
    kind = "state" if config.system.name == "chain" else "output"
    manifest = ResultManifest(experiment=f"evaluate-{config.experiment}", config_hash=config_hash(config),
                              version=__version__)
    for path in args.model:
        model = _load_model(Path(path), config)
        curves, blowup = evaluate_rom(model, test, kind=kind)
        summary = summarize(_model_name(model), model.r, config.sampling.seed, curves, blowup)
        manifest.methods.append(summary)
        manifest.attach_curves(summary.key, curves, test.times)
    emit_results(manifest, output_dir(config, "evaluate"), config.output.format, config=config)
    _print_summaries(manifest)
    return EXIT_OK


def _print_summaries(manifest: ResultManifest) -> None:
    for m in manifest.methods:
        mean = "-" if m.mean_error is None else f"{m.mean_error:.4g}"
        print(f"{m.method:>10} r={m.r:<3} mean={mean:>10} diverged={m.diverged}")


def _headline(manifest: ResultManifest):
    for m in manifest.methods:
        if m.method == "cobras":
            return m.mean_error
    return None


def run_recorded(config: ExperimentConfig, runner: Callable[[ExperimentConfig], ResultManifest],
                 out: Path) -> ResultManifest:
    """Run an experiment, emit its results and record the run in the ledger."""
    deps.init_db()
    with deps.get_db() as db:
        run = Run(experiment=config.experiment, config_hash=config_hash(config), output_dir=str(out))
        db.add(run)
        db.commit()
        db.refresh(run)
        logger.info(f"MAIN: run {run.id} started ({config.experiment})")
        try:
            manifest = runner(config)
            emit_results(manifest, out, config.output.format, config=config)
            manifest_path = out / "manifest.json"
            run.manifest_path = str(manifest_path)
            run.manifest_hash = compute_hash(manifest_path)
            run.cobras_error = _headline(manifest)
            run.diverged = sum(m.diverged for m in manifest.methods)
            run.status = "ok"
        except Exception as e:
            run.status = "failed"
            run.message = f"{type(e).__name__}: {e}"
            raise
        finally:
            run.finished_at = datetime.utcnow()
            db.commit()
            logger.info(f"MAIN: run {run.id} finished with status '{run.status}'")
    return manifest


def cmd_reproduce_toy(args, config: ExperimentConfig) -> int:
    manifest = run_recorded(config, run_toy_experiment, output_dir(config, "reproduce-toy"))
    _print_summaries(manifest)
    return EXIT_OK


def cmd_surrogate(args, config: ExperimentConfig) -> int:
    manifest = run_recorded(config, run_surrogate_experiment, output_dir(config, "surrogate"))
    _print_summaries(manifest)
    return EXIT_OK


def cmd_sweep(args, config: ExperimentConfig) -> int:
    errors = horizon_sweep(config, config.sampling.sweep_L)
    for L, err in errors.items():
        print(f"L={L:<3} mean={err:.4g}" if err is not None else f"L={L:<3} mean=-")
    return EXIT_OK


def cmd_history(args, config: ExperimentConfig) -> int:
    deps.init_db()
    with deps.get_db() as db:
        runs = db.query(Run).order_by(Run.created_at.desc()).limit(args.limit).all()
        for run in runs:
            err = "-" if run.cobras_error is None else f"{run.cobras_error:.4g}"
            print(f"{run.id}  {run.created_at:%Y-%m-%d %H:%M:%S}  {run.experiment:<10} {run.status:<8} "
                  f"cobras={err:<10} {run.output_dir}")
    return EXIT_OK


# ---------- argument parsing ----------

def _add_common(parser: argparse.ArgumentParser, experiment: str) -> None:
    parser.add_argument("--config", help="INI experiment config (defaults: shipped settings)")
    parser.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    parser.add_argument("--out", help="output directory, same as --set output.directory=...")
    parser.set_defaults(experiment=experiment)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cobras", description="Covariance balancing model reduction")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    commands = [
        ("simulate", cmd_simulate, "simulate the full-order training and test trajectories", "toy"),
        ("sample", cmd_sample, "build the state and gradient snapshot matrices", "toy"),
        ("cobras", cmd_cobras, "covariance balancing projection from snapshots", "toy"),
        ("kcobras", cmd_kcobras, "kernel covariance balancing features from snapshots", "toy"),
        ("pod", cmd_pod, "POD basis from state snapshots", "toy"),
        ("bpod", cmd_bpod, "balanced POD of the linearized model", "toy"),
        ("rom", cmd_rom, "run a saved model on the held-out inputs", "toy"),
        ("learn", cmd_learn, "fit K-CoBRAS and KPCA kernel-regression ROMs", "surrogate"),
        ("evaluate", cmd_evaluate, "error curves of saved models on the held-out set", "toy"),
        ("reproduce-toy", cmd_reproduce_toy, "full toy-model comparison", "toy"),
        ("surrogate", cmd_surrogate, "full comparison on the non-normal chain", "surrogate"),
        ("sweep", cmd_sweep, "CoBRAS error against the gradient horizon L", "toy"),
        ("history", cmd_history, "list recorded experiment runs", "toy"),
    ]
    for name, handler, help_text, experiment in commands:
        p = sub.add_parser(name, help=help_text)
        _add_common(p, experiment)
        p.set_defaults(handler=handler)
        if name in ("cobras", "kcobras", "pod"):
            p.add_argument("--snapshots", help="directory written by `sample` (default: its output directory)")
        if name == "rom":
            p.add_argument("--model", required=True, help="projection, POD or learned-ROM directory")
        if name == "evaluate":
            p.add_argument("--model", required=True, action="append", help="model directory; repeatable")
        if name == "history":
            p.add_argument("--limit", type=int, default=20)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
        logger.info(f"MAIN: {args.command} on {config.experiment} config {config_hash(config)[:12]}")
        return args.handler(args, config)
    except (ConfigError, ValidationError, configparser.Error) as e:
        logger.error(f"MAIN: configuration error: {e}")
        return EXIT_CONFIG
    except (NumericalError, np.linalg.LinAlgError) as e:
        logger.error(f"MAIN: numerical failure: {e}")
        return EXIT_NUMERICAL
    except ValueError as e:
        logger.error(f"MAIN: invalid arguments: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"MAIN: {args.command} failed: {e}")
        logger.error(f"MAIN: Full traceback: {traceback.format_exc()}")
        return EXIT_FAILURE


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
