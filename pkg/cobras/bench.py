"""
Experiment pipelines.

`run_toy_experiment` reproduces the three-state toy study (CoBRAS, POD and
BPOD Petrov-Galerkin ROMs evaluated on random impulses and a sinusoidal
forcing). `run_surrogate_experiment` runs the same comparison plus the two
kernel-feature ROMs on the non-normal chain. Both return a ResultManifest;
`emit_results` turns one into files.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from jinja2 import Environment, FileSystemLoader

from . import __version__
from .balance import BalancedProjection, bpod_projection, cobras_balance, effective_rank, pod_basis, truncation_bound
from .errors import ConfigError, NumericalBlowUp
from .fom import (DiscreteSystem, OdeSystem, Trajectory, chain_impulse_state, linearize, nonnormal_chain,
                  simulate, toy_impulse_state, toy_model)
from .kernelspace import KernelSpec, fit_kpca, kernel_balance_from_snapshots
from .rom import (GalerkinRom, KrrGrid, LearnedRom, batch_outputs, build_galerkin_rom, learn_feature_rom,
                  linear_coordinates, normalized_error, simulate_many, simulate_rom_many)
from .sampling import (GradientSampleSpec, SnapshotMatrix, build_state_matrix, concat_snapshots,
                       leading_selection, make_rng, sample_gradients_long)
from .schemas import ExperimentConfig, MethodSummary, ResultManifest, SystemConfig
from .storage import config_hash, write_curves, write_metadata, write_spectrum

logger = logging.getLogger(__name__)

VIEWS_DIR = Path(__file__).parent / "views"
CHAIN_SIZES = (50, 500)
SUMMARY_COLUMNS = ("method", "r", "seed", "mean_error", "median_error", "diverged", "first_divergence_step",
                   "sinusoid_error", "reconstruction_error")


# ---------- systems and data ----------

def build_system(cfg: SystemConfig) -> OdeSystem:
    if cfg.name == "toy":
        return toy_model(dt=cfg.dt, substeps=cfg.substeps)
    return nonnormal_chain(n=cfg.n, alpha=cfg.alpha, beta=cfg.beta, epsilon=cfg.epsilon,
                           dt=cfg.dt, substeps=cfg.substeps)


def impulse_states(cfg: SystemConfig, amplitudes: Sequence[float]) -> np.ndarray:
    """Initial states (n, B) of impulse responses with the given magnitudes."""
    if cfg.name == "toy":
        return np.column_stack([toy_impulse_state(a) for a in amplitudes])
    return np.column_stack([chain_impulse_state(cfg.n, a) for a in amplitudes])


@dataclass(frozen=True, eq=False)
class TrainingData:
    trajectories: List[Trajectory]
    X: SnapshotMatrix
    Y: SnapshotMatrix


def training_trajectories(config: ExperimentConfig, fom: DiscreteSystem) -> List[Trajectory]:
    """
    One trajectory per training amplitude, L steps longer than the sampled span
    so that every sampled state has a full gradient horizon behind it.
    """
    s = config.sampling
    T = s.samples_per_trajectory - 1 + s.L
    children = np.random.SeedSequence(s.seed).spawn(len(s.training_amplitudes))
    trajectories = []
    for i, (amplitude, child) in enumerate(zip(s.training_amplitudes, children)):
        if s.training_input == "impulse":
            x0 = impulse_states(config.system, [amplitude])[:, 0]
            inputs = np.zeros((fom.q0, T))
        else:
            x0 = np.zeros(fom.n)
            inputs = amplitude * make_rng(child).standard_normal((fom.q0, T))
        trajectories.append(simulate(fom, x0, inputs, label=f"train-{i}-{amplitude:g}"))
    return trajectories


def _gradient_seeds(seed: int, count: int) -> List[int]:
    # distinct from the streams that drive the training inputs
    children = np.random.SeedSequence([seed, 1]).spawn(count)
    return [int(child.generate_state(1)[0]) for child in children]


def training_data(config: ExperimentConfig, fom: DiscreteSystem) -> TrainingData:
    s = config.sampling
    trajectories = training_trajectories(config, fom)
    X = build_state_matrix(trajectories, leading_selection(trajectories, s.samples_per_trajectory))
    parts = []
    for traj, seed in zip(trajectories, _gradient_seeds(s.seed, len(trajectories))):
        spec = GradientSampleSpec(L=s.L, s_g=s.s_g, eta_distribution=s.eta_distribution, seed=seed)
        parts.append(sample_gradients_long(fom, traj, spec))
    Y = concat_snapshots(parts)
    logger.info(f"BENCH: training data from {len(trajectories)} trajectories, "
                f"{X.columns} state and {Y.columns} gradient columns")
    return TrainingData(trajectories=trajectories, X=X, Y=Y)


@dataclass(frozen=True, eq=False)
class HeldOutSet:
    x0s: np.ndarray  # (n, count)
    inputs: np.ndarray  # (q0, T) shared or (count, q0, T)
    states: np.ndarray  # (count, n, T+1)
    outputs: np.ndarray  # (count, m0, T+1)
    times: np.ndarray  # (T+1,)
    label: str = "test"


def _run_fom(fom: DiscreteSystem, x0s: np.ndarray, inputs: np.ndarray, label: str) -> HeldOutSet:
    states, blowup = simulate_many(fom, x0s, inputs)
    bad = [j for j, step in enumerate(blowup) if step is not None]
    if bad:
        raise NumericalBlowUp(f"BENCH: full-order model blew up on {label} trajectory {bad[0]}",
                              step=blowup[bad[0]])
    outputs = batch_outputs(fom, states, inputs)
    times = np.arange(states.shape[-1]) * fom.dt
    return HeldOutSet(x0s=x0s, inputs=inputs, states=states, outputs=outputs, times=times, label=label)


def build_test_set(config: ExperimentConfig, fom: DiscreteSystem) -> HeldOutSet:
    """Held-out trajectories with magnitudes drawn uniformly from the configured range."""
    t = config.test
    rng = make_rng(t.seed)
    amplitudes = rng.uniform(t.amplitude_low, t.amplitude_high, size=t.count)
    if t.input == "impulse":
        x0s = impulse_states(config.system, amplitudes)
        inputs = np.zeros((fom.q0, t.steps))
    else:
        x0s = np.zeros((fom.n, t.count))
        inputs = amplitudes[:, None, None] * rng.standard_normal((t.count, fom.q0, t.steps))
    return _run_fom(fom, x0s, inputs, "test")


def build_sinusoid_run(config: ExperimentConfig, fom: DiscreteSystem) -> HeldOutSet:
    """u(t) = sin(t) held over each sampling interval, starting at rest."""
    steps = config.test.sinusoid_steps
    inputs = np.tile(np.sin(np.arange(steps) * fom.dt), (fom.q0, 1))
    return _run_fom(fom, np.zeros((fom.n, 1)), inputs, "sinusoid")


# ---------- evaluation ----------

def _mean_or_none(values: np.ndarray) -> Optional[float]:
    return float(np.mean(values)) if values.size else None


def evaluate_rom(rom, test: HeldOutSet, kind: str = "output") -> Tuple[np.ndarray, List[Optional[int]]]:
    """Normalized error curves (count, T+1) of a ROM on a test set, plus blow-up steps."""
    batch = simulate_rom_many(rom, test.inputs, x0s=test.x0s)
    if kind == "state":
        curves = normalized_error(batch.states, test.states, kind="state")
    else:
        curves = normalized_error(batch.outputs, test.outputs, kind="output")
    return curves, batch.blowup_steps


def summarize(method: str, r: int, seed: int, curves: np.ndarray,
              blowup: Sequence[Optional[int]]) -> MethodSummary:
    """Mean and median errors over the trajectories that stayed bounded."""
    kept = np.array([step is None for step in blowup], dtype=bool)
    finite = curves[kept]
    return MethodSummary(
        method=method,
        r=r,
        seed=seed,
        mean_error=_mean_or_none(finite),
        median_error=float(np.median(finite.mean(axis=1))) if finite.size else None,
        diverged=int(np.sum(~kept)),
        blowup_steps=list(blowup),
    )


def reconstruction_error(rom: LearnedRom, test: HeldOutSet) -> float:
    """Error of the linear coordinates recovered from the true states' features."""
    count, n, T1 = test.states.shape
    flat = test.states.transpose(1, 0, 2).reshape(n, -1)
    z = np.asarray(rom.feature_map.features(flat)).reshape(rom.r, -1)
    predicted = rom.reconstruction.predict(z)
    true = rom.linear_basis.features(flat)
    R = true.shape[0]
    curves = normalized_error(predicted.reshape(R, count, T1).transpose(1, 0, 2),
                              true.reshape(R, count, T1).transpose(1, 0, 2), kind="state")
    return float(np.mean(curves))


def _record(manifest: ResultManifest, summary: MethodSummary, curves: np.ndarray, times: np.ndarray) -> None:
    manifest.methods.append(summary)
    manifest.attach_curves(summary.key, curves, times)
    logger.info(f"BENCH: {summary.key} mean error {summary.mean_error}, diverged {summary.diverged}")


def _galerkin_methods(config: ExperimentConfig, fom_ode: OdeSystem, data: TrainingData, r: int,
                      bpod_states: np.ndarray) -> Tuple[Dict[str, GalerkinRom], Dict[str, BalancedProjection]]:
    fom = fom_ode.discretize()
    cobras = cobras_balance(data.X, data.Y, r)
    pod = pod_basis(data.X, r)
    bpod = bpod_projection(linearize(fom), config.reduction.bpod_horizon, r,
                           output_projection_rank=config.reduction.output_projection_rank,
                           impulse_states=bpod_states)
    return {
        "cobras": build_galerkin_rom(cobras, fom_ode),
        "pod": build_galerkin_rom(pod, fom_ode),
        "bpod": build_galerkin_rom(bpod, fom_ode, method="bpod"),
    }, {"cobras": cobras, "bpod": bpod}


def _new_manifest(config: ExperimentConfig, data: TrainingData) -> ResultManifest:
    manifest = ResultManifest(experiment=config.experiment, config_hash=config_hash(config), version=__version__)
    manifest.extras["effective_rank"] = {"X": effective_rank(data.X), "Y": effective_rank(data.Y)}
    manifest.extras["samples"] = {"s_x": data.X.samples, "s_g": data.Y.samples,
                                  "state_columns": data.X.columns, "gradient_columns": data.Y.columns}
    return manifest


# ---------- experiments ----------

def run_toy_experiment(config: ExperimentConfig) -> ResultManifest:
    if config.experiment != "toy" or config.system.name != "toy":
        raise ConfigError(f"toy experiment needs system 'toy', got experiment '{config.experiment}' "
                          f"on system '{config.system.name}'")
    fom_ode = build_system(config.system)
    fom = fom_ode.discretize()
    data = training_data(config, fom)
    test = build_test_set(config, fom)
    sinusoid = build_sinusoid_run(config, fom) if config.test.sinusoid else None
    seed = config.sampling.seed

    manifest = _new_manifest(config, data)
    bounds = {}
    for r in config.reduction.r:
        roms, projections = _galerkin_methods(config, fom_ode, data, r, impulse_states(config.system, [1.0]))
        bounds[str(r)] = truncation_bound(projections["cobras"], data.X, data.Y)
        for name, proj in projections.items():
            manifest.spectra[f"{name}_{r}_{seed}"] = [float(v) for v in proj.spectrum]
        for name in sorted(roms):
            curves, blowup = evaluate_rom(roms[name], test)
            summary = summarize(name, roms[name].r, seed, curves, blowup)
            if sinusoid is not None:
                sin_curves, sin_blowup = evaluate_rom(roms[name], sinusoid)
                summary.sinusoid_blowup_step = sin_blowup[0]
                if sin_blowup[0] is None:
                    summary.sinusoid_error = float(np.mean(sin_curves))
                else:
                    logger.warning(f"BENCH: {name} r={roms[name].r} diverged on the sinusoid at step {sin_blowup[0]}")
                manifest.attach_curves(f"{name}-sinusoid_{roms[name].r}_{seed}", sin_curves, sinusoid.times)
            _record(manifest, summary, curves, test.times)
    manifest.extras["truncation_bound"] = bounds
    logger.info(f"BENCH: toy experiment done, {len(manifest.methods)} method summaries")
    return manifest


def check_surrogate(config: ExperimentConfig) -> None:
    lo, hi = CHAIN_SIZES
    if config.experiment != "surrogate" or config.system.name != "chain":
        raise ConfigError(f"surrogate experiment needs system 'chain', got '{config.system.name}'")
    if not lo <= config.system.n <= hi:
        raise ConfigError(f"surrogate chain size n={config.system.n} outside [{lo}, {hi}]")


def fit_learned_roms(config: ExperimentConfig, fom: DiscreteSystem, data: TrainingData) -> Dict[str, LearnedRom]:
    """
    K-CoBRAS and KPCA feature ROMs that reconstruct one shared set of leading
    CoBRAS coordinates, so their reconstruction errors measure the same target.
    """
    red = config.reduction
    kernel = KernelSpec(family=config.kernel.family, alpha=config.kernel.alpha,
                        degree=config.kernel.degree, sigma=config.kernel.sigma)
    grid = KrrGrid(alpha_grid=config.krr.alpha_grid, gamma_grid=config.krr.gamma_grid,
                   folds=config.krr.folds, seed=config.krr.seed)
    states = np.sqrt(data.X.columns) * data.X.data

    kcobras = kernel_balance_from_snapshots(kernel, data.X, data.Y, red.learned_r)
    kpca = fit_kpca(kernel, states, red.learned_r)
    coords = linear_coordinates(cobras_balance(data.X, data.Y, red.learned_R), red.learned_R)
    return {
        "kcobras": learn_feature_rom(kcobras, data.trajectories, coords, grid, base=fom, method="kcobras"),
        "kpca": learn_feature_rom(kpca, data.trajectories, coords, grid, base=fom, method="kpca"),
    }


def run_surrogate_experiment(config: ExperimentConfig) -> ResultManifest:
    check_surrogate(config)
    fom_ode = build_system(config.system)
    fom = fom_ode.discretize()
    data = training_data(config, fom)
    test = build_test_set(config, fom)
    seed = config.sampling.seed

    manifest = _new_manifest(config, data)
    bpod_states = impulse_states(config.system, [1.0])
    for r in config.reduction.r:
        roms, projections = _galerkin_methods(config, fom_ode, data, r, bpod_states)
        for name, proj in projections.items():
            manifest.spectra[f"{name}_{r}_{seed}"] = [float(v) for v in proj.spectrum]
        for name in sorted(roms):
            curves, blowup = evaluate_rom(roms[name], test, kind="state")
            _record(manifest, summarize(name, roms[name].r, seed, curves, blowup), curves, test.times)

    learned = fit_learned_roms(config, fom, data)
    hyper = {}
    for name in sorted(learned):
        rom = learned[name]
        curves, blowup = evaluate_rom(rom, test, kind="state")
        summary = summarize(name, rom.r, seed, curves, blowup)
        summary.reconstruction_error = reconstruction_error(rom, test)
        _record(manifest, summary, curves, test.times)
        hyper[name] = {"dynamics": rom.meta["dynamics"], "reconstruction": rom.meta["reconstruction"],
                       "R": rom.R}
    manifest.spectra[f"kcobras_{config.reduction.learned_r}_{seed}"] = [
        float(v) for v in learned["kcobras"].feature_map.spectrum]
    manifest.extras["krr"] = hyper
    logger.info(f"BENCH: surrogate experiment done on n={config.system.n}")
    return manifest


def horizon_sweep(config: ExperimentConfig, horizons: Sequence[int]) -> Dict[int, float]:
    """Mean CoBRAS test error at the first configured r for each gradient horizon L."""
    if config.system.name != "toy":
        raise ConfigError("horizon sweep runs on the toy model")
    fom_ode = build_system(config.system)
    fom = fom_ode.discretize()
    test = build_test_set(config, fom)
    r = config.reduction.r[0]
    errors = {}
    for L in horizons:
        swept = config.model_copy(update={"sampling": config.sampling.model_copy(update={"L": int(L)})})
        data = training_data(swept, fom)
        rom = build_galerkin_rom(cobras_balance(data.X, data.Y, r), fom_ode)
        curves, blowup = evaluate_rom(rom, test)
        errors[int(L)] = summarize("cobras", rom.r, config.sampling.seed, curves, blowup).mean_error
        logger.info(f"BENCH: horizon L={L} mean error {errors[int(L)]}")
    return errors


# ---------- output ----------

def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _write_summary_csv(path: Path, methods: Sequence[MethodSummary]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for summary in methods:
            row = dict(summary.model_dump(), first_divergence_step=summary.first_divergence_step)
            writer.writerow([_cell(row[column]) for column in SUMMARY_COLUMNS])
    return path


def render_summary(manifest: ResultManifest) -> str:
    env = Environment(loader=FileSystemLoader(str(VIEWS_DIR)), keep_trailing_newline=True)
    context = {
        "manifest": manifest,
        "methods": sorted(manifest.methods, key=lambda m: (m.method, m.r, m.seed)),
        "spectra": {key: manifest.spectra[key][:10] for key in sorted(manifest.spectra)},
    }
    return env.get_template("summary.md.j2").render(context)


def emit_results(manifest: ResultManifest, directory: Path, fmt: str = "csv",
                 config: Optional[ExperimentConfig] = None) -> List[Path]:
    """
    Write curves, spectra, summary tables and `manifest.json` under `directory`.

    Files are named `{method}_{r}_{seed}`; the manifest lists them relative to
    `directory` and is written last.
    """
    if fmt not in ("csv", "json"):
        raise ConfigError(f"unknown output format '{fmt}'")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths: List[Path] = []
    for key in sorted(manifest.curves):
        times, curves = manifest.curves[key]
        paths.extend(write_curves(directory / "curves", key, times, curves, fmt))
    for key in sorted(manifest.spectra):
        if fmt == "csv":
            paths.append(write_spectrum(directory / "spectra" / f"sigma_{key}.csv", manifest.spectra[key]))
        else:
            path = directory / "spectra" / f"sigma_{key}.json"
            write_metadata(path, {"sigma": sorted(manifest.spectra[key], reverse=True)})
            paths.append(path)
    paths.append(_write_summary_csv(directory / "summary.csv", manifest.methods))
    summary_md = directory / "summary.md"
    summary_md.write_text(render_summary(manifest), encoding="utf-8")
    paths.append(summary_md)
    if config is not None:
        config_path = directory / "config.ini"
        config_path.write_text(config.to_ini(), encoding="utf-8")
        paths.append(config_path)

    manifest.files = sorted(p.relative_to(directory).as_posix() for p in paths)
    manifest_path = directory / "manifest.json"
    write_metadata(manifest_path, manifest.model_dump())
    logger.info(f"BENCH: wrote {len(paths)} result files and manifest to {directory}")
    return paths + [manifest_path]
