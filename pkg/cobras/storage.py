"""
On-disk formats: CSV arrays at full double precision plus JSON sidecars.

Every `save_*` has a matching `load_*`. JSON is written with sorted keys so
identical content gives identical bytes.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .balance import BalancedProjection, PodBasis
from .fom import DiscreteSystem, Trajectory
from .kernelspace import KernelFeatureMap, KernelSpec, KpcaFeatureMap, _apply_G_inverse_rows
from .rom import KrrModel, LearnedRom, LinearFeatureMap
from .sampling import SnapshotMatrix

logger = logging.getLogger(__name__)

FLOAT_FORMAT = ".17g"


def output_root() -> Path:
    """Default results directory when a config does not name one."""
    return Path(os.getenv("COBRAS_OUTPUT_DIR", "_out"))


def _to_jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_metadata(path: Path, data: dict) -> None:
    """Sorted-key JSON. Non-finite floats are rejected; store missing values as None."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(data, indent=2, sort_keys=True, default=_to_jsonable, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def read_metadata(path: Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _fmt(value: float) -> str:
    return format(float(value), FLOAT_FORMAT)


def write_matrix(path: Path, array: np.ndarray, header: Optional[Sequence[str]] = None) -> None:
    """Rows of a 1-D or 2-D array as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.asarray(array, dtype=float)
    rows = array.reshape(-1, 1) if array.ndim == 1 else array
    np.savetxt(path, rows, fmt=f"%{FLOAT_FORMAT}", delimiter=",",
               header="" if header is None else ",".join(header), comments="", encoding="utf-8")


def read_matrix(path: Path, header: bool = False) -> np.ndarray:
    """Inverse of write_matrix; always returns a 2-D array."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()[1 if header else 0:]
    if not any(line.strip() for line in lines):
        return np.zeros((0, 0))
    return np.loadtxt(lines, delimiter=",", ndmin=2, dtype=float)


def compute_hash(*paths: Path) -> str:
    """SHA-256 over the contents of the given files, in order."""
    hasher = hashlib.sha256()
    for path in paths:
        path = Path(path)
        hasher.update(path.name.encode("utf-8"))
        if path.exists():
            hasher.update(path.read_bytes())
        else:
            hasher.update(b"MISSING")
    return hasher.hexdigest()


def config_hash(config) -> str:
    """SHA-256 of the canonical JSON form of an ExperimentConfig."""
    return hashlib.sha256(config.canonical_json().encode("utf-8")).hexdigest()


# ---------- trajectories ----------

def save_trajectory(path: Path, traj: Trajectory, sys: Optional[DiscreteSystem] = None) -> None:
    """Header t,x1..xn,u1..uq[,y1..ym]; the final sample has empty input fields."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, q0 = traj.n, traj.inputs.shape[0]
    outputs = traj.outputs(sys) if sys is not None else None
    header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(q0)]
    if outputs is not None:
        header += [f"y{i + 1}" for i in range(outputs.shape[0])]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for k, t in enumerate(traj.times):
            u = [_fmt(v) for v in traj.inputs[:, k]] if k < traj.T else [""] * q0
            row = [_fmt(t)] + [_fmt(v) for v in traj.states[:, k]] + u
            if outputs is not None:
                row += [_fmt(v) for v in outputs[:, k]]
            writer.writerow(row)


def load_trajectory(path: Path, label: str = "") -> Trajectory:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    n = sum(1 for h in header if h.startswith("x"))
    q0 = sum(1 for h in header if h.startswith("u"))
    times = np.array([float(r[0]) for r in body])
    states = np.array([[float(v) for v in r[1:1 + n]] for r in body]).T
    inputs = np.array([[float(v) for v in r[1 + n:1 + n + q0]] for r in body[:-1]]).reshape(-1, q0).T
    dt = float(times[1] - times[0]) if times.size > 1 else 1.0
    t0 = int(round(times[0] / dt)) if times.size > 1 else 0
    return Trajectory(states=states, inputs=inputs, t0=t0, dt=dt, label=label or Path(path).stem)


# ---------- snapshot matrices ----------

def save_snapshots(directory: Path, name: str, S: SnapshotMatrix) -> List[Path]:
    directory = Path(directory)
    paths = [directory / f"{name}.csv", directory / f"{name}.json"]
    write_matrix(paths[0], S.data)
    sidecar = dict(S.meta, kind=S.kind, n=S.n, s=S.samples, columns=S.columns)
    write_metadata(paths[1], sidecar)
    if S.base_states is not None:
        paths.append(directory / f"{name}.states.csv")
        write_matrix(paths[2], S.base_states)
    logger.info(f"STORAGE: wrote {S.kind} snapshots '{name}' ({S.n}x{S.columns}) to {directory}")
    return paths


def load_snapshots(directory: Path, name: str) -> SnapshotMatrix:
    directory = Path(directory)
    meta = read_metadata(directory / f"{name}.json")
    data = read_matrix(directory / f"{name}.csv").reshape(meta["n"], meta["columns"])
    states_path = directory / f"{name}.states.csv"
    base_states = read_matrix(states_path).reshape(data.shape) if states_path.exists() else None
    kind, samples = meta.pop("kind"), meta.pop("s")
    meta.pop("n")
    meta.pop("columns")
    return SnapshotMatrix(data=data, kind=kind, samples=samples, base_states=base_states, meta=meta)


# ---------- projections ----------

def save_projection(directory: Path, proj: BalancedProjection) -> List[Path]:
    directory = Path(directory)
    paths = [directory / "phi.csv", directory / "psi.csv", directory / "sigma.csv", directory / "meta.json"]
    write_matrix(paths[0], proj.phi)
    write_matrix(paths[1], proj.psi)
    write_matrix(paths[2], proj.sigma)
    meta = dict(proj.meta, n=proj.n, r=proj.r)
    if proj.spectrum is not None:
        meta["spectrum"] = proj.spectrum
    write_metadata(paths[3], meta)
    return paths


def load_projection(directory: Path) -> BalancedProjection:
    directory = Path(directory)
    meta = read_metadata(directory / "meta.json")
    n, r = meta["n"], meta["r"]
    spectrum = meta.pop("spectrum", None)
    return BalancedProjection(
        phi=read_matrix(directory / "phi.csv").reshape(n, r),
        psi=read_matrix(directory / "psi.csv").reshape(n, r),
        sigma=read_matrix(directory / "sigma.csv").ravel(),
        spectrum=None if spectrum is None else np.asarray(spectrum, dtype=float),
        meta=meta,
    )


def save_pod(directory: Path, basis: PodBasis) -> List[Path]:
    directory = Path(directory)
    paths = [directory / "modes.csv", directory / "singular_values.csv", directory / "meta.json"]
    write_matrix(paths[0], basis.modes)
    write_matrix(paths[1], basis.singular_values)
    write_metadata(paths[2], dict(basis.meta, n=basis.n, r=basis.r))
    return paths


def load_pod(directory: Path) -> PodBasis:
    directory = Path(directory)
    meta = read_metadata(directory / "meta.json")
    return PodBasis(
        modes=read_matrix(directory / "modes.csv").reshape(meta["n"], meta["r"]),
        singular_values=read_matrix(directory / "singular_values.csv").ravel(),
        meta=meta,
    )


# ---------- feature maps ----------

def save_kernel_map(directory: Path, fm: KernelFeatureMap) -> List[Path]:
    directory = Path(directory)
    arrays = {
        "state_samples": fm.state_samples,
        "gradient_points": fm.gradient_points,
        "gradients": fm.gradients,
        "U_r": fm.U_r,
        "sigma_r": fm.sigma_r,
        "V_r": fm.V_r,
        "y_star_k0": fm.y_star_k0,
    }
    paths = []
    for name, array in arrays.items():
        paths.append(directory / f"{name}.csv")
        write_matrix(paths[-1], array)
    meta = dict(fm.meta, kernel=fm.kernel.sidecar(), n=fm.n, r=fm.r, s_x=fm.s_x, s_g=fm.s_g)
    paths.append(directory / "meta.json")
    write_metadata(paths[-1], meta)
    return paths


def load_kernel_map(directory: Path) -> KernelFeatureMap:
    directory = Path(directory)
    meta = read_metadata(directory / "meta.json")
    n, r, s_x, s_g = meta["n"], meta["r"], meta["s_x"], meta["s_g"]
    kernel = KernelSpec(**meta["kernel"])
    points = read_matrix(directory / "gradient_points.csv").reshape(n, s_g)
    grads = read_matrix(directory / "gradients.csv").reshape(n, s_g)
    return KernelFeatureMap(
        kernel=kernel,
        state_samples=read_matrix(directory / "state_samples.csv").reshape(n, s_x),
        gradient_points=points,
        gradients=grads,
        U_r=read_matrix(directory / "U_r.csv").reshape(s_g, r),
        sigma_r=read_matrix(directory / "sigma_r.csv").ravel(),
        V_r=read_matrix(directory / "V_r.csv").reshape(s_x, r),
        y_star_k0=read_matrix(directory / "y_star_k0.csv").ravel(),
        lifted_gradients=_apply_G_inverse_rows(kernel, points.T, grads.T),
        meta=meta,
    )


def save_kpca(directory: Path, fm: KpcaFeatureMap) -> List[Path]:
    directory = Path(directory)
    paths = [directory / "state_samples.csv", directory / "coefficients.csv",
             directory / "eigenvalues.csv", directory / "meta.json"]
    write_matrix(paths[0], fm.state_samples)
    write_matrix(paths[1], fm.coefficients)
    write_matrix(paths[2], fm.eigenvalues)
    n, s_x = fm.state_samples.shape
    write_metadata(paths[3], dict(fm.meta, kernel=fm.kernel.sidecar(), n=n, s_x=s_x, r=fm.r,
                                  k_samples_zero=fm.k_samples_zero, k_zero_zero=fm.k_zero_zero))
    return paths


def load_kpca(directory: Path) -> KpcaFeatureMap:
    directory = Path(directory)
    meta = read_metadata(directory / "meta.json")
    n, s_x, r = meta["n"], meta["s_x"], meta["r"]
    return KpcaFeatureMap(
        kernel=KernelSpec(**meta["kernel"]),
        state_samples=read_matrix(directory / "state_samples.csv").reshape(n, s_x),
        coefficients=read_matrix(directory / "coefficients.csv").reshape(s_x, r),
        eigenvalues=read_matrix(directory / "eigenvalues.csv").ravel(),
        k_samples_zero=np.asarray(meta.pop("k_samples_zero"), dtype=float),
        k_zero_zero=float(meta.pop("k_zero_zero")),
        meta=meta,
    )


def _save_krr(directory: Path, name: str, model: KrrModel) -> List[Path]:
    paths = [directory / f"{name}.train_inputs.csv", directory / f"{name}.dual_coef.csv"]
    write_matrix(paths[0], model.train_inputs)
    write_matrix(paths[1], model.dual_coef)
    return paths


def _load_krr(directory: Path, name: str, params: Dict) -> KrrModel:
    N, d, c = params["N"], params["d"], params["c"]
    return KrrModel(
        train_inputs=read_matrix(directory / f"{name}.train_inputs.csv").reshape(N, d),
        dual_coef=read_matrix(directory / f"{name}.dual_coef.csv").reshape(N, c),
        rbf_gamma=params["rbf_gamma"],
        ridge_alpha=params["ridge_alpha"],
        input_scale=np.asarray(params["input_scale"], dtype=float),
        target_scale=np.asarray(params["target_scale"], dtype=float),
    )


def _krr_params(model: KrrModel) -> Dict:
    return {
        "N": model.train_inputs.shape[0],
        "d": model.d,
        "c": model.c,
        "rbf_gamma": model.rbf_gamma,
        "ridge_alpha": model.ridge_alpha,
        "input_scale": model.input_scale,
        "target_scale": model.target_scale,
    }


def save_learned_rom(directory: Path, rom: LearnedRom) -> List[Path]:
    """KRR weights as CSV, hyper-parameters as JSON, the feature map in a subdirectory."""
    directory = Path(directory)
    paths = _save_krr(directory, "dynamics", rom.dynamics) + _save_krr(directory, "reconstruction", rom.reconstruction)
    paths += [directory / "basis_phi.csv", directory / "basis_psi.csv"]
    write_matrix(paths[-2], rom.linear_basis.phi)
    write_matrix(paths[-1], rom.linear_basis.psi)

    fm = rom.feature_map
    if isinstance(fm, KernelFeatureMap):
        kind = "kcobras"
        paths += save_kernel_map(directory / "features", fm)
    elif isinstance(fm, KpcaFeatureMap):
        kind = "kpca"
        paths += save_kpca(directory / "features", fm)
    elif isinstance(fm, LinearFeatureMap):
        kind = "linear"
        paths += [directory / "features" / "phi.csv", directory / "features" / "psi.csv"]
        write_matrix(paths[-2], fm.phi)
        write_matrix(paths[-1], fm.psi)
    else:
        raise TypeError(f"cannot save feature map of type {type(fm).__name__}")
    meta = {
        "feature_map": kind,
        "basis_method": rom.linear_basis.method,
        "n": rom.linear_basis.phi.shape[0],
        "r": rom.r,
        "R": rom.R,
        "dynamics": _krr_params(rom.dynamics),
        "reconstruction": _krr_params(rom.reconstruction),
        "rom": rom.meta,
    }
    paths.append(directory / "hyperparameters.json")
    write_metadata(paths[-1], meta)
    logger.info(f"STORAGE: wrote learned ROM ({kind}, r={rom.r}, R={rom.R}) to {directory}")
    return paths


def load_learned_rom(directory: Path, base: Optional[DiscreteSystem] = None) -> LearnedRom:
    directory = Path(directory)
    meta = read_metadata(directory / "hyperparameters.json")
    n, r, R = meta["n"], meta["r"], meta["R"]
    if meta["feature_map"] == "kcobras":
        fm = load_kernel_map(directory / "features")
    elif meta["feature_map"] == "kpca":
        fm = load_kpca(directory / "features")
    else:
        fm = LinearFeatureMap(phi=read_matrix(directory / "features" / "phi.csv").reshape(n, r),
                              psi=read_matrix(directory / "features" / "psi.csv").reshape(n, r))
    basis = LinearFeatureMap(phi=read_matrix(directory / "basis_phi.csv").reshape(n, R),
                             psi=read_matrix(directory / "basis_psi.csv").reshape(n, R),
                             method=meta["basis_method"])
    return LearnedRom(
        feature_map=fm,
        dynamics=_load_krr(directory, "dynamics", meta["dynamics"]),
        reconstruction=_load_krr(directory, "reconstruction", meta["reconstruction"]),
        linear_basis=basis,
        base=base,
        meta=meta["rom"],
    )


# ---------- result files ----------

def write_curves(directory: Path, key: str, times: np.ndarray, curves: np.ndarray, fmt: str = "csv") -> List[Path]:
    """One `t,err` file per trajectory under `{key}/`, or a single `{key}.json`."""
    directory = Path(directory)
    curves = np.atleast_2d(np.asarray(curves, dtype=float))
    if fmt == "json":
        path = directory / f"{key}.json"
        err = [[None if np.isnan(v) else float(v) for v in curve] for curve in curves]
        write_metadata(path, {"t": times, "err": err})
        return [path]
    paths = []
    for i, curve in enumerate(curves):
        path = directory / key / f"traj_{i:03d}.csv"
        write_matrix(path, np.column_stack([times, curve]), header=["t", "err"])
        paths.append(path)
    return paths


def read_curve(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    data = read_matrix(path, header=True)
    return data[:, 0], data[:, 1]


def write_spectrum(path: Path, sigma: Iterable[float]) -> Path:
    values = np.sort(np.asarray(list(sigma), dtype=float))[::-1]
    write_matrix(path, values, header=["sigma"])
    return Path(path)
