"""
Covariance factors from trajectory data.

X stacks sampled states, Y stacks adjoint-computed output gradients. Both are
scaled so that X Xᵀ and Y Yᵀ are the empirical state and gradient covariances.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .fom import DiscreteSystem, Trajectory

logger = logging.getLogger(__name__)

# sidecar entries that describe a single sampler run
PER_PART_KEYS = ("seed", "s_g", "N")

ETA_DISTRIBUTIONS = ("gaussian", "rademacher")


def make_rng(seed) -> np.random.Generator:
    """Counter-based 64-bit generator; never touches numpy's global state."""
    return np.random.Generator(np.random.Philox(seed))


def spawn_rngs(seed, count: int) -> List[np.random.Generator]:
    """Independent per-sample streams, so draws do not depend on evaluation order."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.Philox(child)) for child in children]


@dataclass(frozen=True, eq=False)
class SnapshotMatrix:
    data: np.ndarray  # (n, columns), already scaled
    kind: str  # "state" | "gradient"
    samples: int
    base_states: Optional[np.ndarray] = None  # (n, columns): state each gradient column was taken at
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("state", "gradient"):
            raise ValueError(f"unknown snapshot kind '{self.kind}'")
        if self.data.ndim != 2:
            raise ValueError(f"snapshot data must be 2-D, got shape {self.data.shape}")
        if self.base_states is not None and self.base_states.shape != self.data.shape:
            raise ValueError("base_states must match the snapshot data shape")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def s(self) -> int:
        return self.samples

    @property
    def columns(self) -> int:
        return self.data.shape[1]

    def covariance(self) -> np.ndarray:
        """Dense n x n covariance. Only for small n."""
        return self.data @ self.data.T


@dataclass(frozen=True, eq=False)
class RandomDirection:
    tau: int
    eta: np.ndarray


@dataclass(frozen=True)
class GradientSampleSpec:
    L: int
    s_g: int
    eta_distribution: str = "gaussian"
    seed: int = 0

    def __post_init__(self):
        if self.L < 0:
            raise ValueError(f"horizon L must be >= 0, got {self.L}")
        if self.s_g < 1:
            raise ValueError(f"s_g must be >= 1, got {self.s_g}")
        if self.eta_distribution not in ETA_DISTRIBUTIONS:
            raise ValueError(f"eta_distribution must be one of {ETA_DISTRIBUTIONS}")

    def sidecar(self) -> Dict:
        return {"L": self.L, "s_g": self.s_g, "eta_distribution": self.eta_distribution, "seed": self.seed}


def _draw_zeta(m0: int, distribution: str, rng: np.random.Generator, count: Optional[int] = None) -> np.ndarray:
    shape = (m0,) if count is None else (m0, count)
    if distribution == "gaussian":
        return rng.standard_normal(shape)
    if distribution == "rademacher":
        return 2.0 * rng.integers(0, 2, size=shape) - 1.0
    raise ValueError(f"unknown eta distribution '{distribution}'")


def draw_random_direction(m0: int, L: int, distribution: str, rng: np.random.Generator) -> RandomDirection:
    """tau uniform on 0..L and eta with covariance (L+1) I, so xi = e_tau (x) eta is isotropic."""
    if L < 0:
        raise ValueError(f"L must be >= 0, got {L}")
    tau = int(rng.integers(0, L + 1))
    eta = np.sqrt(L + 1.0) * _draw_zeta(m0, distribution, rng)
    return RandomDirection(tau=tau, eta=eta)


def draw_random_directions(m0: int, L: int, count: int, distribution: str,
                           rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Batch version: returns taus (count,) and etas (m0, count)."""
    if L < 0:
        raise ValueError(f"L must be >= 0, got {L}")
    taus = rng.integers(0, L + 1, size=count)
    etas = np.sqrt(L + 1.0) * _draw_zeta(m0, distribution, rng, count)
    return taus, etas


def leading_selection(trajectories: Sequence[Trajectory], count: int) -> List[Tuple[int, int]]:
    """(trajectory, local index) pairs for the first `count` states of every trajectory."""
    pairs = []
    for i, traj in enumerate(trajectories):
        if count > traj.T + 1:
            raise ValueError(f"trajectory {i} has {traj.T + 1} states, {count} requested")
        pairs.extend((i, k) for k in range(count))
    return pairs


def build_state_matrix(trajectories: Sequence[Trajectory],
                       selection: Optional[Sequence[Tuple[int, int]]] = None,
                       reference: Optional[np.ndarray] = None) -> SnapshotMatrix:
    """
    Column-stack selected states scaled by 1/sqrt(s_x).

    States are taken about the origin, not the sample mean. `reference` is an
    optional shift (typically an equilibrium) subtracted first.
    """
    if not trajectories:
        raise ValueError("no trajectories given")
    n = trajectories[0].n
    for i, traj in enumerate(trajectories):
        if traj.n != n:
            raise ValueError(f"trajectory {i} has state dimension {traj.n}, expected {n}")
    if selection is None:
        selection = [(i, k) for i, traj in enumerate(trajectories) for k in range(traj.T + 1)]
    if len(selection) == 0:
        raise ValueError("empty state selection")

    columns = np.column_stack([trajectories[i].states[:, k] for i, k in selection])
    if reference is not None:
        reference = np.asarray(reference, dtype=float)
        if reference.shape != (n,):
            raise ValueError(f"reference state must have shape ({n},)")
        columns = columns - reference[:, None]
    s_x = columns.shape[1]
    meta = {
        "sources": sorted({trajectories[i].label for i, _ in selection}),
        "shifted": reference is not None,
    }
    logger.info(f"SAMPLING: state matrix with {s_x} samples (n={n})")
    return SnapshotMatrix(data=columns / np.sqrt(s_x), kind="state", samples=s_x, meta=meta)


def adjoint_gradient_sequence(sys: DiscreteSystem, traj: Trajectory, t_f: int, eta, k_max: int) -> List[np.ndarray]:
    """
    Gradients g(t_f - k, k) of eta^T y(t_f) with respect to x(t_f - k), k = 0..k_max.

    `t_f` is an absolute time index; the recursion walks backwards along the
    stored states with the adjoint step map.
    """
    local = t_f - traj.t0
    if local < 0 or local > traj.T:
        raise IndexError(f"t_f={t_f} outside trajectory [{traj.t0}, {traj.t0 + traj.T}]")
    if k_max < 0 or k_max > local:
        raise IndexError(f"k_max={k_max} must lie in [0, {local}]")
    sys.require_adjoint()
    eta = np.asarray(eta, dtype=float)
    g = sys.adjoint_output(traj.states[:, local], traj.input_at(local), eta)
    sequence = [g]
    for k in range(1, k_max + 1):
        j = local - k
        g = sys.adjoint_step(traj.states[:, j], traj.inputs[:, j], g)
        sequence.append(g)
    return sequence


def sample_gradients_stationary(sys: DiscreteSystem, minitrajectories: Sequence[Trajectory],
                                spec: GradientSampleSpec) -> SnapshotMatrix:
    """
    One gradient block per mini-trajectory of L+1 states, for statistically stationary data.

    Every horizon offset of the drawn direction is kept, so block i is
    [g(L,0), g(L-1,1), ..., g(0,L)] / sqrt(L+1).
    """
    L = spec.L
    if len(minitrajectories) != spec.s_g:
        raise ValueError(f"expected {spec.s_g} mini-trajectories, got {len(minitrajectories)}")
    for i, traj in enumerate(minitrajectories):
        if traj.T != L:
            raise ValueError(f"mini-trajectory {i} has {traj.T + 1} states, expected L+1={L + 1}")

    blocks, bases = [], []
    for traj, rng in zip(minitrajectories, spawn_rngs(spec.seed, spec.s_g)):
        eta = np.sqrt(L + 1.0) * _draw_zeta(sys.m0, spec.eta_distribution, rng)
        sequence = adjoint_gradient_sequence(sys, traj, traj.t0 + L, eta, L)
        blocks.append(np.column_stack(sequence) / np.sqrt(L + 1.0))
        bases.append(traj.states[:, ::-1])
    data = np.hstack(blocks) / np.sqrt(spec.s_g)
    meta = dict(spec.sidecar(), sampler="stationary",
                sources=sorted({t.label for t in minitrajectories}))
    logger.info(f"SAMPLING: stationary gradients, s_g={spec.s_g}, L={L}, {data.shape[1]} columns")
    return SnapshotMatrix(data=data, kind="gradient", samples=spec.s_g,
                          base_states=np.hstack(bases), meta=meta)


def long_trajectory_window(t_prime: int, tau_prime: int, N: int, L: int) -> Tuple[int, int, int]:
    """Final time and kept horizon range (t_f, tau_min, tau_max) for one long-trajectory draw."""
    t_f = t_prime + tau_prime
    return t_f, max(0, t_f - N), min(L, t_f)


def sample_gradients_long(sys: DiscreteSystem, traj: Trajectory, spec: GradientSampleSpec) -> SnapshotMatrix:
    """
    Gradient samples from a single long trajectory of N+L+1 states.

    Each sample draws t' on 0..N, tau' on 0..L and eta, runs the adjoint
    recursion back from t_f = t' + tau' and keeps only the horizons whose base
    time falls inside 0..N. The kept block is scaled by 1/sqrt(1+tau_max-tau_min),
    which makes the estimator unbiased for the windowed gradient covariance.
    """
    L = spec.L
    N = traj.T - L
    if N < 0:
        raise ValueError(f"trajectory has {traj.T + 1} states, need at least L+1={L + 1}")

    blocks, bases = [], []
    for rng in spawn_rngs(spec.seed, spec.s_g):
        t_prime = int(rng.integers(0, N + 1))
        tau_prime = int(rng.integers(0, L + 1))
        eta = np.sqrt(L + 1.0) * _draw_zeta(sys.m0, spec.eta_distribution, rng)
        t_f, tau_min, tau_max = long_trajectory_window(t_prime, tau_prime, N, L)
        sequence = adjoint_gradient_sequence(sys, traj, traj.t0 + t_f, eta, tau_max)
        kept = np.column_stack(sequence[tau_min:tau_max + 1])
        blocks.append(kept / np.sqrt(1.0 + tau_max - tau_min))
        bases.append(traj.states[:, [t_f - k for k in range(tau_min, tau_max + 1)]])
    data = np.hstack(blocks) / np.sqrt(spec.s_g)
    meta = dict(spec.sidecar(), sampler="long", N=N, sources=[traj.label])
    logger.info(f"SAMPLING: long-trajectory gradients, s_g={spec.s_g}, N={N}, L={L}, {data.shape[1]} columns")
    return SnapshotMatrix(data=data, kind="gradient", samples=spec.s_g,
                          base_states=np.hstack(bases), meta=meta)


def concat_snapshots(matrices: Sequence[SnapshotMatrix]) -> SnapshotMatrix:
    """Merge factors so the merged covariance is the sample-weighted average of the parts."""
    if not matrices:
        raise ValueError("nothing to concatenate")
    kind, n = matrices[0].kind, matrices[0].n
    for m in matrices:
        if m.kind != kind or m.n != n:
            raise ValueError("can only concatenate snapshot matrices of one kind and dimension")
    total = sum(m.samples for m in matrices)
    data = np.hstack([np.sqrt(m.samples / total) * m.data for m in matrices])
    base_states = None
    if all(m.base_states is not None for m in matrices):
        base_states = np.hstack([m.base_states for m in matrices])
    meta = {k: v for k, v in matrices[0].meta.items() if k not in PER_PART_KEYS}
    meta["seeds"] = [m.meta.get("seed") for m in matrices]
    meta["part_samples"] = [m.samples for m in matrices]
    meta["sources"] = sorted({s for m in matrices for s in m.meta.get("sources", [])})
    meta["parts"] = len(matrices)
    return SnapshotMatrix(data=data, kind=kind, samples=total, base_states=base_states, meta=meta)
