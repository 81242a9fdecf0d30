"""
Reduced-order models.

GalerkinRom projects a full-order model with an oblique pair (Phi, Psi).
LearnedRom regresses the dynamics and the reconstruction map on feature
coordinates with Gaussian kernel ridge regression.

Regression follows the scikit-learn row convention internally; the public
functions take samples as columns like the rest of the package.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.kernel_ridge import KernelRidge
from sklearn.metrics import mean_squared_error
from sklearn.metrics.pairwise import rbf_kernel
from sklearn.model_selection import KFold, PredefinedSplit
from sklearn.preprocessing import StandardScaler

from .balance import BalancedProjection, PodBasis
from .errors import NumericalBlowUp, RankDeficiencyError
from .fom import DiscreteSystem, OdeSystem, Trajectory, as_inputs
from .sampling import make_rng

logger = logging.getLogger(__name__)

BLOWUP_NORM = 1e6
BIORTHOGONAL_TOL = 1e-10


# ---------- batch simulation ----------

def _batch_step(sys: DiscreteSystem, X: np.ndarray, u: np.ndarray) -> np.ndarray:
    if sys.vectorized:
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                return sys.step(X, u)
        except NumericalBlowUp:
            pass
    out = np.empty_like(X)
    for j in range(X.shape[1]):
        u_j = u[:, j] if u.ndim == 2 else u
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                out[:, j] = sys.step(X[:, j], u_j)
        except NumericalBlowUp:
            out[:, j] = np.nan
    return out


def simulate_many(sys: DiscreteSystem, x0s, inputs,
                  blowup_norm: Optional[float] = None) -> Tuple[np.ndarray, List[Optional[int]]]:
    """
    Step B initial states at once.

    `inputs` is a shared (q0, T) sequence or per-column (B, q0, T). Returns
    states (B, n, T+1) and, per column, the index of the first non-finite (or
    over-norm) state. Columns stop at blow-up and hold NaN afterwards.
    """
    x0s = np.asarray(x0s, dtype=float).reshape(sys.n, -1)
    B = x0s.shape[1]
    inputs = np.asarray(inputs, dtype=float)
    per_column = inputs.ndim == 3
    if per_column:
        if inputs.shape[:2] != (B, sys.q0):
            raise ValueError(f"per-column inputs must have shape ({B}, {sys.q0}, T), got {inputs.shape}")
    else:
        inputs = as_inputs(inputs, sys.q0)
    T = inputs.shape[-1]

    states = np.full((B, sys.n, T + 1), np.nan)
    states[:, :, 0] = x0s.T
    blowup: List[Optional[int]] = [None] * B
    active = np.ones(B, dtype=bool)
    x = x0s.copy()
    for k in range(T):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        u_k = inputs[idx, :, k].T if per_column else inputs[:, k]
        x_next = _batch_step(sys, x[:, idx], u_k)
        bad = ~np.all(np.isfinite(x_next), axis=0)
        if blowup_norm is not None:
            with np.errstate(over="ignore", invalid="ignore"):
                bad |= np.linalg.norm(np.nan_to_num(x_next, nan=np.inf), axis=0) > blowup_norm
        for j in idx[bad]:
            blowup[j] = k + 1
            logger.warning(f"ROM: '{sys.name}' column {j} blew up at step {k + 1}")
        active[idx[bad]] = False
        good = idx[~bad]
        x[:, good] = x_next[:, ~bad]
        states[good, :, k + 1] = x_next[:, ~bad].T
    return states, blowup


def batch_outputs(sys: DiscreteSystem, states: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Outputs (B, m0, T+1) along batched states; the last sample uses u = 0."""
    B, _, T1 = states.shape
    per_column = inputs.ndim == 3
    outputs = np.empty((B, sys.m0, T1))
    for k in range(T1):
        if k < T1 - 1:
            u_k = inputs[:, :, k].T if per_column else inputs[:, k]
        else:
            u_k = np.zeros(sys.q0)
        if sys.vectorized:
            outputs[:, :, k] = np.asarray(sys.output(states[:, :, k].T, u_k)).reshape(sys.m0, B).T
        else:
            for j in range(B):
                u_j = u_k[:, j] if u_k.ndim == 2 else u_k
                outputs[j, :, k] = sys.output(states[j, :, k], u_j)
    return outputs


# ---------- linear encoders ----------

@dataclass(frozen=True, eq=False)
class LinearFeatureMap:
    phi: np.ndarray  # (n, R)
    psi: np.ndarray  # (n, R)
    method: str = "linear"

    @property
    def r(self) -> int:
        return self.phi.shape[1]

    def features(self, x) -> np.ndarray:
        return self.psi.T @ np.asarray(x, dtype=float)

    def lift(self, z) -> np.ndarray:
        return self.phi @ np.asarray(z, dtype=float)


def linear_coordinates(basis: Union[PodBasis, BalancedProjection], R: int) -> LinearFeatureMap:
    """Leading R coordinates of a POD basis or balanced projection."""
    if R < 1 or R > basis.r:
        raise ValueError(f"R must lie in [1, {basis.r}], got {R}")
    if isinstance(basis, PodBasis):
        return LinearFeatureMap(phi=basis.modes[:, :R], psi=basis.modes[:, :R], method="pod")
    return LinearFeatureMap(phi=basis.phi[:, :R], psi=basis.psi[:, :R], method=basis.meta.get("method", "cobras"))


# ---------- Petrov-Galerkin ----------

@dataclass(frozen=True, eq=False)
class GalerkinRom:
    phi: np.ndarray
    psi: np.ndarray
    base: Union[OdeSystem, DiscreteSystem]
    reduced: DiscreteSystem
    method: str = "galerkin"

    @property
    def r(self) -> int:
        return self.phi.shape[1]


def build_galerkin_rom(proj: Union[BalancedProjection, PodBasis], sys: Union[OdeSystem, DiscreteSystem],
                       method: Optional[str] = None) -> GalerkinRom:
    """
    Reduced dynamics z -> Psi^T f(Phi z, u) with output g(Phi z, u).

    ODE bases are reduced before discretization, so the ROM integrates with
    the full-order RK4 settings.
    """
    if isinstance(proj, PodBasis):
        phi, psi = proj.modes, proj.modes
        method = method or "pod"
    else:
        phi, psi = proj.phi, proj.psi
        method = method or proj.meta.get("method", "cobras")
    if phi.shape[0] != sys.n:
        raise ValueError(f"projection has n={phi.shape[0]}, system has n={sys.n}")

    gram = psi.T @ phi
    if np.linalg.norm(gram - np.eye(gram.shape[0])) > BIORTHOGONAL_TOL:
        if np.linalg.cond(gram) > 1e12:
            raise RankDeficiencyError("ROM: Psi^T Phi is singular")
        phi = np.linalg.solve(gram.T, phi.T).T

    if isinstance(sys, OdeSystem):
        reduced_ode = OdeSystem(
            n=phi.shape[1],
            q0=sys.q0,
            m0=sys.m0,
            vector_field=lambda z, u: psi.T @ sys.vector_field(phi @ z, u),
            jacobian_product=lambda z, u, v: phi.T @ sys.jacobian_product(phi @ z, u, psi @ v),
            output=lambda z, u: sys.output(phi @ z, u),
            adjoint_output=lambda z, u, eta: phi.T @ sys.adjoint_output(phi @ z, u, eta),
            dt=sys.dt,
            substeps=sys.substeps,
            name=f"{sys.name}-{method}-rom",
            vectorized=sys.vectorized,
        )
        reduced = reduced_ode.discretize()
    else:
        reduced = DiscreteSystem(
            n=phi.shape[1],
            q0=sys.q0,
            m0=sys.m0,
            step=lambda z, u: psi.T @ sys.step(phi @ z, u),
            output=lambda z, u: sys.output(phi @ z, u),
            adjoint_step=lambda z, u, v: phi.T @ sys.adjoint_step(phi @ z, u, psi @ v),
            adjoint_output=lambda z, u, eta: phi.T @ sys.adjoint_output(phi @ z, u, eta),
            dt=sys.dt,
            name=f"{sys.name}-{method}-rom",
            vectorized=sys.vectorized,
        )
    logger.info(f"ROM: {method} Petrov-Galerkin model, r={phi.shape[1]} of n={sys.n}")
    return GalerkinRom(phi=phi, psi=psi, base=sys, reduced=reduced, method=method)


# ---------- kernel ridge regression ----------

@dataclass(frozen=True, eq=False)
class KrrModel:
    train_inputs: np.ndarray  # (N, d), normalized
    dual_coef: np.ndarray  # (N, c)
    rbf_gamma: float
    ridge_alpha: float
    input_scale: np.ndarray  # (d,)
    target_scale: np.ndarray  # (c,)

    @property
    def d(self) -> int:
        return self.train_inputs.shape[1]

    @property
    def c(self) -> int:
        return self.dual_coef.shape[1]

    def predict(self, Z) -> np.ndarray:
        """Predictions (c, M) for inputs (d, M)."""
        Z = np.asarray(Z, dtype=float).reshape(self.d, -1)
        K = rbf_kernel(Z.T / self.input_scale, self.train_inputs, gamma=self.rbf_gamma)
        return ((K @ self.dual_coef) * self.target_scale).T


def _scale_of(samples: np.ndarray, what: str) -> np.ndarray:
    scaler = StandardScaler(with_mean=False).fit(samples)
    flat = scaler.var_ == 0
    if np.any(flat) and samples.shape[0] > 1:
        logger.warning(f"ROM: {int(flat.sum())} {what} coordinate(s) have zero variance, left unscaled")
    return scaler.scale_


def fit_krr(Z, targets, rbf_gamma: float, ridge_alpha: float) -> KrrModel:
    """Gaussian KRR on inputs Z (d, N) and targets (c, N), both normalized to unit variance per coordinate."""
    Z = np.asarray(Z, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if Z.ndim != 2 or targets.ndim != 2 or Z.shape[1] != targets.shape[1]:
        raise ValueError(f"inputs {Z.shape} and targets {targets.shape} must be (d, N) and (c, N)")
    if Z.shape[1] < 1:
        raise ValueError("need at least one training sample")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(targets))):
        raise ValueError("KRR training data contains non-finite values")
    if rbf_gamma <= 0 or ridge_alpha < 0:
        raise ValueError(f"need rbf_gamma > 0 and ridge_alpha >= 0, got {rbf_gamma}, {ridge_alpha}")
    input_scale = _scale_of(Z.T, "input")
    target_scale = _scale_of(targets.T, "target")
    inputs = Z.T / input_scale
    model = KernelRidge(alpha=ridge_alpha, kernel="rbf", gamma=rbf_gamma)
    model.fit(inputs, targets.T / target_scale)
    return KrrModel(
        train_inputs=inputs,
        dual_coef=np.asarray(model.dual_coef_).reshape(inputs.shape[0], -1),
        rbf_gamma=float(rbf_gamma),
        ridge_alpha=float(ridge_alpha),
        input_scale=input_scale,
        target_scale=target_scale,
    )


def _cv_splitter(folds: int, seed: int, groups: Optional[np.ndarray]):
    if groups is not None:
        unique = np.unique(groups)
        if unique.size >= folds:
            order = make_rng(seed).permutation(unique)
            fold_of = {g: i % folds for i, g in enumerate(order)}
            return PredefinedSplit(np.array([fold_of[g] for g in groups]))
    return KFold(n_splits=folds, shuffle=False)


def cross_validate_krr(Z, targets, alpha_grid: Sequence[float], gamma_grid: Sequence[float],
                       folds: int = 5, seed: int = 0,
                       groups: Optional[Sequence[int]] = None) -> Tuple[float, float, Dict[Tuple[float, float], float]]:
    """
    Grid search by k-fold CV on mean held-out MSE in normalized target units.

    With `groups` (one id per sample, e.g. trajectory index) whole groups are
    held out together when there are at least `folds` of them; otherwise folds
    are contiguous blocks in sample order. Ties go to the larger alpha, then
    the larger gamma.
    """
    Z = np.asarray(Z, dtype=float)
    targets = np.asarray(targets, dtype=float)
    N = Z.shape[1]
    if folds < 2:
        raise ValueError(f"folds must be >= 2, got {folds}")
    if not alpha_grid or not gamma_grid:
        raise ValueError("alpha and gamma grids must be non-empty")
    if N < folds:
        raise ValueError(f"{N} samples are fewer than {folds} folds")
    groups_arr = None if groups is None else np.asarray(groups)
    splitter = _cv_splitter(folds, seed, groups_arr)
    target_scale = _scale_of(targets.T, "target")
    normalized = targets.T / target_scale

    scores: Dict[Tuple[float, float], float] = {}
    for alpha in alpha_grid:
        for gamma in gamma_grid:
            errors = []
            for train, test in splitter.split(Z.T):
                model = fit_krr(Z[:, train], targets[:, train], gamma, alpha)
                predicted = model.predict(Z[:, test]).T / target_scale
                errors.append(mean_squared_error(normalized[test], predicted))
            scores[(float(alpha), float(gamma))] = float(np.mean(errors))

    best = min(scores.values())
    tied = [key for key, value in scores.items() if value <= best * (1.0 + 1e-12)]
    alpha, gamma = max(tied)
    logger.info(f"ROM: KRR cross-validation picked alpha={alpha:.4g}, gamma={gamma:.4g} (mse {best:.4g})")
    return alpha, gamma, scores


# ---------- learned ROMs ----------

@dataclass(frozen=True)
class KrrGrid:
    alpha_grid: Tuple[float, ...] = (1e-8, 1e-6, 1e-4, 1e-2)
    gamma_grid: Tuple[float, ...] = (1e-3, 1e-2, 1e-1, 1.0)
    folds: int = 5
    seed: int = 0


@dataclass(frozen=True, eq=False)
class LearnedRom:
    feature_map: object  # anything with .r and .features(x)
    dynamics: KrrModel  # [z; u] -> z(t+1)
    reconstruction: KrrModel  # z -> leading linear coordinates
    linear_basis: LinearFeatureMap
    base: Optional[DiscreteSystem] = None  # output map for reconstructed states
    meta: Dict = field(default_factory=dict)

    @property
    def r(self) -> int:
        return self.feature_map.r

    @property
    def R(self) -> int:
        return self.linear_basis.r

    @property
    def reduced(self) -> DiscreteSystem:
        r, q0 = self.r, self.dynamics.d - self.r

        def step(z, u):
            z = np.asarray(z, dtype=float)
            batch = z.reshape(r, -1)
            u = np.asarray(u, dtype=float).reshape(q0, -1)
            if u.shape[1] != batch.shape[1]:
                u = np.broadcast_to(u, (q0, batch.shape[1]))
            z_next = self.dynamics.predict(np.vstack([batch, u]))
            return z_next[:, 0] if z.ndim == 1 else z_next

        return DiscreteSystem(n=r, q0=q0, m0=r, step=step, output=lambda z, u: np.asarray(z, dtype=float),
                              adjoint_step=None, adjoint_output=None,
                              dt=self.meta.get("dt", 1.0), name=f"learned-{self.meta.get('method', 'rom')}",
                              vectorized=True)

    def reconstruct(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        coords = self.reconstruction.predict(z.reshape(self.r, -1))
        x = self.linear_basis.lift(coords)
        return x[:, 0] if z.ndim == 1 else x


def learn_feature_rom(feature_map, trajectories: Sequence[Trajectory], linear_basis: LinearFeatureMap,
                      grid: KrrGrid = KrrGrid(), base: Optional[DiscreteSystem] = None,
                      method: str = "learned") -> LearnedRom:
    """
    Fit z(t+1) = f~(z(t), u(t)) and z -> leading linear coordinates by cross-validated KRR.

    Training pairs are pooled over trajectories; CV folds hold out whole
    trajectories when there are enough of them.
    """
    if not trajectories:
        raise ValueError("no training trajectories")
    dts = {t.dt for t in trajectories}
    if len(dts) != 1:
        raise ValueError(f"training trajectories use different sampling intervals {sorted(dts)}")
    if linear_basis.r < feature_map.r:
        raise ValueError(f"linear basis dimension R={linear_basis.r} is below feature dimension r={feature_map.r}")

    dyn_in, dyn_out, dyn_groups = [], [], []
    rec_in, rec_out, rec_groups = [], [], []
    for i, traj in enumerate(trajectories):
        z = np.asarray(feature_map.features(traj.states)).reshape(feature_map.r, -1)
        dyn_in.append(np.vstack([z[:, :-1], traj.inputs]))
        dyn_out.append(z[:, 1:])
        dyn_groups.extend([i] * traj.T)
        rec_in.append(z)
        rec_out.append(linear_basis.features(traj.states))
        rec_groups.extend([i] * (traj.T + 1))
    dyn_in, dyn_out = np.hstack(dyn_in), np.hstack(dyn_out)
    rec_in, rec_out = np.hstack(rec_in), np.hstack(rec_out)

    a_dyn, g_dyn, dyn_scores = cross_validate_krr(dyn_in, dyn_out, grid.alpha_grid, grid.gamma_grid,
                                                  grid.folds, grid.seed, dyn_groups)
    a_rec, g_rec, rec_scores = cross_validate_krr(rec_in, rec_out, grid.alpha_grid, grid.gamma_grid,
                                                  grid.folds, grid.seed, rec_groups)
    meta = {
        "method": method,
        "dt": dts.pop(),
        "r": feature_map.r,
        "R": linear_basis.r,
        "dynamics": {"alpha": a_dyn, "gamma": g_dyn, "cv_mse": dyn_scores[(a_dyn, g_dyn)]},
        "reconstruction": {"alpha": a_rec, "gamma": g_rec, "cv_mse": rec_scores[(a_rec, g_rec)]},
    }
    logger.info(f"ROM: learned {method} model r={feature_map.r}, R={linear_basis.r} "
                f"on {dyn_in.shape[1]} dynamics pairs")
    return LearnedRom(
        feature_map=feature_map,
        dynamics=fit_krr(dyn_in, dyn_out, g_dyn, a_dyn),
        reconstruction=fit_krr(rec_in, rec_out, g_rec, a_rec),
        linear_basis=linear_basis,
        base=base,
        meta=meta,
    )


# ---------- running ROMs ----------

@dataclass(frozen=True, eq=False)
class RomResult:
    reduced_states: np.ndarray  # (r, T+1)
    states: np.ndarray  # (n, T+1), reconstructed
    outputs: np.ndarray  # (m0, T+1)
    blowup_step: Optional[int] = None

    @property
    def diverged(self) -> bool:
        return self.blowup_step is not None


@dataclass(frozen=True, eq=False)
class RomBatch:
    reduced_states: np.ndarray  # (B, r, T+1)
    states: np.ndarray  # (B, n, T+1)
    outputs: np.ndarray  # (B, m0, T+1)
    blowup_steps: List[Optional[int]]

    @property
    def diverged(self) -> int:
        return sum(step is not None for step in self.blowup_steps)

    def __getitem__(self, j: int) -> RomResult:
        return RomResult(self.reduced_states[j], self.states[j], self.outputs[j], self.blowup_steps[j])


def simulate_rom_many(rom: Union[GalerkinRom, LearnedRom], inputs, x0s=None, z0s=None) -> RomBatch:
    """Run a ROM from full states x0s (n, B) or reduced states z0s (r, B)."""
    if (x0s is None) == (z0s is None):
        raise ValueError("give exactly one of x0s and z0s")
    if z0s is None:
        x0s = np.asarray(x0s, dtype=float)
        x0s = x0s.reshape(x0s.shape[0], -1)
        if isinstance(rom, GalerkinRom):
            z0s = rom.psi.T @ x0s
        else:
            z0s = np.asarray(rom.feature_map.features(x0s)).reshape(rom.r, -1)
    z0s = np.asarray(z0s, dtype=float).reshape(rom.r, -1)
    reduced = rom.reduced
    z, blowup = simulate_many(reduced, z0s, inputs, blowup_norm=BLOWUP_NORM)
    B, _, T1 = z.shape

    if isinstance(rom, GalerkinRom):
        states = np.einsum("nr,brt->bnt", rom.phi, z)
        output_sys = rom.base
    else:
        flat = z.transpose(1, 0, 2).reshape(rom.r, -1)
        finite = np.all(np.isfinite(flat), axis=0)
        lifted = np.full((rom.linear_basis.phi.shape[0], flat.shape[1]), np.nan)
        if np.any(finite):
            lifted[:, finite] = rom.reconstruct(flat[:, finite])
        states = lifted.reshape(-1, B, T1).transpose(1, 0, 2)
        output_sys = rom.base
    inputs_arr = np.asarray(inputs, dtype=float)
    if inputs_arr.ndim != 3:
        inputs_arr = as_inputs(inputs_arr, reduced.q0)
    if output_sys is None:
        outputs = states.copy()
    else:
        with np.errstate(invalid="ignore", over="ignore"):
            outputs = batch_outputs(output_sys, states, inputs_arr)
    return RomBatch(reduced_states=z, states=states, outputs=outputs, blowup_steps=blowup)


def simulate_rom(rom: Union[GalerkinRom, LearnedRom], inputs, x0=None, z0=None) -> RomResult:
    """Single run; blow-up is recorded in the result, never raised."""
    x0s = None if x0 is None else np.asarray(x0, dtype=float).reshape(-1, 1)
    z0s = None if z0 is None else np.asarray(z0, dtype=float).reshape(-1, 1)
    return simulate_rom_many(rom, inputs, x0s=x0s, z0s=z0s)[0]


def normalized_error(predicted, true, kind: str = "output") -> np.ndarray:
    """
    Squared prediction error per time over the mean squared norm of the truth.

    Arrays are (d, T+1) for one trajectory or (count, d, T+1) for a test set;
    the normalizing average runs over all times and trajectories. Blown-up
    predictions (NaN) stay NaN.
    """
    if kind not in ("output", "state"):
        raise ValueError(f"kind must be 'output' or 'state', got '{kind}'")
    predicted = np.asarray(predicted, dtype=float)
    true = np.asarray(true, dtype=float)
    if predicted.shape != true.shape:
        raise ValueError(f"shape mismatch: {predicted.shape} vs {true.shape}")
    if true.ndim < 2:
        raise ValueError("expected (d, T+1) or (count, d, T+1) arrays")
    denominator = np.mean(np.sum(true ** 2, axis=-2))
    if denominator == 0:
        raise ValueError("true signal is identically zero, normalized error undefined")
    return np.sum((predicted - true) ** 2, axis=-2) / denominator
