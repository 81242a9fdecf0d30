"""
Covariance balancing and the linear baselines.

Everything here works on the factors X and Y directly (method of snapshots);
the n x n covariances are only formed by `zahm_oracle`, which is a dense
cross-check for small problems.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import linalg
from sklearn.utils.extmath import svd_flip

from .errors import ConfigError, RankDeficiencyError
from .fom import DiscreteSystem
from .sampling import SnapshotMatrix, make_rng

logger = logging.getLogger(__name__)

RANK_TOL = 1e-12
SIGN_CONVENTION = "max-abs-left-positive"


@dataclass(frozen=True, eq=False)
class BalancedProjection:
    phi: np.ndarray  # (n, r)
    psi: np.ndarray  # (n, r)
    sigma: np.ndarray  # (r,)
    spectrum: Optional[np.ndarray] = None  # every singular value of Y^T X
    meta: Dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.phi.shape[0]

    @property
    def r(self) -> int:
        return self.phi.shape[1]

    def projector(self) -> np.ndarray:
        """Dense oblique projector P = Phi Psi^T (small n only)."""
        return self.phi @ self.psi.T


@dataclass(frozen=True, eq=False)
class PodBasis:
    modes: np.ndarray  # (n, r), orthonormal columns
    singular_values: np.ndarray  # (r,)
    meta: Dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.modes.shape[0]

    @property
    def r(self) -> int:
        return self.modes.shape[1]


def numerical_rank(singular_values: np.ndarray, tol: float = RANK_TOL) -> int:
    if singular_values.size == 0 or singular_values[0] <= 0:
        return 0
    return int(np.sum(singular_values > tol * singular_values[0]))


def _truncated_svd(M: np.ndarray, r: int, tag: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Leading r singular triplets of M with the deterministic sign convention.

    Returns (U_r, sigma_r, Vt_r, full spectrum). When the numerical rank is
    below r the result is truncated to that rank and a warning is logged.
    """
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    if r > min(M.shape):
        raise ValueError(f"r={r} exceeds min{M.shape} = {min(M.shape)}")
    U, s, Vt = linalg.svd(M, full_matrices=False)
    U, Vt = svd_flip(U, Vt)
    rho = numerical_rank(s)
    if rho == 0:
        raise RankDeficiencyError(f"{tag}: all-zero data, largest singular value is 0")
    if rho < r:
        logger.warning(f"{tag}: numerical rank {rho} below requested r={r}, truncating to {rho}")
        r = rho
    return U[:, :r], s[:r], Vt[:r, :], s


def cobras_balance(X: SnapshotMatrix, Y: SnapshotMatrix, r: int) -> BalancedProjection:
    """Oblique projection balancing the state covariance X Xᵀ against the gradient covariance Y Yᵀ."""
    if X.n != Y.n:
        raise ValueError(f"X has n={X.n} but Y has n={Y.n}")
    U_r, sigma, Vt_r, spectrum = _truncated_svd(Y.data.T @ X.data, r, "BALANCE")
    scale = 1.0 / np.sqrt(sigma)
    phi = (X.data @ Vt_r.T) * scale
    psi = (Y.data @ U_r) * scale
    meta = {
        "method": "cobras",
        "requested_r": r,
        "r": int(sigma.size),
        "rank_tol": RANK_TOL,
        "sign_convention": SIGN_CONVENTION,
        "s_x": X.samples,
        "s_g": Y.samples,
        "sources": {"X": X.meta.get("sources", []), "Y": Y.meta.get("sources", [])},
    }
    logger.info(f"BALANCE: r={sigma.size}, sigma_1={sigma[0]:.6g}, sigma_r={sigma[-1]:.6g}")
    return BalancedProjection(phi=phi, psi=psi, sigma=sigma, spectrum=spectrum, meta=meta)


def linear_features(proj: BalancedProjection, x: np.ndarray) -> np.ndarray:
    """z = Psi^T x; x may be a single state (n,) or columns (n, B)."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != proj.n:
        raise ValueError(f"state dimension {x.shape[0]} does not match projection n={proj.n}")
    return proj.psi.T @ x


def truncation_bound(proj: BalancedProjection, X: SnapshotMatrix, Y: SnapshotMatrix) -> float:
    """Tr[W_x (I-P)ᵀ W_g (I-P)] = ||Yᵀ(I-P)X||_F^2, evaluated in factored form."""
    residual = Y.data.T @ X.data - (Y.data.T @ proj.phi) @ (proj.psi.T @ X.data)
    return float(np.sum(residual ** 2))


def effective_rank(S: SnapshotMatrix) -> float:
    """Tr(W)/||W|| of the covariance W = D Dᵀ."""
    top = linalg.svdvals(S.data)[0] if S.data.size else 0.0
    if top == 0.0:
        return 0.0
    return float(np.sum(S.data ** 2) / top ** 2)


def balancing_transform(X: SnapshotMatrix, Y: SnapshotMatrix) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Full balancing change of coordinates (T, T^-1, sigma).

    In the new coordinates both covariances equal diag(sigma). Needs both
    covariances positive-definite.
    """
    n = X.n
    U_n, sigma, Vt_n, _ = _truncated_svd(Y.data.T @ X.data, min(n, X.columns, Y.columns), "BALANCE")
    if sigma.size < n:
        raise RankDeficiencyError(f"BALANCE: covariances are singular (rank {sigma.size} < n={n})")
    scale = 1.0 / np.sqrt(sigma)
    T = (X.data @ Vt_n.T) * scale
    T_inv = scale[:, None] * (U_n.T @ Y.data.T)
    return T, T_inv, sigma


def pod_basis(X: SnapshotMatrix, r: int) -> PodBasis:
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    U, s, Vt = linalg.svd(X.data, full_matrices=False)
    U, Vt = svd_flip(U, Vt)
    rho = numerical_rank(s)
    if r > rho:
        raise RankDeficiencyError(f"BALANCE: POD rank {rho} is below requested r={r}")
    logger.info(f"BALANCE: POD basis r={r}, leading singular value {s[0]:.6g}")
    meta = {"method": "pod", "r": r, "s_x": X.samples, "sign_convention": SIGN_CONVENTION}
    return PodBasis(modes=U[:, :r], singular_values=s[:r], meta=meta)


def zahm_oracle(W_x: np.ndarray, W_g: np.ndarray, r: int) -> np.ndarray:
    """
    Dense projector V_r V_rᵀ W_x^-1 from the generalized eigenproblem W_g V = W_x^-1 V Lambda.

    Eigenvectors are W_x^-1-normalized. Test oracle for small n.
    """
    W_x = np.asarray(W_x, dtype=float)
    W_g = np.asarray(W_g, dtype=float)
    try:
        factor = linalg.cho_factor(W_x)
    except linalg.LinAlgError as exc:
        raise ValueError("W_x is not symmetric positive-definite") from exc
    W_x_inv = linalg.cho_solve(factor, np.eye(W_x.shape[0]))
    W_x_inv = 0.5 * (W_x_inv + W_x_inv.T)
    _, V = linalg.eigh(0.5 * (W_g + W_g.T), W_x_inv)
    V_r = V[:, ::-1][:, :r]
    return V_r @ V_r.T @ W_x_inv


def _check_linear(sys: DiscreteSystem, rtol: float = 1e-9) -> None:
    rng = make_rng(0)
    x1, x2 = rng.standard_normal(sys.n), rng.standard_normal(sys.n)
    u1, u2 = rng.standard_normal(sys.q0), rng.standard_normal(sys.q0)
    a, b = 0.7, -1.3
    checks = [
        (sys.step(a * x1 + b * x2, a * u1 + b * u2), a * sys.step(x1, u1) + b * sys.step(x2, u2)),
        (sys.output(a * x1 + b * x2, a * u1 + b * u2), a * sys.output(x1, u1) + b * sys.output(x2, u2)),
    ]
    for lhs, rhs in checks:
        if not np.allclose(lhs, rhs, rtol=rtol, atol=rtol * (1.0 + np.abs(rhs).max())):
            raise ConfigError(f"BALANCE: system '{sys.name}' failed the superposition test, BPOD needs an LTI system")


def bpod_projection(linear_sys: DiscreteSystem, horizon: int, r: int,
                    output_projection_rank: Optional[int] = None,
                    impulse_states: Optional[np.ndarray] = None) -> BalancedProjection:
    """
    Balanced POD from direct and adjoint impulse responses of an LTI system.

    Direct snapshots are [B, AB, ..., A^(h-1) B]; when `impulse_states` is given
    its columns replace B. If the output dimension exceeds
    `output_projection_rank`, the adjoint responses start from C^T Theta where
    Theta holds the leading POD modes of the direct outputs. The factors are
    left unscaled, so the returned sigma are the finite-horizon Hankel values.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    linear_sys.require_adjoint()
    _check_linear(linear_sys)
    n, q0, m0 = linear_sys.n, linear_sys.q0, linear_sys.m0
    x_zero, u_zero = np.zeros(n), np.zeros(q0)

    if impulse_states is None:
        eye_q = np.eye(q0)
        columns = [linear_sys.step(x_zero, eye_q[:, j]) for j in range(q0)]
        block = np.column_stack(columns)
    else:
        block = np.asarray(impulse_states, dtype=float).reshape(n, -1)
    direct = []
    for _ in range(horizon):
        direct.append(block)
        block = np.column_stack([linear_sys.step(block[:, j], u_zero) for j in range(block.shape[1])])
    X_data = np.hstack(direct)

    if output_projection_rank is not None and m0 > output_projection_rank:
        outputs = np.column_stack([linear_sys.output(X_data[:, j], u_zero) for j in range(X_data.shape[1])])
        theta = pod_basis(SnapshotMatrix(data=outputs, kind="state", samples=outputs.shape[1]),
                          output_projection_rank).modes
    else:
        theta = np.eye(m0)
    block = np.column_stack([linear_sys.adjoint_output(x_zero, u_zero, theta[:, j]) for j in range(theta.shape[1])])
    adjoint = []
    for _ in range(horizon):
        adjoint.append(block)
        block = np.column_stack([linear_sys.adjoint_step(x_zero, u_zero, block[:, j]) for j in range(block.shape[1])])
    Y_data = np.hstack(adjoint)

    X = SnapshotMatrix(data=X_data, kind="state", samples=X_data.shape[1], meta={"sources": [linear_sys.name]})
    Y = SnapshotMatrix(data=Y_data, kind="gradient", samples=Y_data.shape[1], meta={"sources": [linear_sys.name]})
    proj = cobras_balance(X, Y, r)
    proj.meta.update(method="bpod", horizon=horizon, output_projection_rank=int(theta.shape[1]))
    logger.info(f"BALANCE: BPOD on '{linear_sys.name}', horizon={horizon}, output rank={theta.shape[1]}")
    return proj
