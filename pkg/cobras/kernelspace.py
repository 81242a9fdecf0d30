"""
Kernel CoBRAS and the KPCA baseline.

The lifted state space is never built. Everything reduces to kernel values,
kernel gradients in the first argument, the derivative Gram matrix
G(x) = H(x, x) and mixed second derivatives H(x, y), all in closed form for
the three supported kernel families.

Row convention inside this module: `points` arrays are (count, n).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from sklearn.metrics.pairwise import linear_kernel, polynomial_kernel, rbf_kernel
from sklearn.utils.extmath import svd_flip

from .balance import _truncated_svd
from .sampling import SnapshotMatrix

logger = logging.getLogger(__name__)

KERNEL_FAMILIES = ("linear", "polynomial", "gaussian")


@dataclass(frozen=True)
class KernelSpec:
    """linear: alpha + x.y ; polynomial: (alpha + x.y)^degree ; gaussian: exp(-|x-y|^2 / 2 sigma^2)"""
    family: str
    alpha: float = 0.0
    degree: float = 2.0
    sigma: float = 8.0

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"kernel family must be one of {KERNEL_FAMILIES}, got '{self.family}'")
        if self.family == "linear" and self.alpha < 0:
            raise ValueError("linear kernel needs alpha >= 0")
        if self.family == "polynomial" and (self.alpha <= 0 or self.degree <= 1):
            raise ValueError("polynomial kernel needs alpha > 0 and degree > 1")
        if self.family == "gaussian" and self.sigma <= 0:
            raise ValueError("gaussian kernel needs sigma > 0")

    def sidecar(self) -> Dict:
        return {"family": self.family, "alpha": self.alpha, "degree": self.degree, "sigma": self.sigma}


# ---------- closed forms for a single pair ----------

def eval_kernel(k: KernelSpec, x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if k.family == "linear":
        return float(k.alpha + x @ y)
    if k.family == "polynomial":
        return float((k.alpha + x @ y) ** k.degree)
    d = x - y
    return float(np.exp(-(d @ d) / (2.0 * k.sigma ** 2)))


def grad_kernel(k: KernelSpec, x, y) -> np.ndarray:
    """Gradient of K(., y) at x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if k.family == "linear":
        return y.copy()
    if k.family == "polynomial":
        return k.degree * (k.alpha + x @ y) ** (k.degree - 1) * y
    return -eval_kernel(k, x, y) / k.sigma ** 2 * (x - y)


def apply_G_inverse(k: KernelSpec, x, v) -> np.ndarray:
    """G(x)^-1 v with G the derivative Gram matrix at x."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if k.family == "linear":
        return v.copy()
    if k.family == "polynomial":
        p, a, sq = k.degree, k.alpha, x @ x
        # Sherman-Morrison on a multiple of I + c x x^T
        return (v - (p - 1.0) / (a + p * sq) * x * (x @ v)) / (p * (a + sq) ** (p - 1.0))
    return k.sigma ** 2 * v


def cross_hessian_apply(k: KernelSpec, x, y, v) -> np.ndarray:
    """H(x, y) v with H_ij the mixed derivative of K in x_i and y_j."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    if k.family == "linear":
        return v.copy()
    if k.family == "polynomial":
        p, s = k.degree, k.alpha + x @ y
        return p * s ** (p - 1.0) * v + p * (p - 1.0) * s ** (p - 2.0) * y * (x @ v)
    d = x - y
    return eval_kernel(k, x, y) * (v - d * (d @ v) / k.sigma ** 2) / k.sigma ** 2


def derivative_gram(k: KernelSpec, x) -> np.ndarray:
    """Dense G(x) = H(x, x)."""
    x = np.asarray(x, dtype=float)
    eye = np.eye(x.size)
    return np.column_stack([cross_hessian_apply(k, x, x, eye[:, i]) for i in range(x.size)])


# ---------- batched forms ----------

def gram(k: KernelSpec, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """K(a_i, b_j) for rows a_i of A and b_j of B."""
    if k.family == "linear":
        return k.alpha + linear_kernel(A, B)
    if k.family == "polynomial":
        return polynomial_kernel(A, B, degree=k.degree, gamma=1.0, coef0=k.alpha)
    return rbf_kernel(A, B, gamma=1.0 / (2.0 * k.sigma ** 2))


def _apply_G_inverse_rows(k: KernelSpec, points: np.ndarray, V: np.ndarray) -> np.ndarray:
    if k.family == "linear":
        return V.copy()
    if k.family == "polynomial":
        p, a = k.degree, k.alpha
        sq = np.einsum("ij,ij->i", points, points)
        xv = np.einsum("ij,ij->i", points, V)
        out = V - ((p - 1.0) / (a + p * sq) * xv)[:, None] * points
        return out / (p * (a + sq) ** (p - 1.0))[:, None]
    return k.sigma ** 2 * V


def _gradient_pairing(k: KernelSpec, points: np.ndarray, weights: np.ndarray, evals: np.ndarray) -> np.ndarray:
    """[w_i . grad K(., e_j)(p_i)] for rows p_i of points, w_i of weights, e_j of evals."""
    if k.family == "linear":
        return weights @ evals.T
    wx = weights @ evals.T
    if k.family == "polynomial":
        p = k.degree
        return p * (k.alpha + points @ evals.T) ** (p - 1.0) * wx
    wp = np.einsum("ij,ij->i", weights, points)
    return -gram(k, points, evals) / k.sigma ** 2 * (wp[:, None] - wx)


def _hessian_pairing(k: KernelSpec, points: np.ndarray, weights: np.ndarray, x: np.ndarray,
                     v: np.ndarray) -> np.ndarray:
    """[w_i . H(p_i, x) v] for every row i."""
    wv = weights @ v
    if k.family == "linear":
        return wv
    if k.family == "polynomial":
        p = k.degree
        s = k.alpha + points @ x
        return p * s ** (p - 1.0) * wv + p * (p - 1.0) * s ** (p - 2.0) * (weights @ x) * (points @ v)
    d = points - x[None, :]
    kx = gram(k, points, x[None, :])[:, 0]
    wd = np.einsum("ij,ij->i", weights, d)
    return kx / k.sigma ** 2 * (wv - wd * (d @ v) / k.sigma ** 2)


# ---------- kernel CoBRAS ----------

@dataclass(frozen=True, eq=False)
class KernelFeatureMap:
    kernel: KernelSpec
    state_samples: np.ndarray  # (n, s_x), unscaled x_j
    gradient_points: np.ndarray  # (n, s_g), x~_i
    gradients: np.ndarray  # (n, s_g), g_i
    U_r: np.ndarray  # (s_g, r)
    sigma_r: np.ndarray  # (r,)
    V_r: np.ndarray  # (s_x, r)
    y_star_k0: np.ndarray  # (s_g,)
    lifted_gradients: np.ndarray  # (s_g, n), rows G(x~_i)^-1 g_i
    spectrum: Optional[np.ndarray] = None
    meta: Dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.state_samples.shape[0]

    @property
    def r(self) -> int:
        return self.sigma_r.size

    @property
    def s_x(self) -> int:
        return self.state_samples.shape[1]

    @property
    def s_g(self) -> int:
        return self.gradients.shape[1]

    def features(self, x) -> np.ndarray:
        return nonlinear_features(self, x)

    def training_features(self) -> np.ndarray:
        """Features of the state samples, (r, s_x), without kernel evaluations."""
        return np.sqrt(self.s_x) * np.sqrt(self.sigma_r)[:, None] * self.V_r.T


def _pairs_to_arrays(gradient_pairs) -> Tuple[np.ndarray, np.ndarray]:
    if (isinstance(gradient_pairs, tuple) and len(gradient_pairs) == 2
            and isinstance(gradient_pairs[0], np.ndarray) and gradient_pairs[0].ndim == 2):
        points, grads = gradient_pairs
    else:
        if len(gradient_pairs) == 0:
            raise ValueError("no gradient pairs given")
        points = np.column_stack([np.asarray(p, dtype=float) for p, _ in gradient_pairs])
        grads = np.column_stack([np.asarray(g, dtype=float) for _, g in gradient_pairs])
    return np.asarray(points, dtype=float), np.asarray(grads, dtype=float)


def kernel_balance(k: KernelSpec, X_states: np.ndarray, gradient_pairs, r: int) -> KernelFeatureMap:
    """
    Kernel balancing from raw states x_j (columns of X_states) and gradient pairs (x~_i, g_i).

    `gradient_pairs` is a sequence of (x~_i, g_i) or a tuple of two (n, s_g)
    arrays. Zero gradients are kept and give zero rows.
    """
    X_states = np.asarray(X_states, dtype=float)
    points, grads = _pairs_to_arrays(gradient_pairs)
    if points.shape != grads.shape or points.shape[0] != X_states.shape[0]:
        raise ValueError("gradient points, gradients and states must share the state dimension")
    s_x, s_g = X_states.shape[1], grads.shape[1]

    lifted = _apply_G_inverse_rows(k, points.T, grads.T)
    pairing = _gradient_pairing(k, points.T, lifted, X_states.T)
    centering = _gradient_pairing(k, points.T, lifted, np.zeros((1, X_states.shape[0])))[:, 0]
    M = (pairing - centering[:, None]) / np.sqrt(s_g * s_x)

    U_r, sigma, Vt_r, spectrum = _truncated_svd(M, r, "KERNEL")
    logger.info(f"KERNEL: {k.family} balancing, s_x={s_x}, s_g={s_g}, r={sigma.size}, sigma_1={sigma[0]:.6g}")
    return KernelFeatureMap(
        kernel=k,
        state_samples=X_states,
        gradient_points=points,
        gradients=grads,
        U_r=U_r,
        sigma_r=sigma,
        V_r=Vt_r.T,
        y_star_k0=centering / np.sqrt(s_g),
        lifted_gradients=lifted,
        spectrum=spectrum,
        meta={"method": "kcobras", "requested_r": r, "kernel": k.sidecar()},
    )


def kernel_balance_from_snapshots(k: KernelSpec, X: SnapshotMatrix, Y: SnapshotMatrix, r: int) -> KernelFeatureMap:
    """Kernel balancing on the samples behind scaled factors; the linear kernel then reproduces Yᵀ X."""
    if Y.base_states is None:
        raise ValueError("gradient snapshots carry no base states")
    states = np.sqrt(X.columns) * X.data
    grads = np.sqrt(Y.columns) * Y.data
    fm = kernel_balance(k, states, (Y.base_states, grads), r)
    fm.meta.update(sources={"X": X.meta.get("sources", []), "Y": Y.meta.get("sources", [])})
    return fm


def nonlinear_features(fm: KernelFeatureMap, x) -> np.ndarray:
    """z = Sigma^-1/2 U^T (Y*K_x - Y*K_0) for a state (n,) or columns (n, B)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    evals = x[None, :] if single else x.T
    y_star_kx = _gradient_pairing(fm.kernel, fm.gradient_points.T, fm.lifted_gradients, evals) / np.sqrt(fm.s_g)
    z = (fm.U_r.T @ (y_star_kx - fm.y_star_k0[:, None])) / np.sqrt(fm.sigma_r)[:, None]
    return z[:, 0] if single else z


def feature_derivative(fm: KernelFeatureMap, x, v) -> np.ndarray:
    """Directional derivative Dh(x) v of the nonlinear features."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    w = _hessian_pairing(fm.kernel, fm.gradient_points.T, fm.lifted_gradients, x, v) / np.sqrt(fm.s_g)
    return (fm.U_r.T @ w) / np.sqrt(fm.sigma_r)


def kernel_diagnostics(k: KernelSpec, samples: np.ndarray, rng: np.random.Generator,
                       pairs: int = 20, max_condition: float = 1e12) -> Dict:
    """
    Spot-check injectivity and G(x) conditioning on sample columns.

    Problems are logged as warnings; nothing is raised.
    """
    samples = np.asarray(samples, dtype=float)
    count = samples.shape[1]
    gaps = []
    for _ in range(pairs if count > 1 else 0):
        i, j = rng.choice(count, size=2, replace=False)
        x, y = samples[:, i], samples[:, j]
        if np.array_equal(x, y):
            continue
        gaps.append(eval_kernel(k, x, x) - 2.0 * eval_kernel(k, x, y) + eval_kernel(k, y, y))
    conditions = []
    for i in rng.choice(count, size=min(pairs, count), replace=False):
        eigs = linalg.eigvalsh(derivative_gram(k, samples[:, i]))
        conditions.append(np.inf if eigs[0] <= 0 else eigs[-1] / eigs[0])
    report = {
        "min_injectivity_gap": float(min(gaps)) if gaps else None,
        "max_G_condition": float(max(conditions)) if conditions else None,
    }
    if gaps and min(gaps) <= 0:
        logger.warning(f"KERNEL: feature map looks non-injective on samples (gap {min(gaps):.3g})")
    if conditions and max(conditions) > max_condition:
        logger.warning(f"KERNEL: derivative Gram matrix badly conditioned ({max(conditions):.3g})")
    return report


# ---------- KPCA ----------

@dataclass(frozen=True, eq=False)
class KpcaFeatureMap:
    kernel: KernelSpec
    state_samples: np.ndarray  # (n, s_x)
    coefficients: np.ndarray  # (s_x, r)
    eigenvalues: np.ndarray  # (r,), of (1/s_x) G~
    k_samples_zero: np.ndarray  # (s_x,), K(x_j, 0)
    k_zero_zero: float
    meta: Dict = field(default_factory=dict)

    @property
    def r(self) -> int:
        return self.eigenvalues.size

    def features(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        evals = x[None, :] if single else x.T
        zero = np.zeros((1, evals.shape[1]))
        centered = (gram(self.kernel, self.state_samples.T, evals)
                    - self.k_samples_zero[:, None]
                    - gram(self.kernel, zero, evals)
                    + self.k_zero_zero)
        z = self.coefficients.T @ centered
        return z[:, 0] if single else z


def fit_kpca(k: KernelSpec, X_states: np.ndarray, r: int, rel_tol: float = 1e-12) -> KpcaFeatureMap:
    """KPCA of raw state columns, centered about the origin rather than the sample mean."""
    X_states = np.asarray(X_states, dtype=float)
    n, s_x = X_states.shape
    if r < 1 or r > s_x:
        raise ValueError(f"r must lie in [1, {s_x}], got {r}")
    rows = X_states.T
    zero = np.zeros((1, n))
    k0 = gram(k, rows, zero)[:, 0]
    k00 = float(gram(k, zero, zero)[0, 0])
    G_tilde = gram(k, rows, rows) - k0[:, None] - k0[None, :] + k00
    lam, u = linalg.eigh(0.5 * (G_tilde + G_tilde.T) / s_x)
    lam, u = lam[::-1], u[:, ::-1]
    keep = int(np.sum(lam > rel_tol * max(lam[0], 0.0))) if lam[0] > 0 else 0
    if keep == 0:
        raise ValueError("KERNEL: KPCA Gram matrix has no positive eigenvalues")
    if keep < r:
        logger.warning(f"KERNEL: only {keep} positive KPCA eigenvalues, truncating r={r} to {keep}")
        r = keep
    lam, u = lam[:r], u[:, :r]
    u, _ = svd_flip(u, u.T)
    coefficients = u / np.sqrt(s_x * lam)
    logger.info(f"KERNEL: KPCA {k.family}, s_x={s_x}, r={r}, lambda_1={lam[0]:.6g}")
    return KpcaFeatureMap(kernel=k, state_samples=X_states, coefficients=coefficients, eigenvalues=lam,
                          k_samples_zero=k0, k_zero_zero=k00,
                          meta={"method": "kpca", "r": r, "kernel": k.sidecar()})


def kpca_features(k: KernelSpec, X_states: np.ndarray, r: int, x) -> np.ndarray:
    return fit_kpca(k, X_states, r).features(x)
