"""
Full-order models.

A DiscreteSystem is the map x(t+1) = f(x(t), u(t)), y(t) = g(x(t), u(t)) together
with the transpose-Jacobian products the adjoint sampler needs. Continuous-time
models are OdeSystems; `OdeSystem.discretize()` wraps them with fixed-step RK4
and its exact discrete adjoint.

States are column vectors of shape (n,). Shipped systems also accept a trailing
batch axis, x of shape (n, B), and say so through `vectorized=True`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import partial
from typing import Callable, Optional

import numpy as np

from .errors import NumericalBlowUp

logger = logging.getLogger(__name__)

StateMap = Callable[[np.ndarray, np.ndarray], np.ndarray]
AdjointMap = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DiscreteSystem:
    n: int
    q0: int
    m0: int
    step: StateMap
    output: StateMap
    adjoint_step: Optional[AdjointMap]
    adjoint_output: Optional[AdjointMap]
    dt: float = 1.0
    name: str = "discrete"
    vectorized: bool = False

    def require_adjoint(self) -> None:
        if self.adjoint_step is None or self.adjoint_output is None:
            raise ValueError(f"system '{self.name}' has no adjoint maps")


@dataclass(frozen=True)
class OdeSystem:
    n: int
    q0: int
    m0: int
    vector_field: StateMap
    jacobian_product: AdjointMap
    output: StateMap
    adjoint_output: AdjointMap
    dt: float = 0.5
    substeps: int = 50
    name: str = "ode"
    vectorized: bool = False

    def __post_init__(self):
        if self.substeps < 1:
            raise ValueError(f"substeps must be >= 1, got {self.substeps}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    def discretize(self) -> DiscreteSystem:
        """RK4 step map with zero-order hold on the input over each interval."""
        return DiscreteSystem(
            n=self.n,
            q0=self.q0,
            m0=self.m0,
            step=partial(rk4_step, self),
            output=self.output,
            adjoint_step=partial(rk4_adjoint_step, self),
            adjoint_output=self.adjoint_output,
            dt=self.dt,
            name=self.name,
            vectorized=self.vectorized,
        )


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray  # (n, T+1)
    inputs: np.ndarray  # (q0, T)
    t0: int = 0
    dt: float = 1.0
    label: str = ""

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def T(self) -> int:
        return self.inputs.shape[1]

    @property
    def times(self) -> np.ndarray:
        return (self.t0 + np.arange(self.T + 1)) * self.dt

    def input_at(self, k: int) -> np.ndarray:
        """Input applied at local index k; the final sample has none and reads as zero."""
        if k < self.T:
            return self.inputs[:, k]
        return np.zeros(self.inputs.shape[0])

    def outputs(self, sys: DiscreteSystem) -> np.ndarray:
        return np.column_stack(
            [sys.output(self.states[:, k], self.input_at(k)) for k in range(self.T + 1)]
        )

    def window(self, start: int, length: int) -> "Trajectory":
        """Sub-trajectory of `length` states beginning at local index `start`."""
        if start < 0 or start + length > self.T + 1 or length < 1:
            raise ValueError(f"window [{start}, {start + length}) outside trajectory of {self.T + 1} states")
        return Trajectory(
            states=self.states[:, start:start + length],
            inputs=self.inputs[:, start:start + length - 1],
            t0=self.t0 + start,
            dt=self.dt,
            label=self.label,
        )


def as_inputs(inputs, q0: int) -> np.ndarray:
    """Normalize an input sequence to shape (q0, T)."""
    arr = np.asarray(inputs, dtype=float)
    if arr.ndim == 1:
        if q0 != 1 and arr.size:
            raise ValueError(f"1-D input sequence given for a system with q0={q0}")
        arr = arr.reshape(q0, -1) if arr.size else np.zeros((q0, 0))
    if arr.ndim != 2 or arr.shape[0] != q0:
        raise ValueError(f"inputs must have shape ({q0}, T), got {arr.shape}")
    return arr


# ---------- RK4 ----------

def _rk4_substep(sys: OdeSystem, x: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
    f = sys.vector_field
    k1 = f(x, u)
    k2 = f(x + 0.5 * h * k1, u)
    k3 = f(x + 0.5 * h * k2, u)
    k4 = f(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_propagate(sys: OdeSystem, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """RK4 over one sampling interval without the finiteness check."""
    h = sys.dt / sys.substeps
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(sys.substeps):
            x = _rk4_substep(sys, x, u, h)
    return x


def rk4_step(sys: OdeSystem, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    x_new = rk4_propagate(sys, np.asarray(x, dtype=float), np.asarray(u, dtype=float))
    if not np.all(np.isfinite(x_new)):
        raise NumericalBlowUp(f"FOM: non-finite state after RK4 step of '{sys.name}'")
    return x_new


def _rk4_substep_adjoint(sys: OdeSystem, x: np.ndarray, u: np.ndarray, h: float,
                         lam: np.ndarray) -> np.ndarray:
    f = sys.vector_field
    jt = sys.jacobian_product
    k1 = f(x, u)
    x2 = x + 0.5 * h * k1
    k2 = f(x2, u)
    x3 = x + 0.5 * h * k2
    k3 = f(x3, u)
    x4 = x + h * k3
    # stages in reverse order
    mu4 = jt(x4, u, (h / 6.0) * lam)
    mu3 = jt(x3, u, (h / 3.0) * lam + h * mu4)
    mu2 = jt(x2, u, (h / 3.0) * lam + 0.5 * h * mu3)
    mu1 = jt(x, u, (h / 6.0) * lam + 0.5 * h * mu2)
    return lam + mu1 + mu2 + mu3 + mu4


def rk4_adjoint_step(sys: OdeSystem, x: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Transpose of the linearized RK4 step at (x, u) applied to v."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    lam = np.asarray(v, dtype=float)
    h = sys.dt / sys.substeps
    starts = []
    for _ in range(sys.substeps):
        starts.append(x)
        x = _rk4_substep(sys, x, u, h)
    for xs in reversed(starts):
        lam = _rk4_substep_adjoint(sys, xs, u, h, lam)
    return lam


def simulate(sys: DiscreteSystem, x0, inputs, t0: int = 0, label: str = "") -> Trajectory:
    u = as_inputs(inputs, sys.q0)
    T = u.shape[1]
    states = np.empty((sys.n, T + 1))
    states[:, 0] = np.asarray(x0, dtype=float)
    for k in range(T):
        try:
            x_next = sys.step(states[:, k], u[:, k])
        except NumericalBlowUp as exc:
            raise NumericalBlowUp(f"FOM: '{sys.name}' blew up at step {k}", step=k) from exc
        if not np.all(np.isfinite(x_next)):
            raise NumericalBlowUp(f"FOM: '{sys.name}' blew up at step {k}", step=k)
        states[:, k + 1] = x_next
    return Trajectory(states=states, inputs=u, t0=t0, dt=sys.dt, label=label)


def linearize(sys: DiscreteSystem, x_eq=None, u_eq=None, input_step: float = 1e-6) -> DiscreteSystem:
    """
    Dense linearization about (x_eq, u_eq), returned as an LTI DiscreteSystem.

    A and C come exactly from the adjoint products; B from central differences in u.
    """
    sys.require_adjoint()
    x_eq = np.zeros(sys.n) if x_eq is None else np.asarray(x_eq, dtype=float)
    u_eq = np.zeros(sys.q0) if u_eq is None else np.asarray(u_eq, dtype=float)
    eye_n = np.eye(sys.n)
    A = np.column_stack([sys.adjoint_step(x_eq, u_eq, eye_n[:, i]) for i in range(sys.n)]).T
    eye_m = np.eye(sys.m0)
    C = np.column_stack([sys.adjoint_output(x_eq, u_eq, eye_m[:, j]) for j in range(sys.m0)]).T
    B = np.empty((sys.n, sys.q0))
    for j in range(sys.q0):
        du = np.zeros(sys.q0)
        du[j] = input_step
        B[:, j] = (sys.step(x_eq, u_eq + du) - sys.step(x_eq, u_eq - du)) / (2.0 * input_step)
    logger.info(f"FOM: linearized '{sys.name}' about the given equilibrium (n={sys.n})")
    return lti_system(A, B, C, dt=sys.dt, name=f"{sys.name}-linearized")


# ---------- shipped systems ----------

def _input_column(B: np.ndarray, u: np.ndarray, x: np.ndarray) -> np.ndarray:
    bu = B @ np.asarray(u, dtype=float)
    if x.ndim == 2 and bu.ndim == 1:
        bu = bu[:, None]
    return bu


def lti_system(A, B, C, dt: float = 1.0, name: str = "lti") -> DiscreteSystem:
    """x(t+1) = A x + B u, y = C x."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    C = np.asarray(C, dtype=float).reshape(-1, A.shape[0])
    return DiscreteSystem(
        n=A.shape[0],
        q0=B.shape[1],
        m0=C.shape[0],
        step=lambda x, u: A @ x + _input_column(B, u, x),
        output=lambda x, u: C @ x,
        adjoint_step=lambda x, u, v: A.T @ v,
        adjoint_output=lambda x, u, eta: C.T @ eta,
        dt=dt,
        name=name,
        vectorized=True,
    )


def linear_ode_system(A, B, C, dt: float = 0.5, substeps: int = 50, name: str = "linear-ode") -> OdeSystem:
    """x' = A x + B u, y = C x."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    C = np.asarray(C, dtype=float).reshape(-1, A.shape[0])
    return OdeSystem(
        n=A.shape[0],
        q0=B.shape[1],
        m0=C.shape[0],
        vector_field=lambda x, u: A @ x + _input_column(B, u, x),
        jacobian_product=lambda x, u, v: A.T @ v,
        output=lambda x, u: C @ x,
        adjoint_output=lambda x, u, eta: C.T @ eta,
        dt=dt,
        substeps=substeps,
        name=name,
        vectorized=True,
    )


def random_stable_lti(n: int, q0: int, m0: int, rng: np.random.Generator,
                      radius: float = 0.8) -> DiscreteSystem:
    A = rng.standard_normal((n, n))
    A *= radius / np.max(np.abs(np.linalg.eigvals(A)))
    B = rng.standard_normal((n, q0))
    C = rng.standard_normal((m0, n))
    return lti_system(A, B, C, name=f"random-lti-{n}")


def _scalar_input(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return u[0] if u.ndim >= 1 else u


def toy_vector_field(x, u) -> np.ndarray:
    """Three-state model with strong coupling through the small-variance state x3."""
    x1, x2, x3 = x[0], x[1], x[2]
    u = _scalar_input(u)
    return np.stack([
        -x1 + 20.0 * x1 * x3 + u,
        -2.0 * x2 + 20.0 * x2 * x3 + u,
        -5.0 * x3 + u,
    ])


def toy_jacobian_product(x, u, v) -> np.ndarray:
    x1, x2, x3 = x[0], x[1], x[2]
    v1, v2, v3 = v[0], v[1], v[2]
    return np.stack([
        (-1.0 + 20.0 * x3) * v1,
        (-2.0 + 20.0 * x3) * v2,
        20.0 * x1 * v1 + 20.0 * x2 * v2 - 5.0 * v3,
    ])


def toy_output(x, u) -> np.ndarray:
    return np.sum(np.asarray(x, dtype=float), axis=0, keepdims=True)


def toy_adjoint_output(x, u, eta) -> np.ndarray:
    return np.repeat(np.asarray(eta, dtype=float), 3, axis=0)


def toy_model(dt: float = 0.5, substeps: int = 50) -> OdeSystem:
    return OdeSystem(
        n=3,
        q0=1,
        m0=1,
        vector_field=toy_vector_field,
        jacobian_product=toy_jacobian_product,
        output=toy_output,
        adjoint_output=toy_adjoint_output,
        dt=dt,
        substeps=substeps,
        name="toy",
        vectorized=True,
    )


def toy_impulse_state(u0: float) -> np.ndarray:
    """Initial state of the impulse response with magnitude u0."""
    return np.full(3, float(u0))


def nonnormal_chain(n: int = 50, alpha: float = 1.0, beta: float = 1.15, epsilon: float = 0.0,
                    dt: float = 0.5, substeps: int = 5) -> OdeSystem:
    """
    Advective chain x' = -alpha x + beta S x + e1 u - epsilon x^3 with full-state output.

    S shifts each state into its downstream neighbour, so disturbances entering
    upstream grow transiently while travelling down the chain although every
    eigenvalue equals -alpha.
    """
    if n < 2:
        raise ValueError(f"chain needs at least 2 states, got {n}")
    A = -alpha * np.eye(n) + beta * np.eye(n, k=-1)
    B = np.zeros((n, 1))
    B[0, 0] = 1.0

    def vector_field(x, u):
        return A @ x + _input_column(B, u, x) - epsilon * x ** 3

    def jacobian_product(x, u, v):
        return A.T @ v - 3.0 * epsilon * x ** 2 * v

    return OdeSystem(
        n=n,
        q0=1,
        m0=n,
        vector_field=vector_field,
        jacobian_product=jacobian_product,
        output=lambda x, u: np.array(x, dtype=float, copy=True),
        adjoint_output=lambda x, u, eta: np.array(eta, dtype=float, copy=True),
        dt=dt,
        substeps=substeps,
        name=f"chain-{n}",
        vectorized=True,
    )


def chain_impulse_state(n: int, u0: float) -> np.ndarray:
    x0 = np.zeros(n)
    x0[0] = u0
    return x0
