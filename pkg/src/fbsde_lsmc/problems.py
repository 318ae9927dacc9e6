"""Stochastic optimal control problem definitions and their discretizations.

A continuous problem is specified by a drift ``f(t, x, u)``, an invertible
diffusion ``sigma(t, x)``, a nonnegative running cost ``ell(t, x, u)``, a
nonnegative terminal cost ``g(x)``, a horizon ``T`` and a box of admissible
controls.  Discretization replaces these with per-step increment maps

    F_i(x, u) = f(t_i, x, u) * dt
    Sigma_i(x) = sigma(t_i, x) * sqrt(dt)
    L_i(x, u) = ell(t_i, x, u) * dt

on the uniform grid t_i = i * dt, dt = T / N.

All problem callables broadcast over leading axes: states carry a trailing
axis of length ``dim_x`` and controls a trailing axis of length ``dim_u``,
so ``f(t, x, u)`` maps ``(..., n), (..., m) -> (..., n)``, ``sigma`` maps
``(..., n) -> (..., n, n)`` and the costs map to shape ``(...)``.  This
lets samplers and grid solvers evaluate whole batches at once.

Two benchmark instances are provided: a scalar problem with nonlinear drift
and an absolute-value running cost, and a four-dimensional linear-quadratic
cart-pole balancing problem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "ControlStructure",
    "LqrStructure",
    "LqrParams",
    "ContinuousProblem",
    "DiscreteProblem",
    "ConstantPolicy",
    "FeedbackPolicy",
    "discretize",
    "cartpole_linearization",
    "build_nonlinear_1d",
    "build_cartpole_lqr",
]


@dataclass(frozen=True, eq=False)
class ControlStructure:
    """Decomposition of drift and cost as functions of the control.

    Declares that ``f(t, x, u) = drift_state(t, x) + drift_gain(t, x) @ u``
    and ``ell(t, x, u) = cost_state(t, x) + u^T cost_quad u + cost_l1^T |u|``.
    Policy-improvement code uses this to minimize over controls in closed
    form; problems without the decomposition fall back to grid search.
    """

    drift_state: Callable[[float, np.ndarray], np.ndarray]
    drift_gain: Callable[[float, np.ndarray], np.ndarray]
    cost_state: Callable[[float, np.ndarray], np.ndarray]
    cost_quad: np.ndarray
    cost_l1: np.ndarray


@dataclass(frozen=True, eq=False)
class LqrStructure:
    """Continuous-time matrices of a linear-quadratic problem.

    Dynamics dX = (a x + b u) dt + sigma_mat dW, running cost
    x^T q x + u^T r u, terminal cost x^T g_mat x.
    """

    a: np.ndarray
    b: np.ndarray
    q: np.ndarray
    r: np.ndarray
    g_mat: np.ndarray
    sigma_mat: np.ndarray


@dataclass(frozen=True, eq=False)
class ContinuousProblem:
    """Continuous-time stochastic optimal control problem.

    Attributes
    ----------
    dim_x, dim_u : int
        State and control dimensions.
    horizon : float
        Terminal time T in seconds.
    f : callable
        Drift field ``f(t, x, u) -> (..., dim_x)``.
    sigma : callable
        Diffusion field ``sigma(t, x) -> (..., dim_x, dim_x)``; must be
        invertible wherever queried.
    ell : callable
        Nonnegative running cost ``ell(t, x, u) -> (...)``.
    g : callable
        Nonnegative terminal cost ``g(x) -> (...)``.
    control_lower, control_upper : ndarray
        Per-coordinate closed control intervals (may be infinite).
    x0 : ndarray
        Nominal initial state.
    structure : ControlStructure, optional
        Control-affine/quadratic decomposition when available.
    lqr : LqrStructure, optional
        Exact matrices when the problem is linear-quadratic.
    """

    dim_x: int
    dim_u: int
    horizon: float
    f: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    sigma: Callable[[float, np.ndarray], np.ndarray]
    ell: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    control_lower: np.ndarray
    control_upper: np.ndarray
    x0: np.ndarray
    structure: Optional[ControlStructure] = None
    lqr: Optional[LqrStructure] = None

    def __post_init__(self):
        lo = np.asarray(self.control_lower, dtype=float)
        hi = np.asarray(self.control_upper, dtype=float)
        if lo.shape != (self.dim_u,) or hi.shape != (self.dim_u,):
            raise ValueError("control box must have one interval per control coordinate")
        if np.any(lo > hi):
            raise ValueError("control box has an empty interval (lower > upper)")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")


@dataclass(frozen=True, eq=False)
class DiscreteProblem:
    """Discrete-time problem on a uniform grid of ``n_steps`` intervals.

    ``F``, ``Sigma`` and ``L`` take the step index ``i`` in place of time and
    follow the same broadcasting convention as :class:`ContinuousProblem`.
    Instances built by :func:`discretize` satisfy the dt-scaling relations in
    the module docstring; hand-built instances only need the shapes to match.
    """

    n_steps: int
    dt: float
    dim_x: int
    dim_u: int
    F: Callable[[int, np.ndarray, np.ndarray], np.ndarray]
    Sigma: Callable[[int, np.ndarray], np.ndarray]
    L: Callable[[int, np.ndarray, np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    control_lower: np.ndarray
    control_upper: np.ndarray
    x0: np.ndarray
    structure: Optional[ControlStructure] = None
    lqr: Optional[LqrStructure] = None

    def t(self, i: int) -> float:
        """Physical time of step ``i``."""
        return i * self.dt


class ConstantPolicy:
    """Policy returning a fixed control, clipped to the box."""

    def __init__(self, value, lower, upper):
        self.value = np.clip(np.asarray(value, dtype=float), lower, upper)

    def __call__(self, i: int, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.value, x.shape[:-1] + self.value.shape).copy()


class FeedbackPolicy:
    """Linear state feedback ``u_i = gains_i @ x``, clipped to the box.

    ``gains`` is either a single ``(m, n)`` matrix used at every step or an
    array ``(N, m, n)`` of per-step matrices.
    """

    def __init__(self, gains, lower, upper):
        self.gains = np.asarray(gains, dtype=float)
        if self.gains.ndim not in (2, 3):
            raise ValueError("gains must be (m, n) or (steps, m, n)")
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)

    def __call__(self, i: int, x: np.ndarray) -> np.ndarray:
        gain = self.gains if self.gains.ndim == 2 else self.gains[i]
        u = np.asarray(x, dtype=float) @ gain.T
        return np.clip(u, self.lower, self.upper)


def discretize(cp: ContinuousProblem, n_steps: int) -> DiscreteProblem:
    """Discretize a continuous problem onto ``n_steps`` uniform intervals.

    Drift and cost increments are scaled by ``dt`` and the diffusion by
    ``sqrt(dt)``; the returned closures capture ``cp`` (immutable) by value.

    Raises
    ------
    ValueError
        If ``n_steps`` is not a positive integer.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    dt = cp.horizon / n_steps
    sqrt_dt = math.sqrt(dt)

    def F(i, x, u):
        return cp.f(i * dt, x, u) * dt

    def Sigma(i, x):
        return cp.sigma(i * dt, x) * sqrt_dt

    def L(i, x, u):
        return cp.ell(i * dt, x, u) * dt

    return DiscreteProblem(
        n_steps=n_steps,
        dt=dt,
        dim_x=cp.dim_x,
        dim_u=cp.dim_u,
        F=F,
        Sigma=Sigma,
        L=L,
        g=cp.g,
        control_lower=cp.control_lower,
        control_upper=cp.control_upper,
        x0=cp.x0,
        structure=cp.structure,
        lqr=cp.lqr,
    )


def build_nonlinear_1d(u_max: float = 20.0) -> ContinuousProblem:
    """Scalar benchmark with quadratic drift and absolute-value state cost.

    Dynamics dX = (0.1 (X - 3)^2 + 0.2 u) dt + 0.8 dW starting at x0 = 7,
    running cost 12 |x - 6| + 0.4 u^2, terminal cost 25 x^2, horizon 10.
    The control box [-u_max, u_max] is wide enough by default to contain the
    unconstrained minimizers over the region the experiments evaluate.
    """
    if u_max <= 0:
        raise ValueError("u_max must be positive")

    def f(t, x, u):
        return 0.1 * (x - 3.0) ** 2 + 0.2 * u

    def sigma(t, x):
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape[:-1] + (1, 1), 0.8)
        return out

    def ell(t, x, u):
        return 12.0 * np.abs(x[..., 0] - 6.0) + 0.4 * u[..., 0] ** 2

    def g(x):
        return 25.0 * np.asarray(x, dtype=float)[..., 0] ** 2

    structure = ControlStructure(
        drift_state=lambda t, x: 0.1 * (np.asarray(x, dtype=float) - 3.0) ** 2,
        drift_gain=lambda t, x: np.full(np.shape(x)[:-1] + (1, 1), 0.2),
        cost_state=lambda t, x: 12.0 * np.abs(np.asarray(x, dtype=float)[..., 0] - 6.0),
        cost_quad=np.array([[0.4]]),
        cost_l1=np.zeros(1),
    )
    return ContinuousProblem(
        dim_x=1,
        dim_u=1,
        horizon=10.0,
        f=f,
        sigma=sigma,
        ell=ell,
        g=g,
        control_lower=np.array([-u_max]),
        control_upper=np.array([u_max]),
        x0=np.array([7.0]),
        structure=structure,
    )


def cartpole_linearization(
    cart_mass: float = 1.0,
    pole_mass: float = 0.1,
    half_length: float = 0.5,
    gravity: float = 9.81,
) -> tuple:
    """Constants of the upright cart-pole linearization (point-mass pole).

    Returns (a1, ..., a6, b1, b2) for the state [cart position, cart
    velocity, pole angle, pole angular velocity] with a force input:

        x_ddot     = a1 x_dot + a2 theta + a3 theta_dot + b1 u
        theta_ddot = a4 x_dot + a5 theta + a6 theta_dot + b2 u
    """
    a1 = 0.0
    a2 = pole_mass * gravity / cart_mass
    a3 = 0.0
    a4 = 0.0
    a5 = (cart_mass + pole_mass) * gravity / (cart_mass * half_length)
    a6 = 0.0
    b1 = 1.0 / cart_mass
    b2 = 1.0 / (cart_mass * half_length)
    return a1, a2, a3, a4, a5, a6, b1, b2


_CARTPOLE_DEFAULTS = cartpole_linearization()


@dataclass(frozen=True, eq=False)
class LqrParams:
    """Parameters of the linearized cart-pole benchmark.

    The linearization constants default to a cart of 1.0 kg, a 0.1 kg pole of
    half-length 0.5 m and g = 9.81 m/s^2; cost matrices default to identities
    and the horizon to 5 s.  ``sigma_patch`` zeroes the single off-diagonal
    diffusion entry (row 1, column 3) for sensitivity runs.
    """

    a1: float = _CARTPOLE_DEFAULTS[0]
    a2: float = _CARTPOLE_DEFAULTS[1]
    a3: float = _CARTPOLE_DEFAULTS[2]
    a4: float = _CARTPOLE_DEFAULTS[3]
    a5: float = _CARTPOLE_DEFAULTS[4]
    a6: float = _CARTPOLE_DEFAULTS[5]
    b1: float = _CARTPOLE_DEFAULTS[6]
    b2: float = _CARTPOLE_DEFAULTS[7]
    q: np.ndarray = field(default_factory=lambda: np.eye(4))
    r: np.ndarray = field(default_factory=lambda: np.eye(1))
    g_mat: np.ndarray = field(default_factory=lambda: np.eye(4))
    horizon: float = 5.0
    sigma_patch: bool = False


def _check_psd(mat: np.ndarray, name: str, strict: bool) -> None:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be a square matrix")
    eigs = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    if strict:
        if np.min(eigs) <= 0:
            raise ValueError(f"{name} must be positive definite")
    elif np.min(eigs) < -1e-12 * max(1.0, np.max(np.abs(eigs))):
        raise ValueError(f"{name} must be positive semidefinite")


def build_cartpole_lqr(params: Optional[LqrParams] = None) -> ContinuousProblem:
    """Linearized 4-D cart-pole balancing problem with additive noise.

    Drift f(t, x, u) = A x + B u with the sparsity pattern of the upright
    linearization, a constant 4x4 diffusion matrix, quadratic running and
    terminal costs, and initial state [0, 0, pi/9, 0].
    """
    p = params or LqrParams()
    a = np.array(
        [
            [0.0, 1.0, 0.0, 0.0],
            [0.0, p.a1, p.a2, p.a3],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, p.a4, p.a5, p.a6],
        ]
    )
    b = np.array([[0.0], [p.b1], [0.0], [p.b2]])
    sigma_mat = np.array(
        [
            [0.01, 0.0, 0.0, 0.0],
            [0.0, 0.1, 0.0, 1.0],
            [0.0, 0.0, 0.01, 0.0],
            [0.0, 0.0, 0.0, 0.1],
        ]
    )
    if p.sigma_patch:
        sigma_mat[1, 3] = 0.0

    q = np.asarray(p.q, dtype=float)
    r = np.asarray(p.r, dtype=float)
    g_mat = np.asarray(p.g_mat, dtype=float)
    _check_psd(q, "q", strict=False)
    _check_psd(g_mat, "g_mat", strict=False)
    _check_psd(r, "r", strict=True)

    def f(t, x, u):
        return np.asarray(x, dtype=float) @ a.T + np.asarray(u, dtype=float) @ b.T

    def sigma(t, x):
        shape = np.shape(x)[:-1] + (4, 4)
        return np.broadcast_to(sigma_mat, shape).copy()

    def ell(t, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return np.einsum("...i,ij,...j->...", x, q, x) + np.einsum(
            "...i,ij,...j->...", u, r, u
        )

    def g(x):
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, g_mat, x)

    structure = ControlStructure(
        drift_state=lambda t, x: np.asarray(x, dtype=float) @ a.T,
        drift_gain=lambda t, x: np.broadcast_to(b, np.shape(x)[:-1] + (4, 1)).copy(),
        cost_state=lambda t, x: np.einsum(
            "...i,ij,...j->...", np.asarray(x, dtype=float), q, np.asarray(x, dtype=float)
        ),
        cost_quad=r,
        cost_l1=np.zeros(1),
    )
    return ContinuousProblem(
        dim_x=4,
        dim_u=1,
        horizon=p.horizon,
        f=f,
        sigma=sigma,
        ell=ell,
        g=g,
        control_lower=np.array([-np.inf]),
        control_upper=np.array([np.inf]),
        x0=np.array([0.0, 0.0, math.pi / 9.0, 0.0]),
        structure=structure,
        lqr=LqrStructure(a=a, b=b, q=q, r=r, g_mat=g_mat, sigma_mat=sigma_mat),
    )
