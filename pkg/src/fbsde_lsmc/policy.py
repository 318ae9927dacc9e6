"""Policy improvement from a fitted value model.

Two minimizers are provided.  The Hamiltonian rule picks

    argmin_u  L_i(x, u) + F_i(x, u)^T grad V~_i(x)

using only the gradient of the current-step model; it is kept as the
comparison baseline.  The second-order rule minimizes the expansion-based
state-action value

    Q~_i(x, u) = L_i(x, u) + V~_{i+1}(x + F_i(x, u))
                 + tr(Sigma_i^T hess V~_{i+1}(x + F_i(x, u)) Sigma_i) / 2,

which is exact for quadratic models, where it reproduces the optimal
linear-quadratic feedback.

Both solvers use a closed form when the problem declares a control-affine
drift with a separable (diagonal) quadratic-plus-L1 control cost over an
interval box: per-coordinate stationary points are soft-thresholded and
clipped against the interval endpoints.  Anything else falls back to a
tensor grid search over the box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problems import DiscreteProblem
from .value_model import ValueModel

__all__ = ["QEval", "hamiltonian_policy", "taylor_q", "improve_policy", "ImprovedPolicy"]


@dataclass(frozen=True, eq=False)
class QEval:
    """A state-action value sample at (step, x, u)."""

    value: float
    step: int
    x: np.ndarray
    u: np.ndarray


def _diagonal_part(quad: np.ndarray, m: int):
    """(diagonal, True) when ``quad`` is diagonal within rounding, else (None, False)."""
    diag = np.diagonal(quad, axis1=-2, axis2=-1)
    off = quad - np.eye(m) * diag[..., None, :]
    scale = max(1.0, float(np.max(np.abs(quad))))
    if np.all(np.abs(off) <= 1e-12 * scale):
        return diag, True
    return None, False


def _separable_argmin(quad_diag, lin, l1, lower, upper):
    """Coordinatewise argmin of a_j u^2 + c_j u + l_j |u| over [lo_j, hi_j].

    Candidates are the soft-thresholded stationary points of the two smooth
    branches, the interval endpoints and 0, so nonconvex coordinates still
    get the exact interval minimum.  ``lin`` (and optionally ``quad_diag``)
    may carry leading batch axes.
    """
    lin = np.asarray(lin, dtype=float)
    quad_diag = np.broadcast_to(np.asarray(quad_diag, dtype=float), lin.shape)
    out = np.empty(lin.shape)
    for j in range(lin.shape[-1]):
        a = quad_diag[..., j]
        c = lin[..., j]
        lam = l1[j]
        lo, hi = lower[j], upper[j]
        if (not np.isfinite(lo) or not np.isfinite(hi)) and np.any(a <= 0):
            raise ValueError("quadratic control term not positive on an unbounded box")
        zero = np.clip(0.0, lo, hi)
        cands = [np.broadcast_to(zero, c.shape)]
        if np.isfinite(lo):
            cands.append(np.full(c.shape, lo))
        if np.isfinite(hi):
            cands.append(np.full(c.shape, hi))
        with np.errstate(divide="ignore", invalid="ignore"):
            u_pos = (-c - lam) / (2 * a)
            u_neg = (-c + lam) / (2 * a)
        convex = a > 0
        cands.append(np.where(convex, np.clip(np.maximum(u_pos, 0.0), lo, hi), zero))
        cands.append(np.where(convex, np.clip(np.minimum(u_neg, 0.0), lo, hi), zero))
        cand = np.stack(cands)
        vals = a * cand**2 + c * cand + lam * np.abs(cand)
        pick = np.argmin(vals, axis=0)
        out[..., j] = np.take_along_axis(cand, pick[None], axis=0)[0]
    return out


def _control_grid(dp: DiscreteProblem, grid_points: int) -> np.ndarray:
    lo, hi = dp.control_lower, dp.control_upper
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("grid search needs a finite control box")
    axes = [np.linspace(lo[j], hi[j], grid_points) for j in range(dp.dim_u)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def hamiltonian_policy(
    m: ValueModel, dp: DiscreteProblem, i: int, x, grid_points: int = 1001
) -> np.ndarray:
    """Gradient-based control at (i, x); model must be fitted at step ``i``.

    Broadcasts over leading axes of ``x`` on the closed-form path; the grid
    fallback handles one state at a time.
    """
    x = np.asarray(x, dtype=float)
    grad = m.grad(i, x)
    st = dp.structure
    if st is not None:
        diag, ok = _diagonal_part(st.cost_quad, dp.dim_u)
        if ok:
            gain = st.drift_gain(dp.t(i), x)
            lin = np.einsum("...nj,...n->...j", gain, grad)
            return _separable_argmin(
                diag, lin, st.cost_l1, dp.control_lower, dp.control_upper
            )

    if x.ndim != 1:
        raise ValueError("grid-search fallback handles one state at a time")
    us = _control_grid(dp, grid_points)
    xs = np.broadcast_to(x, (us.shape[0],) + x.shape)
    vals = dp.L(i, xs, us) + np.einsum("gn,n->g", dp.F(i, xs, us), grad)
    return us[int(np.argmin(vals))]


def taylor_q(m: ValueModel, dp: DiscreteProblem, i: int, x, u) -> QEval:
    """Second-order state-action value at (i, x, u); model fitted at ``i + 1``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    value = _taylor_q_values(m, dp, i, x, u)
    return QEval(value=float(value) if np.ndim(value) == 0 else value, step=i, x=x, u=u)


def _taylor_q_values(m, dp, i, x, u):
    x_next = x + dp.F(i, x, u)
    sig = dp.Sigma(i, x)
    hess = m.hessian(i + 1, x_next)
    trace = 0.5 * np.einsum("...ki,...kl,...li->...", sig, hess, sig)
    return dp.L(i, x, u) + m.eval(i + 1, x_next) + trace


def improve_policy(
    m: ValueModel, dp: DiscreteProblem, i: int, x, grid_points: int = 1001
) -> np.ndarray:
    """Control minimizing the second-order state-action value at (i, x).

    The closed form applies when the problem declares control-affine
    structure, the model has total degree <= 2 (its expansion is exact and
    the trace term constant in u) and the combined quadratic term

        R dt + drift_gain^T hess V~ drift_gain dt^2 / 2

    is diagonal; it then broadcasts over leading axes of ``x``.  Otherwise
    the control box is grid searched one state at a time.
    """
    x = np.asarray(x, dtype=float)
    st = dp.structure
    if st is not None and m.basis.max_total_degree <= 2:
        t, dt = dp.t(i), dp.dt
        x_bar = x + st.drift_state(t, x) * dt
        gain = st.drift_gain(t, x) * dt
        grad = m.grad(i + 1, x_bar)
        hess = m.hessian(i + 1, x_bar)
        quad = st.cost_quad * dt + 0.5 * np.einsum(
            "...nj,...nl,...lk->...jk", gain, hess, gain
        )
        diag, ok = _diagonal_part(quad, dp.dim_u)
        if ok:
            lin = np.einsum("...nj,...n->...j", gain, grad)
            return _separable_argmin(
                diag, lin, st.cost_l1 * dt, dp.control_lower, dp.control_upper
            )

    if x.ndim != 1:
        raise ValueError("grid-search fallback handles one state at a time")
    us = _control_grid(dp, grid_points)
    xs = np.broadcast_to(x, (us.shape[0],) + x.shape)
    vals = _taylor_q_values(m, dp, i, xs, us)
    return us[int(np.argmin(vals))]


class ImprovedPolicy:
    """Policy wrapper applying :func:`improve_policy` pointwise."""

    def __init__(self, m: ValueModel, dp: DiscreteProblem, grid_points: int = 1001):
        self.model = m
        self.dp = dp
        self.grid_points = grid_points

    def __call__(self, i: int, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return improve_policy(self.model, self.dp, i, x, self.grid_points)
        try:
            return improve_policy(self.model, self.dp, i, x, self.grid_points)
        except ValueError:
            flat = x.reshape(-1, x.shape[-1])
            out = np.stack(
                [improve_policy(self.model, self.dp, i, xx, self.grid_points) for xx in flat]
            )
            return out.reshape(x.shape[:-1] + (self.dp.dim_u,))
