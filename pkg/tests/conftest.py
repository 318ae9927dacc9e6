"""Shared builders for the test suite."""

import numpy as np
import pytest

from fbsde_lsmc import (
    BasisSpec,
    ContinuousProblem,
    ValueModel,
    discretize,
    fit_function,
    riccati_from_lqr,
)
from fbsde_lsmc.problems import LqrStructure


def make_scalar_lqr(
    a=-0.3,
    b=1.0,
    q=1.0,
    r=1.0,
    g=2.0,
    sigma=0.7,
    horizon=1.0,
    x0=1.0,
    u_max=50.0,
) -> ContinuousProblem:
    """Scalar linear-quadratic problem with full structure metadata."""

    def f(t, x, u):
        return a * x + b * u

    def sig(t, x):
        return np.full(np.shape(x)[:-1] + (1, 1), sigma)

    def ell(t, x, u):
        return q * x[..., 0] ** 2 + r * u[..., 0] ** 2

    def term(x):
        return g * np.asarray(x, dtype=float)[..., 0] ** 2

    from fbsde_lsmc.problems import ControlStructure

    structure = ControlStructure(
        drift_state=lambda t, x: a * np.asarray(x, dtype=float),
        drift_gain=lambda t, x: np.full(np.shape(x)[:-1] + (1, 1), b),
        cost_state=lambda t, x: q * np.asarray(x, dtype=float)[..., 0] ** 2,
        cost_quad=np.array([[r]]),
        cost_l1=np.zeros(1),
    )
    return ContinuousProblem(
        dim_x=1,
        dim_u=1,
        horizon=horizon,
        f=f,
        sigma=sig,
        ell=ell,
        g=term,
        control_lower=np.array([-u_max]),
        control_upper=np.array([u_max]),
        x0=np.array([x0]),
        structure=structure,
        lqr=LqrStructure(
            a=np.array([[a]]),
            b=np.array([[b]]),
            q=np.array([[q]]),
            r=np.array([[r]]),
            g_mat=np.array([[g]]),
            sigma_mat=np.array([[sigma]]),
        ),
    )


def model_from_truth(truth, dim, n_steps, degree=2, half_width=4.0, center=None):
    """Exact-in-span model reproducing a ground truth on every step.

    Uses a fixed scaling box (center +/- half_width per coordinate) and
    Chebyshev-node interpolation, which is exact for quadratics.
    """
    center = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
    lo = np.tile(center - half_width, (n_steps + 1, 1))
    hi = np.tile(center + half_width, (n_steps + 1, 1))
    spec = BasisSpec(dim=dim, max_total_degree=degree, scale_lo=lo, scale_hi=hi)
    model = ValueModel.empty(spec, n_steps)
    for i in range(n_steps + 1):
        model.set_coeffs(i, fit_function(spec, i, lambda pts: truth.value(i, pts)))
    return model


@pytest.fixture(scope="session")
def scalar_lqr_setup():
    """Discretized scalar LQR with its Riccati truth and optimal policy."""
    cp = make_scalar_lqr()
    n_steps = 20
    dp = discretize(cp, n_steps)
    truth = riccati_from_lqr(cp.lqr, cp.horizon, n_steps)
    mu = truth.policy(dp.control_lower, dp.control_upper)
    return cp, dp, truth, mu
