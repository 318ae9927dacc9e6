"""Accuracy metrics and estimator diagnostics.

The headline metric is the relative absolute error of a fitted model against
a ground truth, summed over a regular evaluation grid inside a per-timestep
confidence region:

    RAE_i = sum_x |V~_i(x) - V*_i(x)|  /  sum_x |mean_y V*_i(y) - V*_i(x)|,

so a model equal to the truth scores 0 and the best constant predictor
scores 1.  The region at step i is the per-coordinate interval
mean +/- max(3 std, 1) of a reference forward distribution.

Diagnostics pin a (state, drift) pair, resample the step noise, and measure
the conditional bias and variance of a backward target, plus the
change-of-measure bound

    |E_ref[delta]| <= exp(||D||^2 / 2) * E_sample[delta^2]^{1/2}

on the second-order remainder delta of the expansion against an exact value
function.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateDenominatorError
from .estimators import EstimatorKind, estimate_targets, taylor_triple
from .oracles import GroundTruth, gt_eval
from .problems import DiscreteProblem
from .sampling import TrajectoryBatch, pinned_step_batch, reweighted_expectation
from .value_model import ValueModel

__all__ = [
    "ConfidenceRegion",
    "BoundCell",
    "DiagnosticReport",
    "confidence_region",
    "rae",
    "estimator_bias_variance",
    "bias_bound_check",
    "report_to_csv",
]


@dataclass(frozen=True, eq=False)
class ConfidenceRegion:
    """Per-timestep, per-coordinate evaluation intervals with grid spacing.

    Exactly one of ``dx`` (arithmetic-progression spacing per coordinate) or
    ``points_per_axis`` (fixed node count per coordinate) controls the
    evaluation grid.
    """

    lower: np.ndarray
    upper: np.ndarray
    dx: Optional[float] = None
    points_per_axis: Optional[int] = None

    def __post_init__(self):
        if (self.dx is None) == (self.points_per_axis is None):
            raise ValueError("specify exactly one of dx or points_per_axis")

    @property
    def dim(self) -> int:
        return self.lower.shape[1]

    def grid_axes(self, i: int) -> list:
        axes = []
        for c in range(self.dim):
            lo, hi = self.lower[i, c], self.upper[i, c]
            if self.dx is not None:
                count = int(np.floor((hi - lo) / self.dx)) + 1
                axes.append(lo + self.dx * np.arange(count))
            else:
                axes.append(np.linspace(lo, hi, self.points_per_axis))
        return axes

    def grid_points(self, i: int) -> np.ndarray:
        mesh = np.meshgrid(*self.grid_axes(i), indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)


def confidence_region(
    reference_batch: TrajectoryBatch,
    dx: Optional[float] = None,
    points_per_axis: Optional[int] = None,
) -> ConfidenceRegion:
    """Evaluation region from a reference forward distribution.

    Each interval is mean +/- max(3 std, 1) per step and coordinate.  The
    default grid uses dx = 0.01 in one dimension and 9 points per axis
    otherwise.
    """
    mean = reference_batch.x.mean(axis=0)
    std = reference_batch.x.std(axis=0)
    half = np.maximum(3.0 * std, 1.0)
    if dx is None and points_per_axis is None:
        if reference_batch.dim == 1:
            dx = 1e-2
        else:
            points_per_axis = 9
    return ConfidenceRegion(
        lower=mean - half, upper=mean + half, dx=dx, points_per_axis=points_per_axis
    )


def rae(m: ValueModel, gt: GroundTruth, region: ConfidenceRegion, i: int) -> float:
    """Relative absolute error of the model at step ``i`` over the region.

    Raises
    ------
    DegenerateDenominatorError
        If the truth is (numerically) constant on the region.
    """
    pts = region.grid_points(i)
    v_model = np.asarray(m.eval(i, pts), dtype=float)
    v_true = np.asarray(gt_eval(gt, i, pts), dtype=float)
    numerator = float(np.sum(np.abs(v_model - v_true)))
    denominator = float(np.sum(np.abs(v_true.mean() - v_true)))
    scale = max(1.0, float(np.sum(np.abs(v_true))))
    if denominator <= 1e-15 * scale:
        raise DegenerateDenominatorError(
            f"ground truth is constant on the region at step {i}"
        )
    return numerator / denominator


def _centered_variance(values: np.ndarray) -> float:
    """Sample variance, exactly 0.0 for a bitwise-constant sample."""
    shifted = values - values[0]
    return float(np.mean((shifted - shifted.mean()) ** 2))


def estimator_bias_variance(
    kind: EstimatorKind,
    dp: DiscreteProblem,
    mu,
    m: ValueModel,
    i: int,
    x_pin,
    k_pin,
    n_rep: int,
    seed: int,
    truth: Optional[GroundTruth] = None,
) -> tuple:
    """Conditional (bias, variance) of a target at pinned (state, drift).

    Resamples the step noise ``n_rep`` times with (X_i, K_i) held fixed.
    ``bias`` is ``mean(Yhat) - V_i(x_pin)`` against the supplied truth, or
    ``None`` when no truth is available; the variance is returned either way.
    """
    batch = pinned_step_batch(dp, mu, i, x_pin, k_pin, n_rep, seed)
    targets = estimate_targets(kind, m, dp, mu, batch, i)
    variance = _centered_variance(targets.yhat)
    bias = None
    if truth is not None:
        v_true = float(gt_eval(truth, i, np.asarray(x_pin, dtype=float)))
        bias = float(targets.yhat.mean() - v_true)
    return bias, variance


@dataclass(frozen=True, eq=False)
class BoundCell:
    """One pinned (state, drift) cell of the remainder-bias bound check."""

    x: np.ndarray
    k_drift: np.ndarray
    d_norm: float
    lhs: float
    rhs: float
    stderr: float
    holds: bool


@dataclass(eq=False)
class DiagnosticReport:
    """Bias/variance/bound measurements for one backward step."""

    step: int
    kind: EstimatorKind
    bias: Optional[float]
    variance: float
    cells: list = field(default_factory=list)
    delta_samples: np.ndarray = field(default_factory=lambda: np.empty(0))
    fit_residual: dict = field(default_factory=dict)

    @property
    def bound_rhs(self) -> float:
        return max((c.rhs for c in self.cells), default=0.0)

    @property
    def verdict(self) -> bool:
        return all(c.holds for c in self.cells)


def bias_bound_check(
    dp: DiscreteProblem,
    mu,
    m: ValueModel,
    batch: TrajectoryBatch,
    i: int,
    truth: GroundTruth,
    n_cells: int = 5,
    n_rep: int = 4000,
    seed: int = 0,
    kind: EstimatorKind = EstimatorKind.TAYLOR_NOISELESS,
) -> DiagnosticReport:
    """Check the remainder-bias bound on pinned cells taken from a batch.

    For each of the first ``n_cells`` trajectories, the pair (X_i, K_i) is
    pinned, the step noise is resampled ``n_rep`` times, and the remainder

        delta = V_{i+1}(X_{i+1}) - [Ybar + Zbar.W + W.Mbar.W / 2]

    (exact truth minus second-order expansion of the model) is measured.  The
    cell holds when |reweighted mean of delta| <= exp(||D||^2/2) *
    rms(delta) + 3 stderr.
    """
    if not 0 <= i < batch.n_steps:
        raise ValueError(f"step {i} out of range [0, {batch.n_steps})")
    n_cells = min(n_cells, batch.n_samples)
    cells = []
    all_deltas = []
    for cell_idx in range(n_cells):
        x_pin = batch.x[cell_idx, i]
        k_pin = batch.k_drift[cell_idx, i]
        pinned = pinned_step_batch(dp, mu, i, x_pin, k_pin, n_rep, seed + cell_idx)
        tri = taylor_triple(m, i, pinned.x[:, i], pinned.k_drift[:, i], dp.Sigma(i, pinned.x[:, i]))
        w = pinned.w[:, i]
        expansion = (
            tri.ybar
            + np.einsum("mi,mi->m", tri.zbar, w)
            + 0.5 * np.einsum("mi,mij,mj->m", w, tri.mbar, w)
        )
        delta = np.asarray(gt_eval(truth, i + 1, pinned.x[:, i + 1]), dtype=float) - expansion
        all_deltas.append(delta)

        lhs = float(np.abs(reweighted_expectation(lambda b, k: delta[k], pinned, i + 1)))
        phi = np.exp(pinned.log_theta[:, i + 1])
        stderr = float(np.std(phi * delta, ddof=1) / np.sqrt(n_rep))
        d_norm = float(np.linalg.norm(pinned.d[0, i]))
        with np.errstate(over="ignore"):
            # an infinite bound is the honest value for very large drifts
            rhs = float(np.exp(0.5 * d_norm**2) * np.sqrt(np.mean(delta**2)))
        cells.append(
            BoundCell(
                x=x_pin.copy(),
                k_drift=k_pin.copy(),
                d_norm=d_norm,
                lhs=lhs,
                rhs=rhs,
                stderr=stderr,
                holds=bool(lhs <= rhs + 3.0 * stderr),
            )
        )

    resid = np.abs(
        np.asarray(m.eval(i + 1, batch.x[:, i + 1]), dtype=float)
        - np.asarray(gt_eval(truth, i + 1, batch.x[:, i + 1]), dtype=float)
    )
    bias, variance = estimator_bias_variance(
        kind,
        dp,
        mu,
        m,
        i,
        batch.x[0, i],
        batch.k_drift[0, i],
        n_rep,
        seed,
        truth=truth,
    )
    return DiagnosticReport(
        step=i,
        kind=kind,
        bias=bias,
        variance=variance,
        cells=cells,
        delta_samples=np.concatenate(all_deltas),
        fit_residual={
            "mean": float(resid.mean()),
            "max": float(resid.max()),
        },
    )


def report_to_csv(reports, path) -> None:
    """Serialize bound-check cells: one row per (step, cell).

    Header: step, kind, cell, d_norm, lhs, rhs, stderr, holds, bias,
    variance, fit_residual_mean, fit_residual_max.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "step",
                "kind",
                "cell",
                "d_norm",
                "lhs",
                "rhs",
                "stderr",
                "holds",
                "bias",
                "variance",
                "fit_residual_mean",
                "fit_residual_max",
            ]
        )
        for report in reports:
            for idx, cell in enumerate(report.cells):
                writer.writerow(
                    [
                        report.step,
                        report.kind.value,
                        idx,
                        repr(cell.d_norm),
                        repr(cell.lhs),
                        repr(cell.rhs),
                        repr(cell.stderr),
                        int(cell.holds),
                        "" if report.bias is None else repr(report.bias),
                        repr(report.variance),
                        repr(report.fit_residual.get("mean", float("nan"))),
                        repr(report.fit_residual.get("max", float("nan"))),
                    ]
                )
