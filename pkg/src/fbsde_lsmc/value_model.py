"""Linear-in-parameters value models over multivariate Chebyshev bases.

Features are products of univariate Chebyshev polynomials of the first kind
over all multi-indices of total degree at most ``d``, giving

    binom(dim + d, d)

basis functions.  Each timestep carries its own affine scaling of the state
into [-1, 1] per coordinate (chosen from the sampled state distribution), and
evaluation outside [-1, 1] is permitted via the three-term recurrence.
Gradients and Hessians are analytic: the recurrence is differentiated once
and twice and composed with the scaling slopes by the chain rule.

Fitting is plain ridge-regularized least squares on the feature matrix,
solved through an orthogonal factorization.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product
from typing import Callable

import numpy as np

from .errors import NotFittedError, RankDeficientWarning

__all__ = [
    "BasisSpec",
    "ValueModel",
    "basis_eval",
    "basis_grad",
    "basis_hessian",
    "lsmc_fit",
    "scaling_from_batch",
    "fit_function",
    "model_to_json",
    "save_model_json",
]


def _multi_indices(dim: int, degree: int) -> np.ndarray:
    """All multi-indices with total degree <= degree, graded lexicographic."""
    idx = [a for a in product(range(degree + 1), repeat=dim) if sum(a) <= degree]
    idx.sort(key=lambda a: (sum(a), a))
    return np.array(idx, dtype=np.intp)


@dataclass(frozen=True, eq=False)
class BasisSpec:
    """Chebyshev product basis with per-timestep affine state scaling.

    Attributes
    ----------
    dim : int
        State dimension.
    max_total_degree : int
        Total-degree truncation d; the basis has binom(dim + d, d) functions.
    scale_lo, scale_hi : ndarray, shape (steps, dim)
        Per-timestep boxes mapped affinely onto [-1, 1]^dim; must satisfy
        ``scale_hi > scale_lo`` everywhere.
    """

    dim: int
    max_total_degree: int
    scale_lo: np.ndarray
    scale_hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.scale_lo, dtype=float)
        hi = np.asarray(self.scale_hi, dtype=float)
        if lo.ndim != 2 or lo.shape[1] != self.dim or lo.shape != hi.shape:
            raise ValueError("scaling boxes must have shape (steps, dim)")
        if not np.all(hi > lo):
            raise ValueError("scaling maps must be strictly increasing (hi > lo)")
        if self.max_total_degree < 0:
            raise ValueError("max_total_degree must be nonnegative")

    @classmethod
    def with_unit_scaling(cls, dim: int, max_total_degree: int, n_steps: int) -> "BasisSpec":
        """Identity-like scaling: the box [-1, 1] itself at every step."""
        lo = np.full((n_steps + 1, dim), -1.0)
        hi = np.full((n_steps + 1, dim), 1.0)
        return cls(dim, max_total_degree, lo, hi)

    @cached_property
    def indices(self) -> np.ndarray:
        return _multi_indices(self.dim, self.max_total_degree)

    @property
    def size(self) -> int:
        d = self.max_total_degree
        return math.comb(self.dim + d, d)

    @property
    def n_steps_covered(self) -> int:
        return self.scale_lo.shape[0]

    def scaled(self, i: int, x: np.ndarray) -> tuple:
        """Map states to the unit box; returns (z, slopes)."""
        lo = self.scale_lo[i]
        hi = self.scale_hi[i]
        slope = 2.0 / (hi - lo)
        z = (2.0 * x - hi - lo) / (hi - lo)
        return z, slope


def _cheb_with_derivatives(z: np.ndarray, degree: int) -> tuple:
    """Chebyshev values T_j(z) and first/second derivatives, j = 0..degree.

    Returned arrays have shape ``z.shape + (degree + 1,)``.  The three-term
    recurrence (and its derivatives) is total: valid for any real z.
    """
    shape = z.shape + (degree + 1,)
    t = np.empty(shape)
    dt = np.zeros(shape)
    d2t = np.zeros(shape)
    t[..., 0] = 1.0
    if degree >= 1:
        t[..., 1] = z
        dt[..., 1] = 1.0
    for j in range(2, degree + 1):
        t[..., j] = 2.0 * z * t[..., j - 1] - t[..., j - 2]
        dt[..., j] = 2.0 * t[..., j - 1] + 2.0 * z * dt[..., j - 1] - dt[..., j - 2]
        d2t[..., j] = 4.0 * dt[..., j - 1] + 2.0 * z * d2t[..., j - 1] - d2t[..., j - 2]
    return t, dt, d2t


def _select(table: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """table (..., n, J) selected at indices (B, n) -> (..., B, n)."""
    n = indices.shape[1]
    return table[..., np.arange(n), indices]


def basis_eval(spec: BasisSpec, i: int, x) -> np.ndarray:
    """Feature vector Phi(x) at step ``i``; shape ``x.shape[:-1] + (size,)``."""
    x = np.asarray(x, dtype=float)
    z, _ = spec.scaled(i, x)
    t, _, _ = _cheb_with_derivatives(z, spec.max_total_degree)
    tsel = _select(t, spec.indices)
    return np.prod(tsel, axis=-1)


def basis_grad(spec: BasisSpec, i: int, x) -> np.ndarray:
    """Feature Jacobian; shape ``x.shape[:-1] + (size, dim)``."""
    x = np.asarray(x, dtype=float)
    z, slope = spec.scaled(i, x)
    t, dt, _ = _cheb_with_derivatives(z, spec.max_total_degree)
    tsel = _select(t, spec.indices)
    dtsel = _select(dt, spec.indices)
    n = spec.dim
    out = np.empty(tsel.shape)
    for c in range(n):
        others = [cc for cc in range(n) if cc != c]
        partial = np.prod(tsel[..., others], axis=-1) if others else 1.0
        out[..., c] = slope[c] * dtsel[..., c] * partial
    return out


def basis_hessian(spec: BasisSpec, i: int, x) -> np.ndarray:
    """Feature Hessians; shape ``x.shape[:-1] + (size, dim, dim)``."""
    x = np.asarray(x, dtype=float)
    z, slope = spec.scaled(i, x)
    t, dt, d2t = _cheb_with_derivatives(z, spec.max_total_degree)
    tsel = _select(t, spec.indices)
    dtsel = _select(dt, spec.indices)
    d2tsel = _select(d2t, spec.indices)
    n = spec.dim
    out = np.empty(tsel.shape + (n,))
    for c in range(n):
        for e in range(c, n):
            others = [cc for cc in range(n) if cc not in (c, e)]
            partial = np.prod(tsel[..., others], axis=-1) if others else 1.0
            if c == e:
                val = slope[c] ** 2 * d2tsel[..., c] * partial
            else:
                val = slope[c] * slope[e] * dtsel[..., c] * dtsel[..., e] * partial
            out[..., c, e] = val
            out[..., e, c] = val
    return out


@dataclass(eq=False)
class ValueModel:
    """Per-timestep linear value model over a shared basis.

    Coefficients are NaN until a step is fitted; querying an unfitted step
    raises :class:`NotFittedError`.  Evaluation broadcasts over leading axes
    of the state argument.
    """

    basis: BasisSpec
    coeffs: np.ndarray
    fitted: np.ndarray
    rank_deficient: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.rank_deficient is None:
            self.rank_deficient = np.zeros(self.coeffs.shape[0], dtype=bool)

    @classmethod
    def empty(cls, basis: BasisSpec, n_steps: int) -> "ValueModel":
        """Unfitted model covering steps 0..n_steps."""
        coeffs = np.full((n_steps + 1, basis.size), np.nan)
        fitted = np.zeros(n_steps + 1, dtype=bool)
        return cls(basis=basis, coeffs=coeffs, fitted=fitted)

    @property
    def fitted_steps(self) -> set:
        return set(np.nonzero(self.fitted)[0].tolist())

    def set_coeffs(self, i: int, alpha: np.ndarray, rank_deficient: bool = False) -> None:
        alpha = np.asarray(alpha, dtype=float)
        if alpha.shape != (self.basis.size,):
            raise ValueError(f"expected {self.basis.size} coefficients, got {alpha.shape}")
        self.coeffs[i] = alpha
        self.fitted[i] = True
        self.rank_deficient[i] = rank_deficient

    def _require(self, i: int) -> None:
        if not 0 <= i < self.coeffs.shape[0] or not self.fitted[i]:
            raise NotFittedError(i)

    def eval(self, i: int, x) -> np.ndarray:
        self._require(i)
        return basis_eval(self.basis, i, x) @ self.coeffs[i]

    def grad(self, i: int, x) -> np.ndarray:
        self._require(i)
        return np.einsum("...bn,b->...n", basis_grad(self.basis, i, x), self.coeffs[i])

    def hessian(self, i: int, x) -> np.ndarray:
        self._require(i)
        return np.einsum(
            "...bnm,b->...nm", basis_hessian(self.basis, i, x), self.coeffs[i]
        )


def lsmc_fit(xs, ys, spec: BasisSpec, i: int, ridge: float = 1e-10) -> np.ndarray:
    """Least-squares coefficients for targets ``ys`` observed at states ``xs``.

    Minimizes ``sum_k (y_k - Phi(x_k)^T a)^2 + ridge * ||a||^2`` through an
    orthogonal factorization (deterministic for fixed inputs).  With
    ``ridge=0`` and a rank-deficient design the minimum-norm solution is
    returned and a :class:`RankDeficientWarning` is issued.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.asarray(ys, dtype=float).reshape(-1)
    if xs.shape[0] != ys.shape[0]:
        raise ValueError("xs and ys must have the same number of rows")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    phi = basis_eval(spec, i, xs)
    if ridge > 0:
        a = np.vstack([phi, math.sqrt(ridge) * np.eye(spec.size)])
        b = np.concatenate([ys, np.zeros(spec.size)])
    else:
        a, b = phi, ys
    coeffs, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    if ridge == 0 and rank < spec.size:
        warnings.warn(
            f"design matrix at step {i} has rank {rank} < {spec.size}; "
            "returning the minimum-norm solution",
            RankDeficientWarning,
            stacklevel=2,
        )
    return coeffs


def scaling_from_batch(batch, max_total_degree: int) -> BasisSpec:
    """Basis whose per-step boxes track the sampled state distribution.

    Each box is mean +/- max(3 std, 1) per coordinate, so the bulk of the
    samples lands inside [-1, 1] and the design matrix stays conditioned even
    for nearly deterministic steps.
    """
    mean = batch.x.mean(axis=0)
    std = batch.x.std(axis=0)
    half = np.maximum(3.0 * std, 1.0)
    return BasisSpec(
        dim=batch.dim,
        max_total_degree=max_total_degree,
        scale_lo=mean - half,
        scale_hi=mean + half,
    )


def _cheb_nodes(lo: float, hi: float, count: int) -> np.ndarray:
    k = np.arange(count)
    z = np.cos((2 * k + 1) * np.pi / (2 * count))
    return 0.5 * (lo + hi) + 0.5 * (hi - lo) * z


def fit_function(spec: BasisSpec, i: int, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Coefficients reproducing ``fn`` on a tensor Chebyshev-node grid.

    Exact (to rounding) whenever ``fn`` lies in the basis span; used to embed
    known quadratics or test functions into a model.
    """
    per_axis = spec.max_total_degree + 2
    axes = [
        _cheb_nodes(spec.scale_lo[i, c], spec.scale_hi[i, c], per_axis)
        for c in range(spec.dim)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    return lsmc_fit(pts, fn(pts), spec, i, ridge=0.0)


def model_to_json(m: ValueModel) -> dict:
    """JSON-ready dump: one record per fitted step with scaling and coeffs."""
    steps = []
    for i in sorted(m.fitted_steps):
        steps.append(
            {
                "step": int(i),
                "degree": int(m.basis.max_total_degree),
                "scaling": {
                    "lo": m.basis.scale_lo[i].tolist(),
                    "hi": m.basis.scale_hi[i].tolist(),
                },
                "coeffs": m.coeffs[i].tolist(),
            }
        )
    return {"dim": m.basis.dim, "basis_size": m.basis.size, "steps": steps}


def save_model_json(m: ValueModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_json(m), fh, indent=2)
