"""Monotone spline marginal transformations (the transformation layer)."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import sparse
from scipy.linalg import LinAlgError, solveh_banded

from ._tensor import as_tensor, basis_t, restrict_t
from .errors import DataError, FitError, ParameterError
from .optim import FitReport, lbfgs
from .splines import KnotGrid, basis_eval, diff_matrix, spline_eval

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

DEFAULT_MARGINAL_GRID = KnotGrid(-15.0, 15.0, 15)


def restrict(theta) -> np.ndarray:
    """Map unconstrained parameters to strictly increasing spline coefficients.

    ``upsilon[0] = theta[0]`` and every later entry adds ``exp(theta[p])``.
    """
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ParameterError("theta contains non-finite entries")
    with np.errstate(over="ignore"):
        inc = np.exp(theta[1:])
    bad = np.flatnonzero(~np.isfinite(inc))
    if bad.size:
        raise ParameterError(f"exp(theta[{bad[0] + 1}]) overflows (theta={theta[bad[0] + 1]:.6g})")
    return theta[0] + np.concatenate([[0.0], np.cumsum(inc)])


def unrestrict(upsilon) -> np.ndarray:
    """Inverse of :func:`restrict` for strictly increasing input."""
    upsilon = np.asarray(upsilon, dtype=float)
    d = np.diff(upsilon)
    if np.any(d <= 0):
        raise ParameterError("coefficients must be strictly increasing")
    return np.concatenate([[upsilon[0]], np.log(d)])


def identity_theta(grid: KnotGrid) -> np.ndarray:
    return unrestrict(grid.greville)


@dataclass(frozen=True)
class MonotoneParams:
    theta: np.ndarray

    @property
    def upsilon(self) -> np.ndarray:
        return restrict(self.theta)


def marginal_forward_t(grid: KnotGrid, theta: torch.Tensor, x: torch.Tensor):
    """Spline value and log-derivative, linearly continued outside the grid."""
    ups = restrict_t(theta)
    k = grid.degree
    span, vals, xc = basis_t(grid, x)
    idx = span.unsqueeze(-1) + torch.arange(k + 1)
    c = ups[idx]
    value = (vals * c).sum(-1)
    _, lower, _ = basis_t(grid, x, degree=k - 1)
    slope = (lower * (c[..., 1:] - c[..., :-1])).sum(-1) / grid.step
    return value + slope * (x - xc), torch.log(slope)


@dataclass(frozen=True)
class MarginalTransform:
    grid: KnotGrid
    theta: np.ndarray

    @classmethod
    def identity(cls, grid: KnotGrid = DEFAULT_MARGINAL_GRID) -> "MarginalTransform":
        return cls(grid, identity_theta(grid))

    @property
    def params(self) -> MonotoneParams:
        return MonotoneParams(self.theta)

    @property
    def upsilon(self) -> np.ndarray:
        return restrict(self.theta)

    def forward(self, y):
        """Return ``(z_tilde, log_derivative)`` for scalar or array ``y``."""
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise DataError("marginal transform needs finite input")
        with torch.no_grad():
            z, ld = marginal_forward_t(self.grid, as_tensor(self.theta), as_tensor(y))
        return z.numpy(), ld.numpy()

    __call__ = forward


def forward_marginal(t: MarginalTransform, y):
    return t.forward(y)


@dataclass
class TransformationLayer:
    """Per-dimension transforms applied after column standardisation."""

    transforms: list
    mean: np.ndarray
    sd: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.sd = np.asarray(self.sd, dtype=float)
        if len(self.transforms) < 1:
            raise ParameterError("transformation layer needs at least one dimension")
        if self.mean.shape != (self.dim,) or self.sd.shape != (self.dim,):
            raise ParameterError("standardisation arrays must have one entry per dimension")
        if np.any(self.sd <= 0):
            raise ParameterError("standard deviations must be positive")

    @property
    def dim(self) -> int:
        return len(self.transforms)

    @classmethod
    def identity(cls, dim: int, grid: KnotGrid = DEFAULT_MARGINAL_GRID) -> "TransformationLayer":
        return cls([MarginalTransform.identity(grid) for _ in range(dim)], np.zeros(dim), np.ones(dim))

    def forward_t(self, y: torch.Tensor, thetas: Sequence[torch.Tensor] | None = None):
        """Latent ``z_tilde`` and per-row log-Jacobian (standardisation included)."""
        if thetas is None:
            thetas = [as_tensor(t.theta) for t in self.transforms]
        x = (y - as_tensor(self.mean)) / as_tensor(self.sd)
        cols, logd = [], 0.0
        for j, t in enumerate(self.transforms):
            z, ld = marginal_forward_t(t.grid, thetas[j], x[..., j])
            cols.append(z)
            logd = logd + ld
        return torch.stack(cols, dim=-1), logd - float(np.sum(np.log(self.sd)))


# --------------------------------------------------------------------------
# pretraining


def _ridge_penalty_t(theta: torch.Tensor, tau4: float, d2: torch.Tensor | None):
    if tau4 == 0.0 or d2 is None:
        return theta.new_zeros(())
    return tau4 * torch.sum((d2 @ theta[1:]) ** 2)


def marginal_penalty_matrix(grid: KnotGrid) -> np.ndarray | None:
    # second differences of the log-increments; the level theta[0] is left free
    p = grid.num_basis - 1
    return diff_matrix(p, 2) if p > 2 else None


def pretrain_marginal(
    column,
    grid: KnotGrid = DEFAULT_MARGINAL_GRID,
    tau4: float = 0.0,
    *,
    max_iters: int = 500,
    grad_tol: float = 1e-8,
    check: bool = True,
) -> tuple[MarginalTransform, FitReport]:
    """Fit one marginal transform so that the column maps to a standard normal.

    Maximises ``sum log phi(h(y)) + log h'(y) - tau4 * ||D2 theta||^2`` by
    L-BFGS starting from the identity map. The column is used as given, so
    callers normally standardise it first.
    """
    y = np.asarray(column, dtype=float).ravel()
    if y.size < 20:
        raise DataError(f"pretraining needs at least 20 observations, got {y.size}")
    if not np.all(np.isfinite(y)):
        raise DataError("column contains non-finite values")
    if np.std(y) == 0:
        raise DataError("column is constant")
    t0 = time.perf_counter()
    yt = as_tensor(y)
    d2 = marginal_penalty_matrix(grid)
    d2t = as_tensor(d2) if d2 is not None else None

    def fg(v):
        th = torch.tensor(v, dtype=torch.float64, requires_grad=True)
        z, ld = marginal_forward_t(grid, th, yt)
        nll = torch.sum(0.5 * z * z + LOG_SQRT_2PI - ld) + _ridge_penalty_t(th, tau4, d2t)
        nll.backward()
        return nll.item(), th.grad.numpy().copy()

    res = lbfgs(fg, identity_theta(grid), max_iters=max_iters, grad_tol=grad_tol * y.size)
    transform = MarginalTransform(grid, res.x)
    report = FitReport(
        objective_trace=res.trace,
        stop_reason=res.stop_reason,
        wall_time=time.perf_counter() - t0,
        grad_norm=res.grad_norm,
        n_iter=res.n_iter,
    )
    if check:
        z, _ = transform.forward(y)
        m, s = float(np.mean(z)), float(np.std(z))
        if not (np.all(np.isfinite(z)) and abs(m) <= 0.2 and abs(s - 1.0) <= 0.3):
            raise FitError(
                f"pretrained transform fails the normality sanity check (mean={m:.3g}, sd={s:.3g})",
                trace=res.trace,
            )
    return transform, report


def select_num_basis(
    column,
    score: Callable[[np.ndarray], float],
    *,
    threshold: float = 0.01,
    start: int = 5,
    step: int = 5,
    cap: int = 50,
    bounds: tuple[float, float] = (-15.0, 15.0),
    tau4: float = 0.0,
) -> int:
    """Grow the marginal basis until ``score(h(column)) >= threshold``.

    ``score`` is any scalar normality score where larger is more normal (for
    instance a Shapiro-Wilk p-value). Returns ``cap`` if never reached.
    """
    p = max(start, 4)
    while p < cap:
        t, _ = pretrain_marginal(column, KnotGrid(bounds[0], bounds[1], p), tau4, check=False)
        z, _ = t.forward(column)
        if score(z) >= threshold:
            return p
        p += step
    return cap


# --------------------------------------------------------------------------
# numeric inverse


@dataclass(frozen=True)
class InverseTransform:
    """Least-squares spline approximating the inverse of a marginal transform.

    Outside the fitted output range the inverse continues linearly with the
    boundary slope of the fit.
    """

    grid: KnotGrid
    coeffs: np.ndarray
    grid_size: int
    input_range: tuple[float, float]
    meta: dict = field(default_factory=dict)

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        lo, hi = self.grid.lower, self.grid.upper
        zc = np.clip(z, lo, hi)
        val = spline_eval(self.grid, self.coeffs, zc)
        slope = spline_eval(self.grid, self.coeffs, zc, deriv=1)
        return val + slope * (z - zc)


def _banded_normal_equations(grid: KnotGrid, x: np.ndarray, y: np.ndarray):
    offset, vals = basis_eval(grid, x)
    k = grid.degree
    n, p = x.size, grid.num_basis
    rows = np.repeat(np.arange(n), k + 1)
    cols = (offset[:, None] + np.arange(k + 1)).ravel()
    B = sparse.csr_matrix((vals.ravel(), (rows, cols)), shape=(n, p))
    BtB = (B.T @ B).todia()
    ab = np.zeros((k + 1, p))
    # upper-form storage for solveh_banded
    for d in range(k + 1):
        diag = BtB.diagonal(d)
        ab[k - d, d:] = diag
    return ab, B.T @ y


def invert_fit(
    t: MarginalTransform,
    grid_size: int = 10_000,
    y_min: float | None = None,
    y_max: float | None = None,
    num_basis: int | None = None,
) -> InverseTransform:
    """Approximate ``t``'s inverse by ordinary least squares on swapped pairs.

    Evaluates ``t`` on ``grid_size`` evenly spaced inputs in ``[y_min, y_max]``,
    treats the outputs as regressors and the inputs as responses, and fits an
    unpenalised B-spline with many basis functions.
    """
    if grid_size < 200:
        raise ParameterError("grid_size must be at least 200")
    y_min = t.grid.lower if y_min is None else float(y_min)
    y_max = t.grid.upper if y_max is None else float(y_max)
    if not y_min < y_max:
        raise ParameterError("y_min must be below y_max")
    ys = np.linspace(y_min, y_max, grid_size)
    zs, _ = t.forward(ys)
    if num_basis is None:
        num_basis = max(8, min(grid_size // 10, 1000))
    grid = KnotGrid(float(zs[0]), float(zs[-1]), int(num_basis))
    ab, rhs = _banded_normal_equations(grid, zs, ys)
    meta = {"ridge": 0.0}
    try:
        coeffs = solveh_banded(ab, rhs)
    except LinAlgError:
        coeffs = None
    if coeffs is None or not np.all(np.isfinite(coeffs)):
        ab = ab.copy()
        ab[-1] += 1e-10
        coeffs = solveh_banded(ab, rhs)
        meta["ridge"] = 1e-10
    fitted = spline_eval(grid, coeffs, zs)
    meta["max_abs_residual"] = float(np.max(np.abs(fitted - ys)))
    return InverseTransform(grid, coeffs, int(grid_size), (y_min, y_max), meta)
