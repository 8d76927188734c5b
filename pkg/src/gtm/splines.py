"""Uniform B-spline bases, difference penalties and Gauss-Legendre rules.

Everything here works on plain numpy arrays. The local basis recursion
(:func:`nonzero_basis`) only uses arithmetic, so the model code reuses it on
torch tensors to get autograd for free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "KnotGrid",
    "QuadratureRule",
    "nonzero_basis",
    "locate",
    "basis_eval",
    "basis_deriv",
    "design_matrix",
    "spline_eval",
    "diff_matrix",
    "gauss_legendre",
]


@dataclass(frozen=True)
class KnotGrid:
    """Equidistant knot layout for ``num_basis`` B-splines of a given degree.

    The interval ``[lower, upper]`` is split into ``num_basis - degree``
    equal spans and padded with ``degree`` extra knots on each side, so the
    basis forms a partition of unity exactly on ``[lower, upper]``.
    """

    lower: float
    upper: float
    num_basis: int
    degree: int = 3

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ValueError("grid bounds must be finite")
        if not self.lower < self.upper:
            raise ValueError(f"lower bound {self.lower} must be below upper bound {self.upper}")
        if self.degree < 1:
            raise ValueError("degree must be at least 1")
        if self.num_basis < self.degree + 1:
            raise ValueError(
                f"num_basis={self.num_basis} too small for degree {self.degree} "
                f"(need at least {self.degree + 1})"
            )

    @property
    def num_spans(self) -> int:
        return self.num_basis - self.degree

    @property
    def step(self) -> float:
        return (self.upper - self.lower) / self.num_spans

    @cached_property
    def knots(self) -> np.ndarray:
        idx = np.arange(-self.degree, self.num_basis + 1)
        return self.lower + idx * self.step

    @cached_property
    def greville(self) -> np.ndarray:
        """Greville abscissae; using them as coefficients reproduces the identity."""
        p = np.arange(self.num_basis)
        return self.lower + (p - (self.degree - 1) / 2.0) * self.step

    def to_dict(self) -> dict:
        return {
            "lower": float(self.lower),
            "upper": float(self.upper),
            "num_basis": int(self.num_basis),
            "degree": int(self.degree),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KnotGrid":
        return cls(float(d["lower"]), float(d["upper"]), int(d["num_basis"]), int(d["degree"]))


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray
    interval: tuple[float, float]

    def integrate(self, values: np.ndarray, axis: int = -1) -> np.ndarray:
        return np.tensordot(values, self.weights, axes=([axis], [0]))


def nonzero_basis(u, degree: int) -> list:
    """Values of the ``degree + 1`` B-splines that are non-zero on a knot span.

    ``u`` is the position inside the span in units of the knot spacing
    (``0 <= u <= 1``). This is de Boor's triangular recursion specialised to
    uniform knots, where every denominator collapses to the recursion level.
    Works elementwise on numpy arrays and torch tensors alike.
    """
    vals = [u * 0 + 1]
    for j in range(1, degree + 1):
        saved = 0
        nxt = []
        for r in range(j):
            temp = vals[r] / j
            nxt.append(saved + (r + 1 - u) * temp)
            saved = (u + (j - 1 - r)) * temp
        nxt.append(saved)
        vals = nxt
    return vals


def locate(grid: KnotGrid, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamp ``x`` into the grid and return (first non-zero basis index, local coordinate)."""
    xc = np.clip(x, grid.lower, grid.upper)
    s = (xc - grid.lower) / grid.step
    span = np.clip(np.floor(s), 0, grid.num_spans - 1).astype(np.int64)
    return span, s - span


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise ValueError("basis evaluation requires finite input")


def basis_eval(grid: KnotGrid, x):
    """Non-zero basis values at ``x``.

    Returns ``(offset, values)`` where ``values[..., m]`` belongs to basis
    function ``offset + m``. Points outside the grid are clamped to the
    nearest bound.
    """
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    offset, u = locate(grid, x)
    values = np.stack(nonzero_basis(u, grid.degree), axis=-1)
    return offset, values


def basis_deriv(grid: KnotGrid, x, order: int = 1):
    """Derivatives of the non-zero basis functions at ``x`` (same layout as basis_eval)."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if order > grid.degree:
        raise ValueError("derivative order exceeds the spline degree")
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    offset, u = locate(grid, x)
    vals = nonzero_basis(u, grid.degree - order)
    # d/dx B_{i,k} = (B_{i,k-1} - B_{i+1,k-1}) / h, applied `order` times
    for _ in range(order):
        zero = u * 0
        padded = [zero] + vals + [zero]
        vals = [(padded[m] - padded[m + 1]) / grid.step for m in range(len(padded) - 1)]
    return offset, np.stack(vals, axis=-1)


def design_matrix(grid: KnotGrid, x, deriv: int = 0) -> np.ndarray:
    """Dense (n, num_basis) basis matrix, mostly for least-squares fits and tests."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if deriv == 0:
        offset, vals = basis_eval(grid, x)
    else:
        offset, vals = basis_deriv(grid, x, deriv)
    out = np.zeros((x.size, grid.num_basis))
    rows = np.arange(x.size)[:, None]
    out[rows, offset[:, None] + np.arange(grid.degree + 1)] = vals
    return out


def spline_eval(grid: KnotGrid, coeffs, x, deriv: int = 0) -> np.ndarray:
    """Evaluate ``sum_p coeffs[p] * B_p^{(deriv)}(x)`` with clamped arguments."""
    coeffs = np.asarray(coeffs, dtype=float)
    if deriv == 0:
        offset, vals = basis_eval(grid, x)
    else:
        offset, vals = basis_deriv(grid, x, deriv)
    idx = offset[..., None] + np.arange(grid.degree + 1)
    return np.sum(coeffs[idx] * vals, axis=-1)


def diff_matrix(p: int, order: int) -> np.ndarray:
    """Finite-difference operator of shape (p - order, p)."""
    if order < 1:
        raise ValueError("order must be positive")
    if p <= order:
        raise ValueError(f"need more than {order} coefficients for an order-{order} difference, got {p}")
    return np.diff(np.eye(p), n=order, axis=0)


def _legendre_nodes_newton(n: int, tol: float = 1e-14, max_iter: int = 100):
    """Nodes and weights on [-1, 1] by Newton iteration on P_n."""
    nodes = np.empty(n)
    weights = np.empty(n)
    for i in range((n + 1) // 2):
        # Tricomi's initial guess for the i-th largest root
        x = math.cos(math.pi * (i + 0.75) / (n + 0.5))
        for _ in range(max_iter):
            p0, p1 = 1.0, x
            for k in range(2, n + 1):
                p0, p1 = p1, ((2 * k - 1) * x * p1 - (k - 1) * p0) / k
            dp = n * (x * p1 - p0) / (x * x - 1.0)
            dx = p1 / dp
            x -= dx
            if abs(dx) <= tol:
                break
        p0, p1 = 1.0, x
        for k in range(2, n + 1):
            p0, p1 = p1, ((2 * k - 1) * x * p1 - (k - 1) * p0) / k
        dp = n * (x * p1 - p0) / (x * x - 1.0)
        w = 2.0 / ((1.0 - x * x) * dp * dp)
        nodes[i], nodes[n - 1 - i] = x, -x
        weights[i] = weights[n - 1 - i] = w
    if n % 2 == 1:
        nodes[n // 2] = 0.0
    return nodes[::-1].copy(), weights[::-1].copy()


def gauss_legendre(n: int, a: float = -1.0, b: float = 1.0) -> QuadratureRule:
    """n-point Gauss-Legendre rule on [a, b]; exact for polynomials up to degree 2n - 1."""
    if n < 1:
        raise ValueError("need at least one quadrature node")
    if not a < b:
        raise ValueError("interval must satisfy a < b")
    t, w = _legendre_nodes_newton(int(n))
    half = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    return QuadratureRule(nodes=mid + half * t, weights=half * w, interval=(float(a), float(b)))
