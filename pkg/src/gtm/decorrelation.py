"""Spline-conditioned unit lower-triangular coupling layers.

A layer maps ``x`` to ``Lambda(x) @ x`` where ``Lambda`` has unit diagonal and
entry ``(r, c)`` below it equal to ``lambda_rc(x_c)``, a B-spline in the
multiplied coordinate. Every second layer works on the reversed vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch

from ._tensor import as_tensor, basis_t
from .errors import ParameterError
from .splines import KnotGrid, spline_eval

DEFAULT_CONDITIONER_GRID = KnotGrid(-15.0, 15.0, 40)


@lru_cache(maxsize=None)
def pair_index(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column indices of the strictly lower triangle, row-major."""
    rows, cols = np.tril_indices(dim, k=-1)
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


def flip(v):
    """Reverse the last axis (multiplication by the exchange matrix)."""
    if isinstance(v, torch.Tensor):
        return v.flip(-1)
    return np.asarray(v)[..., ::-1].copy()


@dataclass(frozen=True)
class ConditionerSpline:
    grid: KnotGrid
    coeffs: np.ndarray

    def __call__(self, x):
        # spline_eval clamps, which gives constant continuation past the grid
        return spline_eval(self.grid, self.coeffs, x)


@dataclass
class DecorrelationLayer:
    """One coupling layer; ``coeffs[p]`` belongs to pair ``pair_index(dim)[p]``."""

    dim: int
    grid: KnotGrid
    coeffs: np.ndarray
    flipped: bool = False

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        n_pairs = self.dim * (self.dim - 1) // 2
        if self.coeffs.shape != (n_pairs, self.grid.num_basis):
            raise ParameterError(
                f"expected coefficients of shape {(n_pairs, self.grid.num_basis)}, got {self.coeffs.shape}"
            )
        if not np.all(np.isfinite(self.coeffs)):
            raise ParameterError("conditioner coefficients must be finite")

    @classmethod
    def zeros(cls, dim: int, grid: KnotGrid = DEFAULT_CONDITIONER_GRID, flipped: bool = False):
        return cls(dim, grid, np.zeros((dim * (dim - 1) // 2, grid.num_basis)), flipped)

    @classmethod
    def constant(cls, dim: int, values, grid: KnotGrid = DEFAULT_CONDITIONER_GRID, flipped: bool = False):
        """Layer whose every lambda_rc is the constant ``values[p]``."""
        values = np.broadcast_to(np.asarray(values, dtype=float), (dim * (dim - 1) // 2,))
        return cls(dim, grid, np.repeat(values[:, None], grid.num_basis, axis=1), flipped)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        rows, cols = pair_index(self.dim)
        return list(zip(rows.tolist(), cols.tolist()))

    def spline(self, r: int, c: int) -> ConditionerSpline:
        if not 0 <= c < r < self.dim:
            raise IndexError(f"no conditioner for pair ({r}, {c})")
        p = r * (r - 1) // 2 + c
        return ConditionerSpline(self.grid, self.coeffs[p])

    def forward(self, z):
        return layer_forward(self, z)

    def inverse(self, z):
        return layer_inverse(self, z)

    def matrix(self, z) -> np.ndarray:
        with torch.no_grad():
            return layer_matrix_t(self.grid, as_tensor(self.coeffs), self.flipped, as_tensor(z)).numpy()


# --------------------------------------------------------------------------
# torch kernels


def lambdas_t(grid: KnotGrid, coeffs: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """lambda_rc(x_c) for every pair; ``x`` is (..., J), result (..., n_pairs)."""
    dim = x.shape[-1]
    rows, cols = pair_index(dim)
    k = grid.degree
    span, vals, _ = basis_t(grid, x[..., : dim - 1])
    cols_t = torch.tensor(cols)
    span = span[..., cols_t]
    vals = vals[..., cols_t, :]
    p = grid.num_basis
    flat = torch.arange(len(cols)).unsqueeze(-1) * p + span.unsqueeze(-1) + torch.arange(k + 1)
    c = coeffs.reshape(-1)[flat]
    return (c * vals).sum(-1)


def _plain_forward_t(grid, coeffs, x):
    rows, cols = pair_index(x.shape[-1])
    lam = lambdas_t(grid, coeffs, x)
    return x.index_add(x.dim() - 1, torch.tensor(rows), lam * x[..., torch.tensor(cols)]), lam


def layer_forward_t(grid: KnotGrid, coeffs: torch.Tensor, flipped: bool, x: torch.Tensor) -> torch.Tensor:
    if flipped:
        return _plain_forward_t(grid, coeffs, x.flip(-1))[0].flip(-1)
    return _plain_forward_t(grid, coeffs, x)[0]


def _assemble(lam: torch.Tensor, dim: int) -> torch.Tensor:
    rows, cols = pair_index(dim)
    flat_idx = torch.from_numpy(rows * dim + cols)
    eye = torch.eye(dim, dtype=lam.dtype).reshape(-1)
    m = eye.expand(*lam.shape[:-1], dim * dim).index_add(lam.dim() - 1, flat_idx, lam)
    return m.reshape(*lam.shape[:-1], dim, dim)


def layer_forward_matrix_t(grid, coeffs, flipped, x):
    """Layer output together with the matrix actually applied to ``x``."""
    dim = x.shape[-1]
    xin = x.flip(-1) if flipped else x
    out, lam = _plain_forward_t(grid, coeffs, xin)
    m = _assemble(lam, dim)
    if flipped:
        return out.flip(-1), m.flip(-1).flip(-2)
    return out, m


def layer_matrix_t(grid, coeffs, flipped, x):
    return layer_forward_matrix_t(grid, coeffs, flipped, x)[1]


def _plain_inverse_t(grid, coeffs, z):
    dim = z.shape[-1]
    k = grid.degree
    p = grid.num_basis
    out = [None] * dim
    spans, vals = [None] * dim, [None] * dim
    for j in range(dim):
        acc = z[..., j]
        for i in range(j):
            idx = j * (j - 1) // 2 + i
            c = coeffs[idx][spans[i].unsqueeze(-1) + torch.arange(k + 1)]
            acc = acc - (c * vals[i]).sum(-1) * out[i]
        out[j] = acc
        if j < dim - 1:
            spans[j], vals[j], _ = basis_t(grid, acc)
    return torch.stack(out, dim=-1)


def layer_inverse_t(grid, coeffs, flipped, z):
    if flipped:
        return _plain_inverse_t(grid, coeffs, z.flip(-1)).flip(-1)
    return _plain_inverse_t(grid, coeffs, z)


def decorrelate_t(layers: Sequence[DecorrelationLayer], x: torch.Tensor, coeffs=None, want_lambda=False):
    """Run the stack forward; optionally also return the joint matrix Lambda(x)."""
    if coeffs is None:
        coeffs = [as_tensor(l.coeffs) for l in layers]
    joint = None
    for layer, c in zip(layers, coeffs):
        if want_lambda:
            x, m = layer_forward_matrix_t(layer.grid, c, layer.flipped, x)
            joint = m if joint is None else m @ joint
        else:
            x = layer_forward_t(layer.grid, c, layer.flipped, x)
    if want_lambda and joint is None:
        dim = x.shape[-1]
        joint = torch.eye(dim, dtype=x.dtype).expand(*x.shape[:-1], dim, dim)
    return x, joint


# --------------------------------------------------------------------------
# numpy-facing operations


def _np(x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("input must be finite")
    return x


def layer_forward(layer: DecorrelationLayer, z) -> np.ndarray:
    with torch.no_grad():
        return layer_forward_t(layer.grid, as_tensor(layer.coeffs), layer.flipped, as_tensor(_np(z))).numpy()


def layer_inverse(layer: DecorrelationLayer, z) -> np.ndarray:
    """Undo one layer by solving the triangular system from the top row down."""
    with torch.no_grad():
        return layer_inverse_t(layer.grid, as_tensor(layer.coeffs), layer.flipped, as_tensor(_np(z))).numpy()


def stack_forward(layers: Sequence[DecorrelationLayer], z) -> np.ndarray:
    with torch.no_grad():
        return decorrelate_t(layers, as_tensor(_np(z)))[0].numpy()


def stack_inverse(layers: Sequence[DecorrelationLayer], z) -> np.ndarray:
    z = as_tensor(_np(z))
    with torch.no_grad():
        for layer in reversed(layers):
            z = layer_inverse_t(layer.grid, as_tensor(layer.coeffs), layer.flipped, z)
    return z.numpy()


def joint_lambda(layers: Sequence[DecorrelationLayer], z) -> np.ndarray:
    """Product of the layer matrices, each evaluated at the input it actually sees."""
    if len(layers) == 0:
        raise ParameterError("joint_lambda needs at least one layer")
    with torch.no_grad():
        return decorrelate_t(layers, as_tensor(_np(z)), want_lambda=True)[1].numpy()


@dataclass(frozen=True)
class LocalPrecision:
    matrix: np.ndarray
    at_point: np.ndarray


def local_precision(layers: Sequence[DecorrelationLayer], z) -> LocalPrecision:
    """P(z) = Lambda(z)^T Lambda(z); works on a single point or a batch of rows."""
    z = _np(z)
    if len(layers) == 0:
        dim = z.shape[-1]
        m = np.broadcast_to(np.eye(dim), z.shape[:-1] + (dim, dim)).copy()
        return LocalPrecision(m, z)
    lam = joint_lambda(layers, z)
    return LocalPrecision(np.swapaxes(lam, -1, -2) @ lam, z)


def local_pseudo_correlation(P) -> np.ndarray:
    """Negated off-diagonal of P scaled by sqrt(p_rr * p_cc); unit diagonal."""
    m = P.matrix if isinstance(P, LocalPrecision) else np.asarray(P, dtype=float)
    d = np.diagonal(m, axis1=-2, axis2=-1)
    if np.any(d <= 0):
        raise FloatingPointError("pseudo-precision matrix has a non-positive diagonal entry")
    s = np.sqrt(d)
    rho = -m / (s[..., :, None] * s[..., None, :])
    dim = m.shape[-1]
    rho[..., np.arange(dim), np.arange(dim)] = 1.0
    return np.clip(rho, -1.0, 1.0)
