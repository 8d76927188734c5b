"""Torch versions of the spline kernels used inside likelihood evaluation."""

from __future__ import annotations

import numpy as np
import torch

from .splines import KnotGrid, nonzero_basis

DTYPE = torch.float64


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def locate_t(grid: KnotGrid, x: torch.Tensor):
    xc = x.clamp(grid.lower, grid.upper)
    s = (xc - grid.lower) / grid.step
    span = torch.floor(s.detach()).clamp(0, grid.num_spans - 1)
    return span.long(), s - span, xc


def basis_t(grid: KnotGrid, x: torch.Tensor, degree: int | None = None):
    """(offset, values[..., degree + 1], clamped x) on torch tensors."""
    span, u, xc = locate_t(grid, x)
    k = grid.degree if degree is None else degree
    return span, torch.stack(nonzero_basis(u, k), dim=-1), xc


def restrict_t(theta: torch.Tensor) -> torch.Tensor:
    inc = torch.exp(theta[1:])
    return theta[0] + torch.cat([theta.new_zeros(1), torch.cumsum(inc, 0)])
