"""Kolmogorov-Arnold layer with B-spline edge activations."""

from __future__ import annotations

import math
from typing import Tuple

import torch
import torch.nn.functional as F
from torch import nn


def make_grid(grid_size: int, spline_order: int, grid_range: Tuple[float, float] = (-1.0, 1.0), dtype=torch.float32) -> torch.Tensor:
    """Uniform knots over ``grid_range`` extended by ``spline_order`` knots on each side."""
    lo, hi = grid_range
    if not hi > lo or grid_size < 1:
        raise ValueError("need grid_size >= 1 and an increasing range")
    h = (hi - lo) / grid_size
    steps = torch.arange(-spline_order, grid_size + spline_order + 1, dtype=torch.float64)
    return (steps * h + lo).to(dtype)


def _check_grid(grid: torch.Tensor, k: int) -> None:
    if k < 0:
        raise ValueError("spline order must be >= 0")
    if grid.ndim != 1 or grid.numel() < k + 2:
        raise ValueError(f"grid needs at least k+2={k + 2} knots")
    if not bool((grid[1:] > grid[:-1]).all()):
        raise ValueError("grid knots must be strictly increasing")


def _cox_de_boor(x: torch.Tensor, grid: torch.Tensor, k: int) -> torch.Tensor:
    x = x.unsqueeze(-1)
    bases = ((x >= grid[:-1]) & (x < grid[1:])).to(x.dtype)
    for p in range(1, k + 1):
        left = (x - grid[: -(p + 1)]) / (grid[p:-1] - grid[: -(p + 1)]) * bases[..., :-1]
        right = (grid[p + 1 :] - x) / (grid[p + 1 :] - grid[1:-p]) * bases[..., 1:]
        bases = left + right
    return bases


def bspline_basis(x: torch.Tensor, grid: torch.Tensor, k: int, extrapolate: bool = True) -> torch.Tensor:
    """All order-``k`` B-spline basis values at ``x``.

    ``grid`` is the extended knot vector (``G + 2k + 1`` knots); the result has a
    trailing axis of length ``G + k``. Outside the inner range ``[grid[k],
    grid[-k-1]]`` the basis is continued linearly from the boundary, so any
    spline built on it extrapolates linearly.
    """
    x = torch.as_tensor(x, dtype=grid.dtype)
    _check_grid(grid, k)
    if not extrapolate:
        return _cox_de_boor(x, grid, k)
    lo, hi = grid[k], grid[-k - 1]
    inside = (x >= lo) & (x <= hi)
    # evaluate just inside the upper boundary so the half-open indicators pick the last inner interval
    hi_in = torch.nextafter(hi, lo)
    xc = torch.where(x < lo, lo, torch.where(x >= hi, hi_in, x))
    bases = _cox_de_boor(xc, grid, k)
    if k == 0:
        return bases
    lower = _cox_de_boor(xc, grid, k - 1)
    deriv = k * (lower[..., :-1] / (grid[k:-1] - grid[: -(k + 1)]) - lower[..., 1:] / (grid[k + 1 :] - grid[1:-k]))
    delta = torch.where(inside, torch.zeros_like(x), x - xc).unsqueeze(-1)
    return bases + deriv * delta


class KANLayer(nn.Module):
    """``out_j = sum_i w_base[j,i] silu(x_i) + sum_b coeff[j,i,b] B_b(x_i)``.

    ``scale_base`` and ``scale_spline`` weight the two branches; both default to 1.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        grid_size: int = 5,
        spline_order: int = 3,
        grid_range: Tuple[float, float] = (-1.0, 1.0),
        scale_base: float = 1.0,
        scale_spline: float = 1.0,
        init_noise: float = 0.1,
    ):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.grid_size = grid_size
        self.spline_order = spline_order
        self.scale_base = scale_base
        self.scale_spline = scale_spline
        self.register_buffer("grid", make_grid(grid_size, spline_order, grid_range))
        self.base_weight = nn.Parameter(torch.empty(out_dim, in_dim))
        self.spline_coeffs = nn.Parameter(torch.empty(out_dim, in_dim, grid_size + spline_order))
        nn.init.kaiming_uniform_(self.base_weight, a=math.sqrt(5))
        nn.init.normal_(self.spline_coeffs, std=init_noise / math.sqrt(in_dim))

    def basis(self, x: torch.Tensor) -> torch.Tensor:
        return bspline_basis(x, self.grid.to(x.dtype), self.spline_order)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.shape[-1]}")
        base = F.linear(F.silu(x), self.base_weight)
        spline = torch.einsum("...ib,oib->...o", self.basis(x), self.spline_coeffs)
        return self.scale_base * base + self.scale_spline * spline
