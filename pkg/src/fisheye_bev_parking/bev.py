"""BEV grid geometry.

Rows run from the front of the grid backwards (``-x``) and columns from left to right
(``-y``), so a map looks like the scene seen from above with the vehicle pointing up.
"""

from __future__ import annotations

import torch
from torch import Tensor


def bev_cell_centers(rows: int, extent_m: float) -> Tensor:
    """Metric ``(x, y)`` of every cell centre, ``(rows, rows, 2)`` float64.

    The centre cell of an odd grid sits on the origin.
    """
    cell = extent_m / rows
    half = extent_m / 2.0
    centers = half - (torch.arange(rows, dtype=torch.float64) + 0.5) * cell
    x = centers[:, None].expand(rows, rows)
    y = centers[None, :].expand(rows, rows)
    return torch.stack([x, y], dim=-1)


def cell_index(points: Tensor, rows: int, extent_m: float) -> tuple[Tensor, Tensor, Tensor]:
    """Row, column and an inside-the-grid mask for metric points ``(..., 2)``."""
    cell = extent_m / rows
    half = extent_m / 2.0
    row = torch.floor((half - points[..., 0]) / cell).long()
    col = torch.floor((half - points[..., 1]) / cell).long()
    inside = (row >= 0) & (row < rows) & (col >= 0) & (col < rows)
    return row.clamp(0, rows - 1), col.clamp(0, rows - 1), inside


def to_normalized(points: Tensor, extent_m: float) -> Tensor:
    """Metric ``(x, y)`` to ``grid_sample`` coordinates ``(u, v)`` (``align_corners=False``)."""
    half = extent_m / 2.0
    return torch.stack([-points[..., 1] / half, -points[..., 0] / half], dim=-1)


def from_normalized(coords: Tensor, extent_m: float) -> Tensor:
    half = extent_m / 2.0
    return torch.stack([-coords[..., 1] * half, -coords[..., 0] * half], dim=-1)
