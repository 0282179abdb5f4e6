"""Convex polygon geometry in torch: hull, clipping, area, IoU and GIoU.

Polygons are ``(..., N, 2)`` tensors in metres. Every routine first replaces its operands by
their convex hull, so predicted quads that fold over during training still have a defined
overlap. Hulls and clipped polygons use a fixed vertex capacity: the first ``count``
vertices are valid and the remaining slots repeat vertex 0, which keeps the shoelace sum
exact without masking. All vertex coordinates stay differentiable; only the combinatorial
choices (which points are hull vertices, which side of a clip line) are made on detached
values.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import torch
from torch import Tensor

DEGENERATE_AREA = 1e-9

# reorders corners after a mirror so corners 0-1 stay the first edge and winding is restored
FLIP_ORDER = (1, 0, 3, 2)


def _cross(a: Tensor, b: Tensor) -> Tensor:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _tolerance(points: Tensor) -> Tensor:
    scale = points.abs().amax(dim=(-1, -2)) + 1.0
    return torch.finfo(points.dtype).eps * 64.0 * scale * scale


def signed_area(poly: Tensor) -> Tensor:
    """Shoelace area; positive for counter-clockwise vertex order."""
    nxt = torch.roll(poly, shifts=-1, dims=-2)
    return 0.5 * _cross(poly, nxt).sum(dim=-1)


def area(poly: Tensor) -> Tensor:
    """Area of the convex hull of ``poly``."""
    hull, _ = convex_hull(poly)
    return signed_area(hull)


def _fill_tail(poly: Tensor, count: Tensor) -> Tensor:
    slots = torch.arange(poly.shape[-2], device=poly.device)
    keep = slots < count[..., None]
    return torch.where(keep[..., None], poly, poly[..., :1, :])


def convex_hull(points: Tensor) -> tuple[Tensor, Tensor]:
    """Counter-clockwise hull vertices ``(..., N, 2)`` and their count.

    A directed pair ``i -> j`` is a hull edge when every other point lies strictly to its
    left or on the segment itself; duplicates are represented by their lowest index.
    """
    n = points.shape[-2]
    pd = points.detach()
    tol = _tolerance(pd)[..., None, None]

    d = pd[..., None, :, :] - pd[..., :, None, :]
    cross = _cross(d[..., :, :, None, :], d[..., :, None, :, :])
    dot = (d[..., :, :, None, :] * d[..., :, None, :, :]).sum(dim=-1)
    len2 = (d * d).sum(dim=-1)

    tol3 = tol[..., None]
    on_segment = (cross.abs() <= tol3) & (dot >= -tol3) & (dot <= len2[..., None] + tol3)
    supporting = ((cross > tol3) | on_segment).all(dim=-1)

    duplicate = len2 <= tol
    earlier = torch.ones(n, n, dtype=torch.bool, device=points.device).tril(diagonal=-1)
    representative = ~(duplicate & earlier).any(dim=-1)
    edge = supporting & ~duplicate & representative[..., :, None] & representative[..., None, :]

    has_out = edge.any(dim=-1)
    successor = edge.to(torch.int8).argmax(dim=-1)
    start = has_out.to(torch.int8).argmax(dim=-1)

    current = start
    active = has_out.gather(-1, start[..., None]).squeeze(-1)
    count = torch.zeros_like(start)
    order: list[Tensor] = []
    for _ in range(n):
        order.append(torch.where(active, current, start))
        count = count + active.to(count.dtype)
        current = successor.gather(-1, current[..., None]).squeeze(-1)
        active = active & (current != start)

    index = torch.stack(order, dim=-1)
    hull = points.gather(-2, index[..., None].expand(*index.shape, 2))
    return hull, count


def _clip_half_plane(
    poly: Tensor,
    count: Tensor,
    start: Tensor,
    end: Tensor,
) -> tuple[Tensor, Tensor]:
    """One Sutherland–Hodgman pass keeping the left side of ``start -> end``."""
    capacity = poly.shape[-2]
    slots = torch.arange(capacity, device=poly.device)
    valid = slots < count[..., None]
    nxt = torch.roll(poly, shifts=-1, dims=-2)

    direction = (end - start)[..., None, :]
    side = _cross(direction, poly - start[..., None, :])
    side_next = torch.roll(side, shifts=-1, dims=-1)
    inside = side.detach() >= 0.0
    inside_next = torch.roll(inside, shifts=-1, dims=-1)

    keep_vertex = valid & inside
    crossing = valid & (inside != inside_next)
    denom = torch.where(crossing, side - side_next, torch.ones_like(side))
    t = torch.where(crossing, side / denom, torch.zeros_like(side))
    point = poly + t[..., None] * (nxt - poly)

    candidates = torch.stack([poly, point], dim=-2).reshape(*poly.shape[:-2], 2 * capacity, 2)
    mask = torch.stack([keep_vertex, crossing], dim=-1).reshape(*poly.shape[:-2], 2 * capacity)
    order = torch.sort((~mask).to(torch.int8), dim=-1, stable=True).indices[..., :capacity]
    clipped = candidates.gather(-2, order[..., None].expand(*order.shape, 2))
    new_count = mask.sum(dim=-1).clamp(max=capacity)
    return _fill_tail(clipped, new_count), new_count


def intersect(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Intersection of the hulls of ``a`` and ``b``: clipped vertices and their count.

    ``a`` is clipped against each edge of ``b``. An empty intersection has count 0.
    """
    a, b = torch.broadcast_tensors(a, b)
    hull_a, count_a = convex_hull(a)
    hull_b, count_b = convex_hull(b)
    capacity = hull_a.shape[-2] + hull_b.shape[-2] + 4
    pad = hull_a[..., :1, :].expand(*hull_a.shape[:-2], capacity - hull_a.shape[-2], 2)
    poly = torch.cat([hull_a, pad], dim=-2)
    count = count_a
    m = hull_b.shape[-2]
    for k in range(m):
        poly, count = _clip_half_plane(poly, count, hull_b[..., k, :], hull_b[..., (k + 1) % m, :])
    # a degenerate clip polygon has no edges to clip against
    proper = (count_a >= 3) & (count_b >= 3)
    count = torch.where(proper, count, torch.zeros_like(count))
    return _fill_tail(poly, count), count


def intersection_area(a: Tensor, b: Tensor) -> Tensor:
    poly, count = intersect(a, b)
    return torch.where(count >= 3, signed_area(poly), torch.zeros_like(poly[..., 0, 0]))


def _safe_ratio(num: Tensor, den: Tensor) -> Tensor:
    positive = den > DEGENERATE_AREA * 1e-3
    return torch.where(positive, num / torch.where(positive, den, torch.ones_like(den)), 0.0 * num)


def iou(a: Tensor, b: Tensor) -> Tensor:
    a, b = torch.broadcast_tensors(a, b)
    inter = intersection_area(a, b)
    union = area(a) + area(b) - inter
    return _safe_ratio(inter, union)


def giou(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Generalized IoU of the hulls of ``a`` and ``b`` and a both-degenerate flag.

    ``giou = iou - (hull(a ∪ b) - union) / hull(a ∪ b)``; pairs where both operands are
    degenerate are defined as 0 and flagged.
    """
    a, b = torch.broadcast_tensors(a, b)
    area_a = area(a)
    area_b = area(b)
    inter = intersection_area(a, b)
    union = area_a + area_b - inter
    enclosing = area(torch.cat([a, b], dim=-2))
    value = _safe_ratio(inter, union) - _safe_ratio(enclosing - union, enclosing)
    degenerate = (area_a.detach() < DEGENERATE_AREA) & (area_b.detach() < DEGENERATE_AREA)
    return torch.where(degenerate, torch.zeros_like(value), value), degenerate


def point_in_convex(points: Tensor, poly: Tensor, count: Tensor | None = None) -> Tensor:
    """Whether ``points (..., P, 2)`` lie inside or on a CCW convex polygon ``(..., N, 2)``."""
    if count is None:
        poly, count = convex_hull(poly)
    nxt = torch.roll(poly, shifts=-1, dims=-2)
    edge = (nxt - poly)[..., None, :, :]
    rel = points[..., :, None, :] - poly[..., None, :, :]
    side = _cross(edge, rel)
    tol = _tolerance(poly)[..., None, None]
    return (side >= -tol).all(dim=-1)


def transform(
    quad: Tensor,
    yaw: float,
    flip: bool = False,
    translation: Sequence[float] = (0.0, 0.0),
) -> Tensor:
    """Mirror (``y -> -y``) then rotate by ``yaw`` about the origin, then translate.

    A mirror reverses winding, so the corners are reordered with :data:`FLIP_ORDER`.
    """
    pts = quad
    if flip:
        pts = pts * torch.tensor([1.0, -1.0], dtype=pts.dtype, device=pts.device)
        pts = pts[..., list(FLIP_ORDER), :]
    c, s = math.cos(yaw), math.sin(yaw)
    rot = torch.tensor([[c, -s], [s, c]], dtype=pts.dtype, device=pts.device)
    shift = torch.tensor(list(translation), dtype=pts.dtype, device=pts.device)
    return pts @ rot.T + shift


def order_clockwise(points: Tensor) -> Tensor:
    """Sort unordered points clockwise, starting at the smallest polar angle about the centroid."""
    centroid = points.mean(dim=-2, keepdim=True)
    rel = points - centroid
    angle = torch.remainder(torch.atan2(rel[..., 1], rel[..., 0]), 2.0 * math.pi)
    ccw = torch.argsort(angle, dim=-1)
    clockwise = torch.cat([ccw[..., :1], ccw[..., 1:].flip(-1)], dim=-1)
    return points.gather(-2, clockwise[..., None].expand(*clockwise.shape, 2))


def canonical_clockwise(corners: Tensor) -> Tensor:
    """Keep corners 0-1 as the first edge and force clockwise winding."""
    ccw = signed_area(corners) > 0.0
    flipped = corners[..., list(FLIP_ORDER), :]
    return torch.where(ccw[..., None, None], flipped, corners)


@dataclass(frozen=True, slots=True, eq=False)
class ConvexQuad:
    """Four vertices in counter-clockwise order."""

    vertices: Tensor

    @classmethod
    def from_points(cls, points: Tensor | Sequence[Sequence[float]]) -> ConvexQuad:
        pts = torch.as_tensor(points, dtype=torch.float64)
        if signed_area(pts) < 0.0:
            pts = pts.flip(-2)
        return cls(vertices=pts)

    @property
    def area(self) -> float:
        return float(signed_area(self.vertices))

    @property
    def is_degenerate(self) -> bool:
        return self.area < DEGENERATE_AREA
