"""Task heads on the shared BEV map: segmentation decoder and polygon grid detector."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import torch
from einops import rearrange
from torch import Tensor, nn

from . import polygon
from .bev import bev_cell_centers, cell_index
from .config import BevGridSpec
from .layers import ResidualBlock, activation, norm2d
from .models import CATEGORIES, PolygonDetection, PolygonLabel

SEG_CHANNELS = 4
DET_CHANNELS = 15

OFFSETS = slice(0, 8)
OBJECTNESS = 8
CLASSES = slice(9, 11)
VISIBILITY = slice(11, 15)

# keeps atanh finite for corners on the offset bound
_OFFSET_LIMIT = 1.0 - 1e-7


class SegmentationHead(nn.Module):
    """Upsample ×2, conv, norm, activation per stage, then a 1×1 conv.

    Output channels: parking and vehicle masks, then their centre heatmaps (logits).
    """

    def __init__(self, dim: int, channels: Sequence[int], act: str = "relu") -> None:
        super().__init__()
        stages: list[nn.Module] = []
        c = dim
        for out in channels:
            stages.append(
                nn.Sequential(
                    nn.Upsample(scale_factor=2.0, mode="bilinear", align_corners=False),
                    nn.Conv2d(c, out, 3, padding=1, bias=False),
                    norm2d(out),
                    activation(act),
                )
            )
            c = out
        self.stages = nn.Sequential(*stages)
        self.out = nn.Conv2d(c, SEG_CHANNELS, 1)

    def zero_init(self) -> None:
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, bev: Tensor) -> Tensor:
        return self.out(self.stages(bev))


class DetectionHead(nn.Module):
    """Residual blocks, then a 1×1 conv to 15 channels per cell.

    Channel layout: 8 corner offsets (x, y per corner), objectness, 2 class logits,
    4 corner-visibility logits.
    """

    def __init__(self, dim: int, blocks: int = 3, act: str = "relu") -> None:
        super().__init__()
        self.blocks = nn.Sequential(*[ResidualBlock(dim, act) for _ in range(blocks)])
        self.out = nn.Conv2d(dim, DET_CHANNELS, 1)

    def zero_init(self) -> None:
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, bev: Tensor) -> Tensor:
        return self.out(self.blocks(bev))


@dataclass(frozen=True, slots=True)
class DecodedGrid:
    """Dense decode of one sample, one candidate per cell in row-major order."""

    corners: Tensor
    objectness: Tensor
    class_probs: Tensor
    visibility: Tensor

    @property
    def confidence(self) -> Tensor:
        return self.objectness * self.class_probs.max(dim=-1).values

    @property
    def category(self) -> Tensor:
        return self.class_probs.argmax(dim=-1)


def decode_grid(raw: Tensor, grid: BevGridSpec, max_offset_m: float) -> DecodedGrid:
    """Decode a ``(15, R, R)`` head output. Differentiable; corners are not clamped."""
    centers = bev_cell_centers(grid.rows, grid.extent_m).to(raw)
    centers = rearrange(centers, "h w two -> (h w) 1 two")
    offsets = rearrange(raw[OFFSETS], "(k two) h w -> (h w) k two", two=2)
    corners = centers + max_offset_m * torch.tanh(offsets)
    flat = rearrange(raw, "c h w -> (h w) c")
    return DecodedGrid(
        corners=corners,
        objectness=torch.sigmoid(flat[:, OBJECTNESS]),
        class_probs=flat[:, CLASSES].softmax(dim=-1),
        visibility=torch.sigmoid(flat[:, VISIBILITY]),
    )


def nms(
    corners: Tensor,
    scores: Tensor,
    categories: Tensor,
    ids: Sequence[int],
    giou_threshold: float,
) -> list[int]:
    """Greedy per-class suppression by polygon GIoU; returns kept positions.

    Candidates are visited by descending score, ties by ascending id, so the result does
    not depend on the order of the inputs.
    """
    order = sorted(range(len(ids)), key=lambda i: (-float(scores[i]), ids[i]))
    suppressed = torch.zeros(len(ids), dtype=torch.bool)
    kept: list[int] = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        kept.append(i)
        rest = [j for j in order[pos + 1 :] if not suppressed[j] and categories[j] == categories[i]]
        if not rest:
            continue
        g, _ = polygon.giou(corners[i][None], corners[rest])
        for j, value in zip(rest, g.tolist(), strict=True):
            if value > giou_threshold:
                suppressed[j] = True
    return kept


def decode_detections(
    raw: Tensor,
    grid: BevGridSpec,
    max_offset_m: float,
    conf_threshold: float = 0.1,
    nms_giou_threshold: float = 0.3,
) -> list[PolygonDetection]:
    """Thresholded, suppressed detections of one sample, by descending confidence."""
    with torch.no_grad():
        dense = decode_grid(raw.detach().to(torch.float64), grid, max_offset_m)
        confidence = dense.confidence
        candidates = torch.nonzero(confidence >= conf_threshold).flatten().tolist()
        if not candidates:
            return []
        half = grid.half_extent
        clamped = dense.corners[candidates].clamp(-half, half)
        # a counter-clockwise quad is rewound; its visibility flags follow the corners
        rewound = polygon.signed_area(clamped) > 0.0
        corners = polygon.canonical_clockwise(clamped)
        kept = nms(
            corners,
            confidence[candidates],
            dense.category[candidates],
            candidates,
            nms_giou_threshold,
        )
        out: list[PolygonDetection] = []
        for pos in kept:
            cell = candidates[pos]
            visibility = dense.visibility[cell]
            if rewound[pos]:
                visibility = visibility[list(polygon.FLIP_ORDER)]
            out.append(
                PolygonDetection(
                    category=CATEGORIES[int(dense.category[cell])],
                    confidence=min(1.0, max(0.0, float(confidence[cell]))),
                    corners=[(float(x), float(y)) for x, y in corners[pos].tolist()],
                    visibility=[float(v) for v in visibility.tolist()],
                    detection_id=cell,
                )
            )
    return out


@dataclass(frozen=True, slots=True)
class DetectionTargets:
    """Per-cell targets, flattened row-major: ``responsible (R*R,)``, ``corners (R*R, 4, 2)``..."""

    responsible: Tensor
    category: Tensor
    corners: Tensor
    visibility: Tensor

    @property
    def is_parking(self) -> Tensor:
        return self.responsible & (self.category == CATEGORIES.index("parking"))


def encode_targets(
    labels: Sequence[PolygonLabel],
    grid: BevGridSpec,
    max_offset_m: float,
    dtype: torch.dtype = torch.float32,
) -> DetectionTargets:
    """Assign every label to the cell holding its centroid.

    When two centroids share a cell the one nearer the cell centre wins. Labels whose
    centroid is off the grid get no cell.
    """
    cells = grid.rows * grid.cols
    responsible = torch.zeros(cells, dtype=torch.bool)
    category = torch.zeros(cells, dtype=torch.long)
    corners = torch.zeros(cells, 4, 2, dtype=torch.float64)
    visibility = torch.zeros(cells, 4, dtype=torch.float64)
    best = torch.full((cells,), math.inf, dtype=torch.float64)
    centers = bev_cell_centers(grid.rows, grid.extent_m).reshape(-1, 2)

    for label in labels:
        pts = torch.tensor(label.corners, dtype=torch.float64)
        centroid = pts.mean(dim=0)
        row, col, inside = cell_index(centroid, grid.rows, grid.extent_m)
        if not bool(inside):
            continue
        cell = int(row) * grid.cols + int(col)
        distance = float(torch.linalg.vector_norm(centroid - centers[cell]))
        if distance >= best[cell]:
            continue
        best[cell] = distance
        responsible[cell] = True
        category[cell] = CATEGORIES.index(label.category)
        corners[cell] = pts
        visibility[cell] = torch.tensor([float(v) for v in label.visibility], dtype=torch.float64)

    return DetectionTargets(
        responsible=responsible,
        category=category,
        corners=corners.to(dtype),
        visibility=visibility.to(dtype),
    )


def targets_to_raw(
    targets: DetectionTargets,
    grid: BevGridSpec,
    max_offset_m: float,
    saturation: float = 30.0,
) -> Tensor:
    """Head output that decodes exactly to ``targets``; inverse of :func:`decode_grid`."""
    dtype = targets.corners.dtype
    centers = bev_cell_centers(grid.rows, grid.extent_m).reshape(-1, 1, 2).to(dtype)
    ratio = ((targets.corners - centers) / max_offset_m).clamp(-_OFFSET_LIMIT, _OFFSET_LIMIT)
    offsets = torch.where(targets.responsible[:, None, None], torch.atanh(ratio), 0.0)
    sign = targets.responsible.to(dtype) * 2.0 - 1.0
    class_logits = (torch.nn.functional.one_hot(targets.category, 2).to(dtype) * 2.0 - 1.0)
    vis_logits = (targets.visibility * 2.0 - 1.0) * saturation
    flat = torch.cat(
        [
            rearrange(offsets, "n k two -> n (k two)"),
            (sign * saturation)[:, None],
            class_logits * saturation,
            vis_logits,
        ],
        dim=-1,
    )
    return rearrange(flat, "(h w) c -> c h w", h=grid.rows, w=grid.cols)
