"""Multi-task objective: segmentation focal losses plus the polygon detection terms."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import Tensor

from . import polygon
from .config import BevGridSpec, LossConfig, LossWeights
from .errors import NonFiniteLossError
from .heads import CLASSES, OBJECTNESS, VISIBILITY, DetectionTargets, decode_grid
from .models import LossRecord, TermRecord

TERM_ORDER = (
    "seg_binary",
    "seg_center",
    "polygon_giou",
    "objectness",
    "class",
    "corner_distance",
    "corner_visibility",
)


def sigmoid_focal_loss(logits: Tensor, targets: Tensor, gamma: float, alpha: float) -> Tensor:
    """Element-wise focal loss; ``alpha`` weighs positives, ``1 - alpha`` negatives."""
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    prob = logits.sigmoid()
    prob_true = prob * targets + (1 - prob) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return alpha_t * (1 - prob_true) ** gamma * ce


def focal_loss(
    logits: Tensor,
    targets: Tensor,
    gamma: float = 2.0,
    alpha: float = 0.25,
    mask: Tensor | None = None,
) -> Tensor:
    """Focal loss over ``(B, C, H, W)`` maps: mean per channel, summed over channels.

    ``mask (B, 1, H, W)`` excludes pixels (zero weight) from the channel means.
    """
    loss = sigmoid_focal_loss(logits, targets, gamma, alpha)
    if mask is None:
        return loss.mean(dim=(0, 2, 3)).sum()
    weight = mask.to(loss.dtype).expand_as(loss)
    per_channel = (loss * weight).sum(dim=(0, 2, 3)) / weight.sum(dim=(0, 2, 3)).clamp(min=1.0)
    return per_channel.sum()


def segmentation_terms(
    seg: Tensor,
    targets: Tensor,
    cfg: LossConfig,
    mask: Tensor | None = None,
) -> dict[str, Tensor]:
    """``seg``/``targets`` hold the two class masks then the two centre heatmaps."""
    gamma, alpha = cfg.focal_gamma, cfg.focal_alpha
    return {
        "seg_binary": focal_loss(seg[:, 0:2], targets[:, 0:2], gamma, alpha, mask),
        "seg_center": focal_loss(seg[:, 2:4], targets[:, 2:4], gamma, alpha, mask),
    }


def detection_terms(
    raw: Tensor,
    targets: Sequence[DetectionTargets],
    grid: BevGridSpec,
    max_offset_m: float,
) -> dict[str, Tensor]:
    """Detection terms for a ``(B, 15, R, R)`` head output.

    Objectness trains every cell; the other terms average over responsible cells and are
    zero when a batch has none. Visibility trains on parking cells only.
    """
    zero = raw.sum() * 0.0
    flat = rearrange(raw, "b c h w -> b (h w) c")
    objectness_target = torch.stack([t.responsible for t in targets]).to(raw.dtype)
    objectness = F.binary_cross_entropy_with_logits(flat[..., OBJECTNESS], objectness_target)

    pred_corners: list[Tensor] = []
    gt_corners: list[Tensor] = []
    class_logits: list[Tensor] = []
    class_targets: list[Tensor] = []
    vis_logits: list[Tensor] = []
    vis_targets: list[Tensor] = []
    for b, target in enumerate(targets):
        if not bool(target.responsible.any()):
            continue
        dense = decode_grid(raw[b], grid, max_offset_m)
        pos = target.responsible
        pred_corners.append(dense.corners[pos])
        gt_corners.append(target.corners[pos].to(raw.dtype))
        class_logits.append(flat[b, pos, CLASSES])
        class_targets.append(F.one_hot(target.category[pos], 2).to(raw.dtype))
        parking = target.is_parking
        vis_logits.append(flat[b, parking, VISIBILITY])
        vis_targets.append(target.visibility[parking].to(raw.dtype))

    if not pred_corners:
        return {
            "polygon_giou": zero,
            "objectness": objectness,
            "class": zero,
            "corner_distance": zero,
            "corner_visibility": zero,
        }

    pred = torch.cat(pred_corners)
    gt = torch.cat(gt_corners)
    g, _ = polygon.giou(pred, gt)
    vis_l = torch.cat(vis_logits)
    vis_t = torch.cat(vis_targets)
    visibility = F.binary_cross_entropy_with_logits(vis_l, vis_t) if vis_l.numel() else zero
    classes = F.binary_cross_entropy_with_logits(torch.cat(class_logits), torch.cat(class_targets))
    return {
        "polygon_giou": (1.0 - g).mean(),
        "objectness": objectness,
        "class": classes,
        "corner_distance": (pred - gt).abs().sum(dim=-1).mean(),
        "corner_visibility": visibility,
    }


@dataclass(frozen=True, slots=True)
class LossReport:
    total: Tensor
    terms: dict[str, Tensor]
    weighted: dict[str, Tensor]

    def record(self, step: int, lr: float) -> LossRecord:
        return LossRecord(
            step=step,
            lr=lr,
            total=float(self.total.detach()),
            terms={
                name: TermRecord(
                    value=float(self.terms[name].detach()),
                    weighted=float(self.weighted[name].detach()),
                )
                for name in self.terms
            },
        )


def weigh_terms(terms: Mapping[str, Tensor | float], weights: LossWeights) -> LossReport:
    """Weighted sum of the present terms in canonical order; non-finite terms raise."""
    coefficients = weights.as_dict()
    ordered = [name for name in TERM_ORDER if name in terms]
    unknown = set(terms) - set(TERM_ORDER)
    if unknown:
        raise KeyError(f"unknown loss terms: {sorted(unknown)}")
    values: dict[str, Tensor] = {}
    weighted: dict[str, Tensor] = {}
    for name in ordered:
        raw = terms[name]
        value = raw if isinstance(raw, Tensor) else torch.tensor(float(raw), dtype=torch.float64)
        if not bool(torch.isfinite(value.detach()).all()):
            raise NonFiniteLossError(term=name)
        values[name] = value
        weighted[name] = coefficients[name] * value
    if not weighted:
        raise ValueError("no loss terms to weigh")
    total = weighted[ordered[0]]
    for name in ordered[1:]:
        total = total + weighted[name]
    return LossReport(total=total, terms=values, weighted=weighted)


def total_loss(
    seg: Tensor | None,
    det: Tensor | None,
    seg_targets: Tensor | None,
    det_targets: Sequence[DetectionTargets],
    cfg: LossConfig,
    grid: BevGridSpec,
    max_offset_m: float,
    seg_mask: Tensor | None = None,
) -> LossReport:
    """Weighted multi-task loss of one forward pass; disabled heads contribute no terms."""
    terms: dict[str, Tensor] = {}
    if seg is not None:
        if seg_targets is None:
            raise ValueError("segmentation output given without segmentation targets")
        terms.update(segmentation_terms(seg, seg_targets, cfg, seg_mask))
    if det is not None:
        terms.update(detection_terms(det, det_targets, grid, max_offset_m))
    return weigh_terms(terms, cfg.weights)
