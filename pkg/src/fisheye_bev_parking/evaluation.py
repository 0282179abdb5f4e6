"""Detection matching and metrics: precision, recall, F1, heading-point error, visibility."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import torch

from . import polygon
from .config import AcceptanceConfig, EvalConfig
from .models import (
    CATEGORIES,
    ClassMetrics,
    MetricsReport,
    Point,
    PolygonDetection,
    PolygonLabel,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class Match:
    prediction: PolygonDetection
    label: PolygonLabel
    iou: float


@dataclass(frozen=True, slots=True)
class MatchResult:
    matches: list[Match]
    false_positives: list[PolygonDetection]
    false_negatives: list[PolygonLabel]


def _midpoint(a: Point, b: Point) -> tuple[float, float]:
    return 0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])


def _distance(a: Sequence[float], b: Sequence[float]) -> float:
    return float(((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2) ** 0.5)


def orientation_agrees(pred: Sequence[Point], label: Sequence[Point]) -> bool:
    """Predicted heading-edge midpoint is nearer the label's heading edge than its rear edge."""
    head = _midpoint(pred[0], pred[1])
    return _distance(head, _midpoint(label[0], label[1])) < _distance(
        head, _midpoint(label[2], label[3])
    )


def match(
    predictions: Sequence[PolygonDetection],
    labels: Sequence[PolygonLabel],
    confidence_threshold: float = 0.10,
    iou_threshold: float = 0.5,
) -> MatchResult:
    """Greedy one-to-one matching per class, by descending confidence.

    Each prediction takes the unmatched label of its class with the highest IoU that
    passes ``iou_threshold`` and the orientation test. Confidence ties are broken by
    detection id, IoU ties by label position.
    """
    kept = [p for p in predictions if p.confidence >= confidence_threshold]
    order = sorted(kept, key=lambda p: (-p.confidence, p.detection_id))
    taken = [False] * len(labels)
    matches: list[Match] = []
    false_positives: list[PolygonDetection] = []
    for pred in order:
        candidates = [
            i for i, label in enumerate(labels) if not taken[i] and label.category == pred.category
        ]
        best: tuple[float, int] | None = None
        if candidates:
            gt = torch.tensor([labels[i].corners for i in candidates], dtype=torch.float64)
            quad = torch.tensor(pred.corners, dtype=torch.float64)[None]
            ious = polygon.iou(quad.expand_as(gt), gt).tolist()
            for i, value in zip(candidates, ious, strict=True):
                if value < iou_threshold or not orientation_agrees(pred.corners, labels[i].corners):
                    continue
                if best is None or value > best[0]:
                    best = (value, i)
        if best is None:
            false_positives.append(pred)
            continue
        taken[best[1]] = True
        matches.append(Match(prediction=pred, label=labels[best[1]], iou=best[0]))
    false_negatives = [label for i, label in enumerate(labels) if not taken[i]]
    return MatchResult(matches, false_positives, false_negatives)


def distance_error(matches: Sequence[Match]) -> float | None:
    """Mean heading-point distance in centimetres; ``None`` without matches."""
    if not matches:
        return None
    total = 0.0
    for m in matches:
        p, g = m.prediction.corners, m.label.corners
        total += 0.5 * (_distance(p[0], g[0]) + _distance(p[1], g[1]))
    return 100.0 * total / len(matches)


def visibility_accuracy(matches: Sequence[Match]) -> float | None:
    """Fraction of corner flags of matched parking slots predicted right at 0.5."""
    correct = 0
    total = 0
    for m in matches:
        if m.label.category != "parking":
            continue
        for score, flag in zip(m.prediction.visibility, m.label.visibility, strict=True):
            correct += int((score >= 0.5) == flag)
            total += 1
    return correct / total if total else None


def class_metrics(results: Sequence[MatchResult], category: str | None = None) -> ClassMetrics:
    """Counts and scores pooled over frames; ``category=None`` pools both classes."""

    def keep(c: str) -> bool:
        return category is None or c == category

    matches = [m for r in results for m in r.matches if keep(m.label.category)]
    tp = len(matches)
    fp = sum(1 for r in results for p in r.false_positives if keep(p.category))
    fn = sum(1 for r in results for g in r.false_negatives if keep(g.category))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ClassMetrics(
        true_positives=tp,
        false_positives=fp,
        false_negatives=fn,
        precision=precision,
        recall=recall,
        f1=f1,
        distance_error_cm=distance_error(matches),
    )


def evaluate(
    frames: Sequence[tuple[Sequence[PolygonDetection], Sequence[PolygonLabel]]],
    cfg: EvalConfig,
    *,
    config_hash: str,
    checkpoint: str | None = None,
    workers: int = 1,
) -> MetricsReport:
    """Match every frame (in parallel) and reduce the results in frame order."""

    def run(frame: tuple[Sequence[PolygonDetection], Sequence[PolygonLabel]]) -> MatchResult:
        return match(frame[0], frame[1], cfg.confidence_threshold, cfg.match_iou)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, frames))
    per_class = {c: class_metrics(results, c) for c in CATEGORIES}
    report = MetricsReport(
        config_hash=config_hash,
        checkpoint=checkpoint,
        frames=len(frames),
        per_class=per_class,
        overall=class_metrics(results),
        macro_f1=sum(m.f1 for m in per_class.values()) / len(per_class),
        visibility_accuracy=visibility_accuracy([m for r in results for m in r.matches]),
    )
    error = report.overall.distance_error_cm
    logger.info(
        "evaluated %d frames: F1 %.3f (macro %.3f), distance error %s cm",
        report.frames,
        report.overall.f1,
        report.macro_f1,
        "n/a" if error is None else f"{error:.1f}",
    )
    return report


def acceptance_failures(report: MetricsReport, acceptance: AcceptanceConfig) -> list[str]:
    failures: list[str] = []
    if acceptance.min_f1 is not None and report.overall.f1 < acceptance.min_f1:
        failures.append(f"F1 {report.overall.f1:.3f} < {acceptance.min_f1}")
    if acceptance.max_distance_cm is not None:
        error = report.overall.distance_error_cm
        if error is None or error > acceptance.max_distance_cm:
            shown = "n/a" if error is None else f"{error:.1f}"
            failures.append(f"distance error {shown} cm > {acceptance.max_distance_cm}")
    if acceptance.min_visibility_accuracy is not None:
        acc = report.visibility_accuracy
        if acc is None or acc < acceptance.min_visibility_accuracy:
            shown = "n/a" if acc is None else f"{acc:.3f}"
            failures.append(f"visibility accuracy {shown} < {acceptance.min_visibility_accuracy}")
    return failures
