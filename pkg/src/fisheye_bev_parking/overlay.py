"""BEV overlay rasters: ego box, ground truth and predictions seen from above."""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path

from matplotlib.axes import Axes
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.patches import Polygon, Rectangle

from .config import BevGridSpec
from .models import Point, PolygonDetection, PolygonLabel

# ego footprint in the vehicle frame: rear overhang, front reach, width
EGO_REAR_M = 1.0
EGO_FRONT_M = 3.7
EGO_WIDTH_M = 1.9

_COLORS = {"parking": "tab:blue", "vehicle": "tab:orange"}


def _plot_xy(points: Sequence[Point]) -> list[tuple[float, float]]:
    """Vehicle ``(x, y)`` to plot axes with forward up and left on the left."""
    return [(-y, x) for x, y in points]


def _draw_label(ax: Axes, label: PolygonLabel) -> None:
    pts = _plot_xy(label.corners)
    ax.add_patch(
        Polygon(pts, closed=True, fill=False, edgecolor="tab:green", linestyle="--", linewidth=1.0)
    )
    (x0, y0), (x1, y1) = pts[0], pts[1]
    ax.plot([x0, x1], [y0, y1], color="tab:green", linewidth=2.0)


def _draw_detection(ax: Axes, det: PolygonDetection) -> None:
    pts = _plot_xy(det.corners)
    color = _COLORS[det.category]
    ax.add_patch(
        Polygon(
            pts,
            closed=True,
            fill=det.category == "vehicle",
            facecolor=color,
            alpha=0.35 if det.category == "vehicle" else 1.0,
            edgecolor=color,
            linewidth=1.2,
        )
    )
    (x0, y0), (x1, y1) = pts[0], pts[1]
    ax.plot([x0, x1], [y0, y1], color="white", linewidth=2.5)
    cx = sum(p[0] for p in pts) / 4.0
    cy = sum(p[1] for p in pts) / 4.0
    ax.plot([cx], [cy], "o", color=color, markersize=3)
    if det.category == "parking":
        for (px, py), score in zip(pts, det.visibility, strict=True):
            dot = "lime" if score >= 0.5 else "red"
            ax.plot([px], [py], "o", color=dot, markersize=3)
    ax.text(cx, cy, f"{det.confidence:.2f}", fontsize=5, color="white")


def render_overlay(
    path: Path,
    grid: BevGridSpec,
    labels: Sequence[PolygonLabel],
    detections: Sequence[PolygonDetection],
    title: str | None = None,
    dpi: int = 120,
) -> Path:
    """Write a PNG of one frame; ground truth dashed green, predictions in class colours."""
    fig = Figure(figsize=(4.0, 4.0))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(1, 1, 1)
    half = grid.half_extent
    ax.set_xlim(-half, half)
    ax.set_ylim(-half, half)
    ax.set_aspect("equal")
    ax.set_facecolor("0.15")
    ax.add_patch(
        Rectangle(
            (-0.5 * EGO_WIDTH_M, -EGO_REAR_M),
            EGO_WIDTH_M,
            EGO_REAR_M + EGO_FRONT_M,
            facecolor="0.8",
            edgecolor="black",
        )
    )
    for label in labels:
        _draw_label(ax, label)
    for det in detections:
        _draw_detection(ax, det)
    if title:
        ax.set_title(title, fontsize=7)
    ax.tick_params(labelsize=5)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=dpi, bbox_inches="tight")
    return path
