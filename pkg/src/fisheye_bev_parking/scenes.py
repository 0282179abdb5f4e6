"""Procedural parking scenes: layout, ground-truth labels and BEV target maps.

A scene is a straight aisle along the world ``x`` axis with one row of slots on each
side. Markings are flat line segments, vehicles are extruded oriented boxes. The ego
vehicle drives in the aisle; labels are expressed in its frame.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import torch
from numpy.typing import NDArray

from . import polygon
from .bev import bev_cell_centers
from .camera import CameraCalibration, project_rays
from .config import BevGridSpec, SceneConfig
from .errors import SceneGenerationError
from .models import PolygonLabel

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
RowKind = Literal["perpendicular", "parallel"]

# corner ground points are lifted so they never graze the ground plane of a box
_GROUND_LIFT = 0.02


def oriented_box(
    center: Sequence[float], heading: float, length: float, width: float
) -> FloatArray:
    """Clockwise corners front-left, front-right, rear-right, rear-left, ``(4, 2)``.

    The front edge (corners 0-1) lies at ``center + heading * length / 2``.
    """
    h = np.array([math.cos(heading), math.sin(heading)])
    n = np.array([-h[1], h[0]])
    c = np.asarray(center, dtype=np.float64)
    half_l, half_w = 0.5 * length, 0.5 * width
    return np.stack(
        [
            c + h * half_l + n * half_w,
            c + h * half_l - n * half_w,
            c - h * half_l - n * half_w,
            c - h * half_l + n * half_w,
        ]
    )


@dataclass(frozen=True, slots=True, eq=False)
class ParkingSlot:
    corners: FloatArray
    occupied: bool


@dataclass(frozen=True, slots=True, eq=False)
class VehicleBox:
    """Footprint (clockwise, front edge first) extruded from the ground to ``height``."""

    corners: FloatArray
    height: float
    color: tuple[float, float, float]

    @property
    def center(self) -> FloatArray:
        return self.corners.mean(axis=0)

    @property
    def heading(self) -> float:
        front = 0.5 * (self.corners[0] + self.corners[1])
        d = front - self.center
        return math.atan2(float(d[1]), float(d[0]))

    @property
    def half_extents(self) -> tuple[float, float]:
        length = float(np.linalg.norm(self.corners[0] - self.corners[3]))
        width = float(np.linalg.norm(self.corners[0] - self.corners[1]))
        return 0.5 * length, 0.5 * width


@dataclass(frozen=True, slots=True, eq=False)
class Marking:
    start: FloatArray
    end: FloatArray
    width: float


@dataclass(frozen=True, slots=True)
class EgoPose:
    """Ego position and heading in the world frame."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def to_vehicle(self, points: FloatArray) -> FloatArray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rel = np.asarray(points, dtype=np.float64)[..., :2] - np.array([self.x, self.y])
        return np.stack([c * rel[..., 0] + s * rel[..., 1], -s * rel[..., 0] + c * rel[..., 1]], -1)


@dataclass(frozen=True, slots=True)
class SceneSpec:
    """Generator settings plus the seed of one scene."""

    config: SceneConfig
    seed: int
    frame_id: str = "scene"


@dataclass(frozen=True, slots=True, eq=False)
class World:
    """Scene geometry; ``in_vehicle_frame`` gives the copy seen from the ego."""

    slots: tuple[ParkingSlot, ...]
    vehicles: tuple[VehicleBox, ...]
    markings: tuple[Marking, ...]
    ego: EgoPose = field(default_factory=EgoPose)
    rows: tuple[RowKind, ...] = ()

    def in_vehicle_frame(self) -> World:
        ego = self.ego
        return World(
            slots=tuple(ParkingSlot(ego.to_vehicle(s.corners), s.occupied) for s in self.slots),
            vehicles=tuple(
                VehicleBox(ego.to_vehicle(v.corners), v.height, v.color) for v in self.vehicles
            ),
            markings=tuple(
                Marking(ego.to_vehicle(m.start), ego.to_vehicle(m.end), m.width)
                for m in self.markings
            ),
            ego=EgoPose(),
            rows=self.rows,
        )


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def _row(
    rng: np.random.Generator,
    cfg: SceneConfig,
    kind: RowKind,
    side: int,
) -> tuple[list[ParkingSlot], list[VehicleBox], list[Marking]]:
    """One row of slots on the ``side`` (+1 left, -1 right) of the aisle."""
    along, depth = cfg.perpendicular_slot if kind == "perpendicular" else cfg.parallel_slot
    count = int(rng.integers(cfg.slots_per_row[0], cfg.slots_per_row[1] + 1))
    start = -0.5 * count * along + float(rng.uniform(-0.5, 0.5)) * along
    inner = side * 0.5 * cfg.aisle_width
    outer = side * (0.5 * cfg.aisle_width + depth)
    # slots face the aisle
    heading = -side * math.pi / 2.0

    slots: list[ParkingSlot] = []
    vehicles: list[VehicleBox] = []
    markings: list[Marking] = []
    for i in range(count):
        cx = start + (i + 0.5) * along
        cy = 0.5 * (inner + outer)
        occupied = bool(rng.random() < cfg.occupancy)
        corners = oriented_box((cx, cy), heading, depth, along)
        slots.append(ParkingSlot(corners=corners, occupied=occupied))
        length = _uniform(rng, cfg.vehicle_length)
        width = _uniform(rng, cfg.vehicle_width)
        height = _uniform(rng, cfg.vehicle_height)
        jitter = rng.uniform(-0.1, 0.1, size=2)
        color = tuple(float(c) for c in rng.uniform(0.1, 0.8, size=3))
        if kind == "perpendicular":
            yaw = heading if rng.random() < 0.5 else heading + math.pi
            length = min(length, depth - 0.2)
            width = min(width, along - 0.3)
        else:
            yaw = 0.0 if rng.random() < 0.5 else math.pi
            length, width = min(length, along - 0.3), min(width, depth - 0.2)
        if occupied:
            box = oriented_box((cx + jitter[0], cy + jitter[1]), yaw, length, width)
            rgb = (color[0], color[1], color[2])
            vehicles.append(VehicleBox(corners=box, height=height, color=rgb))

    w = cfg.marking_width
    for i in range(count + 1):
        x = start + i * along
        markings.append(Marking(np.array([x, inner]), np.array([x, outer]), w))
    markings.append(Marking(np.array([start, outer]), np.array([start + count * along, outer]), w))
    return slots, vehicles, markings


def generate_scene(spec: SceneSpec) -> World:
    """World model of one scene, deterministic in ``spec.seed``."""
    cfg = spec.config
    rng = np.random.default_rng(spec.seed)
    layout = cfg.layout
    if layout == "random":
        layout = ("perpendicular", "parallel", "mixed")[int(rng.integers(0, 3))]
    rows: tuple[RowKind, RowKind]
    if layout == "mixed":
        rows = ("perpendicular", "parallel")
        if rng.random() < 0.5:
            rows = ("parallel", "perpendicular")
    elif layout == "parallel":
        rows = ("parallel", "parallel")
    else:
        rows = ("perpendicular", "perpendicular")

    slots: list[ParkingSlot] = []
    vehicles: list[VehicleBox] = []
    markings: list[Marking] = []
    for side, kind in zip((1, -1), rows, strict=True):
        s, v, m = _row(rng, cfg, kind, side)
        slots += s
        vehicles += v
        markings += m

    geometry = [s.corners for s in slots] + [v.corners for v in vehicles]
    reach = float(np.linalg.norm(np.concatenate(geometry), axis=-1).max(initial=0.0))
    if reach > cfg.world_radius:
        raise SceneGenerationError(
            f"layout reaches {reach:.1f} m, beyond the world radius of {cfg.world_radius} m"
        )

    offset = cfg.ego_offset_m
    yaw = math.radians(float(rng.uniform(-cfg.ego_yaw_deg, cfg.ego_yaw_deg)))
    if rng.random() < 0.5:
        yaw += math.pi
    ego = EgoPose(
        x=float(rng.uniform(-offset, offset)),
        y=float(rng.uniform(-offset, offset)),
        yaw=yaw,
    )
    return World(
        slots=tuple(slots),
        vehicles=tuple(vehicles),
        markings=tuple(markings),
        ego=ego,
        rows=rows,
    )


# --------------------------------------------------------------------------------------
# Labels
# --------------------------------------------------------------------------------------


def outside_fraction(corners: FloatArray, extent_m: float) -> float:
    """Fraction of a quad's area outside the square BEV extent."""
    half = 0.5 * extent_m
    square = torch.tensor(
        [[half, half], [half, -half], [-half, -half], [-half, half]], dtype=torch.float64
    )
    quad = torch.as_tensor(corners, dtype=torch.float64)
    total = float(polygon.area(quad))
    if total <= polygon.DEGENERATE_AREA:
        return 1.0
    inside = float(polygon.intersection_area(quad, square))
    return min(1.0, max(0.0, 1.0 - inside / total))


def segment_hits_box(start: FloatArray, end: FloatArray, box: VehicleBox) -> NDArray[np.bool_]:
    """Slab test of segments ``start -> end`` ``(..., 3)`` against an extruded box.

    The final millimetre of every segment is excluded so an end point on a face does
    not count as a hit.
    """
    c, s = math.cos(box.heading), math.sin(box.heading)
    center = box.center
    half_l, half_w = box.half_extents

    def local(p: FloatArray) -> FloatArray:
        dx, dy = p[..., 0] - center[0], p[..., 1] - center[1]
        return np.stack([c * dx + s * dy, -s * dx + c * dy, p[..., 2]], axis=-1)

    a, b = local(start), local(end)
    d = b - a
    lo = np.array([-half_l, -half_w, 0.0])
    hi = np.array([half_l, half_w, box.height])
    length = np.linalg.norm(d, axis=-1)
    t_max = np.clip(1.0 - 1e-3 / np.maximum(length, 1e-9), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - a) / d
        t2 = (hi - a) / d
    parallel = np.abs(d) < 1e-12
    outside = parallel & ((a < lo) | (a > hi))
    near = np.where(parallel, -np.inf, np.minimum(t1, t2))
    far = np.where(parallel, np.inf, np.maximum(t1, t2))
    t_enter = np.maximum(near.max(axis=-1), 0.0)
    t_exit = np.minimum(far.min(axis=-1), t_max)
    return (t_enter <= t_exit) & ~outside.any(axis=-1)


def corner_visibility(
    points: FloatArray,
    rig: Sequence[CameraCalibration],
    boxes: Sequence[VehicleBox],
    crop_top: int = 0,
) -> NDArray[np.bool_]:
    """Whether ground points ``(P, 2)`` have an unoccluded line of sight to any camera.

    A camera sees a point when it lies in the field of view, lands on the image below
    the cropped rows and the segment to the camera misses every box.
    """
    pts = np.concatenate([points, np.full((len(points), 1), _GROUND_LIFT)], axis=-1)
    visible = np.zeros(len(points), dtype=bool)
    for calib in rig:
        origin = calib.extrinsics.camera_center
        pixels, inside = project_rays(pts - origin, calib)
        width, height = calib.intrinsics.image_size
        with np.errstate(invalid="ignore"):
            on_image = (
                inside
                & (pixels[:, 0] >= 0.0)
                & (pixels[:, 0] <= width)
                & (pixels[:, 1] >= crop_top)
                & (pixels[:, 1] <= height)
            )
        clear = on_image.copy()
        starts = np.broadcast_to(origin, pts.shape)
        for box in boxes:
            clear &= ~segment_hits_box(starts, pts, box)
        visible |= clear
    return visible


def derive_labels(
    world: World,
    rig: Sequence[CameraCalibration],
    grid: BevGridSpec,
    *,
    max_outside_fraction: float = 0.7,
    crop_top: int = 0,
) -> list[PolygonLabel]:
    """Vehicle-frame labels: vacant slots and vehicles, minus those mostly off the grid."""
    local = world.in_vehicle_frame()
    labels: list[PolygonLabel] = []
    for slot in local.slots:
        if slot.occupied:
            continue
        if outside_fraction(slot.corners, grid.extent_m) > max_outside_fraction:
            continue
        flags = corner_visibility(slot.corners, rig, local.vehicles, crop_top)
        labels.append(
            PolygonLabel(
                category="parking",
                corners=[(float(x), float(y)) for x, y in slot.corners],
                visibility=[bool(f) for f in flags],
            )
        )
    for k, box in enumerate(local.vehicles):
        if outside_fraction(box.corners, grid.extent_m) > max_outside_fraction:
            continue
        others = [b for i, b in enumerate(local.vehicles) if i != k]
        flags = corner_visibility(box.corners, rig, others, crop_top)
        labels.append(
            PolygonLabel(
                category="vehicle",
                corners=[(float(x), float(y)) for x, y in box.corners],
                visibility=[bool(f) for f in flags],
            )
        )
    return labels


def target_maps(labels: Sequence[PolygonLabel], grid: BevGridSpec, sigma_px: float) -> FloatArray:
    """``(4, S, S)`` float32 maps: parking and vehicle masks, then their centre heatmaps."""
    size = grid.seg_size
    pixel_m = grid.extent_m / size
    centers = bev_cell_centers(size, grid.extent_m).reshape(-1, 2)
    maps = torch.zeros(4, size * size, dtype=torch.float64)
    for label in labels:
        channel = 0 if label.category == "parking" else 1
        quad = torch.tensor(label.corners, dtype=torch.float64)
        inside = polygon.point_in_convex(centers, quad)
        maps[channel] = torch.maximum(maps[channel], inside.to(torch.float64))
        d2 = ((centers - quad.mean(dim=0)) ** 2).sum(dim=-1) / pixel_m**2
        heat = torch.exp(-0.5 * d2 / sigma_px**2)
        maps[channel + 2] = torch.maximum(maps[channel + 2], heat)
    return maps.reshape(4, size, size).numpy().astype(np.float32)
