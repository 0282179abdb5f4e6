"""Flat-shaded fisheye ray casting of a scene world."""

from __future__ import annotations

import functools
from collections.abc import Sequence

import numpy as np
from einops import reduce
from numpy.typing import NDArray

from .camera import CameraCalibration, unproject_pixel
from .scenes import FloatArray, Marking, VehicleBox, World

GROUND_RGB = np.array([0.32, 0.32, 0.34])
MARKING_RGB = np.array([0.92, 0.92, 0.88])
SKY_RGB = np.array([0.55, 0.68, 0.85])
# shade of the faces hit across the length, width and height slabs of a box
FACE_SHADE = np.array([0.8, 0.65, 1.0])


@functools.lru_cache(maxsize=32)
def ray_grid(
    calib: CameraCalibration, supersample: int = 1
) -> tuple[FloatArray, NDArray[np.bool_]]:
    """Vehicle-frame rays of every sub-pixel inside the fisheye circle.

    Returns ``(rays (P, 3), inside (H*s, W*s))`` with rays in row-major order of the
    inside sub-pixels. The most recent calibrations are cached.
    """
    intr = calib.intrinsics
    width, height = intr.image_size
    s = supersample
    u = (np.arange(width * s) + 0.5) / s
    v = (np.arange(height * s) + 0.5) / s
    grid = np.stack(np.meshgrid(u, v, indexing="xy"), axis=-1)
    offset = grid - np.asarray(intr.principal_point)
    inside = np.hypot(offset[..., 0], offset[..., 1]) <= intr.radius_max
    rays = unproject_pixel(grid[inside], calib)
    rays.flags.writeable = False
    inside.flags.writeable = False
    return rays, inside


def _marking_mask(points: FloatArray, markings: Sequence[Marking]) -> NDArray[np.bool_]:
    hit = np.zeros(len(points), dtype=bool)
    for m in markings:
        seg = m.end - m.start
        length2 = float(seg @ seg)
        t = np.clip(((points - m.start) @ seg) / max(length2, 1e-12), 0.0, 1.0)
        nearest = m.start + t[:, None] * seg
        hit |= np.linalg.norm(points - nearest, axis=-1) <= 0.5 * m.width
    return hit


def _box_hits(
    origin: FloatArray, rays: FloatArray, box: VehicleBox
) -> tuple[FloatArray, NDArray[np.intp]]:
    """Entry distance along each ray (``inf`` on a miss) and the slab axis it enters by."""
    c, s = np.cos(box.heading), np.sin(box.heading)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    center = np.array([box.center[0], box.center[1], 0.0])
    a = rot @ (origin - center)
    d = rays @ rot.T
    d = np.where(np.abs(d) < 1e-12, 1e-12, d)
    half_l, half_w = box.half_extents
    lo = np.array([-half_l, -half_w, 0.0])
    hi = np.array([half_l, half_w, box.height])
    t1 = (lo - a) / d
    t2 = (hi - a) / d
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    t_enter = near.max(axis=-1)
    t_exit = far.min(axis=-1)
    hit = (t_enter <= t_exit) & (t_enter > 0.0)
    return np.where(hit, t_enter, np.inf), near.argmax(axis=-1)


def shade_rays(origin: FloatArray, rays: FloatArray, world: World) -> FloatArray:
    """RGB of rays ``(P, 3)`` cast from ``origin`` into a vehicle-frame world."""
    colors = np.broadcast_to(SKY_RGB, rays.shape).copy()
    depth = np.full(len(rays), np.inf)

    down = rays[:, 2] < 0.0
    t_ground = np.where(down, -origin[2] / np.where(down, rays[:, 2], -1.0), np.inf)
    ground = np.isfinite(t_ground)
    points = origin[:2] + t_ground[ground, None] * rays[ground, :2]
    ground_rgb = np.where(
        _marking_mask(points, world.markings)[:, None], MARKING_RGB, GROUND_RGB
    )
    colors[ground] = ground_rgb
    depth[ground] = t_ground[ground]

    for box in world.vehicles:
        t, axis = _box_hits(origin, rays, box)
        closer = t < depth
        colors[closer] = np.asarray(box.color) * FACE_SHADE[axis[closer], None]
        depth[closer] = t[closer]
    return colors


def render_fisheye(
    world: World, calib: CameraCalibration, supersample: int = 2
) -> NDArray[np.float32]:
    """``(3, H, W)`` float32 image of ``world``; pixels outside the fisheye circle are black."""
    local = world.in_vehicle_frame()
    rays, inside = ray_grid(calib, supersample)
    image = np.zeros((*inside.shape, 3))
    image[inside] = shade_rays(calib.extrinsics.camera_center, rays, local)
    out = reduce(image, "(h a) (w b) c -> c h w", "mean", a=supersample, b=supersample)
    return out.astype(np.float32)


def render_rig(
    world: World, rig: Sequence[CameraCalibration], supersample: int = 2
) -> NDArray[np.float32]:
    """``(N, 3, H, W)`` images of every camera in ``rig``."""
    return np.stack([render_fisheye(world, calib, supersample) for calib in rig])
