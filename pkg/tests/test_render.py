from __future__ import annotations

import numpy as np
import pytest

from fisheye_bev_parking.camera import CameraCalibration, project_ray
from fisheye_bev_parking.render import (
    FACE_SHADE,
    GROUND_RGB,
    MARKING_RGB,
    ray_grid,
    render_fisheye,
    render_rig,
)
from fisheye_bev_parking.scenes import Marking, VehicleBox, World, oriented_box


def _pixel_of(point: list[float], calib: CameraCalibration) -> tuple[float, float]:
    uv = project_ray(np.asarray(point) - calib.extrinsics.camera_center, calib)
    assert uv is not None
    return uv


def test_ray_grid_is_unit_and_cached(rig: tuple[CameraCalibration, ...]) -> None:
    rays, inside = ray_grid(rig[0], 2)
    assert inside.shape == (218, 256)
    assert rays.shape == (int(inside.sum()), 3)
    np.testing.assert_allclose(np.linalg.norm(rays, axis=-1), 1.0, atol=1e-9)
    assert ray_grid(rig[0], 2) is ray_grid(rig[0], 2)
    assert ray_grid.cache_info().maxsize == 32
    assert not inside[0, 0]


def test_empty_world_shows_ground_and_a_black_border(rig: tuple[CameraCalibration, ...]) -> None:
    front = rig[0]
    image = render_fisheye(World(slots=(), vehicles=(), markings=()), front, supersample=1)
    assert image.shape == (3, 109, 128)
    assert image.dtype == np.float32
    np.testing.assert_allclose(image[:, 54, 64], GROUND_RGB, atol=1e-6)
    np.testing.assert_array_equal(image[:, 0, 0], [0.0, 0.0, 0.0])


def test_marking_lands_where_the_camera_projects_it(rig: tuple[CameraCalibration, ...]) -> None:
    front = rig[0]
    line = Marking(np.array([6.0, -1.0]), np.array([6.0, 1.0]), 0.4)
    image = render_fisheye(World(slots=(), vehicles=(), markings=(line,)), front, supersample=1)
    u, v = _pixel_of([6.0, 0.0, 0.0], front)
    column = image[:, :, int(u)]
    rows = np.flatnonzero(np.all(np.abs(column.T - MARKING_RGB) < 1e-6, axis=-1))
    assert rows.size > 0
    assert float(np.mean(rows + 0.5)) == pytest.approx(v, abs=1.0)
    # a little further on the ground is bare tarmac
    u2, v2 = _pixel_of([7.0, 0.0, 0.0], front)
    np.testing.assert_allclose(image[:, int(v2), int(u2)], GROUND_RGB, atol=1e-6)


def test_vehicle_face_occludes_the_ground(rig: tuple[CameraCalibration, ...]) -> None:
    front = rig[0]
    color = (0.5, 0.2, 0.1)
    box = VehicleBox(corners=oriented_box((8.0, 0.0), 0.0, 2.0, 2.0), height=1.5, color=color)
    image = render_fisheye(World(slots=(), vehicles=(box,), markings=()), front, supersample=1)
    u, v = _pixel_of([7.0, 0.0, 0.75], front)
    expected = np.asarray(color) * FACE_SHADE[0]
    np.testing.assert_allclose(image[:, int(v), int(u)], expected, atol=1e-6)


def test_render_rig_stacks_every_camera(rig: tuple[CameraCalibration, ...]) -> None:
    images = render_rig(World(slots=(), vehicles=(), markings=()), rig, supersample=1)
    assert images.shape == (4, 3, 109, 128)
    assert float(images.min()) >= 0.0 and float(images.max()) <= 1.0
