"""Fisheye camera geometry: PEFT lens model, rig extrinsics and projection encodings.

Conventions
-----------
Camera frame: ``+x`` right, ``+y`` down, ``+z`` along the optical axis.
Vehicle frame: ``+x`` forward, ``+y`` left, ``+z`` up, origin on the ground below the
centre of the rear axle.
Pixels: continuous ``(u, v)`` coordinates with the origin at the top-left corner of the
image, so the centre of pixel ``[row, col]`` is ``(col + 0.5, row + 0.5)``.

The lens maps an incidence angle ``alpha`` to a radial distance from the principal point
with the quartic ``r_d = c1*a + c2*a^2 + c3*a^3 + c4*a^4``. The model is purely radial
(no tangential terms, square pixels).
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import overload

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import CameraDomainError, ConvergenceError, ShapeError
from .models import CameraRecord, RigFile

CAMERA_NAMES: tuple[str, ...] = ("front", "left", "rear", "right")

FloatArray = NDArray[np.float64]

_NEWTON_MAX_ITERATIONS = 60
_NEWTON_TOLERANCE = 1e-12
_MONOTONICITY_SAMPLES = 4097
_ORTHONORMAL_TOLERANCE = 1e-9


def _frozen(array: ArrayLike, shape: tuple[int, ...]) -> FloatArray:
    out = np.array(array, dtype=np.float64)
    if out.shape != shape:
        raise ShapeError(f"expected shape {shape}, got {out.shape}")
    out.flags.writeable = False
    return out


@dataclass(frozen=True, slots=True, eq=False)
class CameraIntrinsics:
    """PEFT intrinsics of one fisheye camera."""

    c: tuple[float, float, float, float]
    principal_point: tuple[float, float]
    image_size: tuple[int, int]
    alpha_max: float
    radius_max: float = field(init=False)

    def __post_init__(self) -> None:
        if len(self.c) != 4:
            raise CameraDomainError(f"expected 4 PEFT coefficients, got {len(self.c)}")
        if not self.c[0] > 0:
            raise CameraDomainError(f"c1 must be positive, got {self.c[0]}")
        if not 0.0 < self.alpha_max <= math.pi:
            raise CameraDomainError(f"alpha_max must lie in (0, pi], got {self.alpha_max}")
        width, height = self.image_size
        if width <= 0 or height <= 0:
            raise CameraDomainError(f"image size must be positive, got {self.image_size}")
        alphas = np.linspace(0.0, self.alpha_max, _MONOTONICITY_SAMPLES)
        if np.any(self.derivative(alphas) <= 0.0):
            raise CameraDomainError(
                f"PEFT polynomial {self.c} is not strictly increasing on [0, {self.alpha_max}]"
            )
        object.__setattr__(self, "radius_max", float(self.polynomial(self.alpha_max)))

    def polynomial(self, alpha: ArrayLike) -> FloatArray:
        a = np.asarray(alpha, dtype=np.float64)
        c1, c2, c3, c4 = self.c
        return a * (c1 + a * (c2 + a * (c3 + a * c4)))

    def derivative(self, alpha: ArrayLike) -> FloatArray:
        a = np.asarray(alpha, dtype=np.float64)
        c1, c2, c3, c4 = self.c
        return c1 + a * (2.0 * c2 + a * (3.0 * c3 + a * 4.0 * c4))

    def scaled(self, sx: float, sy: float) -> CameraIntrinsics:
        """Intrinsics of the same lens after an isotropic image resize (``sx == sy``)."""
        if not math.isclose(sx, sy, rel_tol=1e-9):
            raise CameraDomainError("the PEFT model assumes square pixels; resize isotropically")
        return CameraIntrinsics(
            c=(self.c[0] * sx, self.c[1] * sx, self.c[2] * sx, self.c[3] * sx),
            principal_point=(self.principal_point[0] * sx, self.principal_point[1] * sy),
            image_size=(round(self.image_size[0] * sx), round(self.image_size[1] * sy)),
            alpha_max=self.alpha_max,
        )


@dataclass(frozen=True, slots=True, eq=False)
class CameraExtrinsics:
    """Rigid transform mapping vehicle-frame points into the camera frame."""

    rotation: FloatArray
    translation: FloatArray

    def __post_init__(self) -> None:
        rotation = _frozen(self.rotation, (3, 3))
        translation = _frozen(self.translation, (3,))
        error = np.abs(rotation @ rotation.T - np.eye(3)).max()
        if error > _ORTHONORMAL_TOLERANCE:
            raise CameraDomainError(f"rotation is not orthonormal (max error {error:.3e})")
        if np.linalg.det(rotation) <= 0.0:
            raise CameraDomainError("rotation must be proper (det = +1)")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> CameraExtrinsics:
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    @property
    def camera_center(self) -> FloatArray:
        """Camera position in the vehicle frame."""
        return -self.rotation.T @ self.translation

    def to_camera(self, vectors: ArrayLike) -> FloatArray:
        """Rotate vehicle-frame directions into the camera frame."""
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def to_vehicle(self, vectors: ArrayLike) -> FloatArray:
        """Rotate camera-frame directions into the vehicle frame."""
        return np.asarray(vectors, dtype=np.float64) @ self.rotation


@dataclass(frozen=True, slots=True, eq=False)
class CameraCalibration:
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics
    name: str

    def __post_init__(self) -> None:
        if self.name not in CAMERA_NAMES:
            raise CameraDomainError(f"camera name must be one of {CAMERA_NAMES}, got {self.name!r}")

    @property
    def index(self) -> int:
        return CAMERA_NAMES.index(self.name)


@dataclass(frozen=True, slots=True, eq=False)
class ProjectionEncoding:
    """Unit vehicle-frame rays, one per feature cell, plus a validity mask."""

    rays: FloatArray
    valid: NDArray[np.bool_]
    camera_index: int

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.rays.shape[0]), int(self.rays.shape[1]))


# --------------------------------------------------------------------------------------
# PEFT lens model
# --------------------------------------------------------------------------------------


@overload
def peft_forward(alpha: float, intr: CameraIntrinsics) -> float: ...
@overload
def peft_forward(alpha: NDArray[np.float64], intr: CameraIntrinsics) -> FloatArray: ...
def peft_forward(alpha: ArrayLike, intr: CameraIntrinsics) -> float | FloatArray:
    """Radial pixel distance for incidence angle ``alpha``."""
    a = np.asarray(alpha, dtype=np.float64)
    if np.any(a < 0.0) or np.any(a > intr.alpha_max) or not np.all(np.isfinite(a)):
        raise CameraDomainError(f"incidence angle outside [0, {intr.alpha_max}]")
    r = intr.polynomial(a)
    return float(r) if r.ndim == 0 else r


@overload
def peft_inverse(r_d: float, intr: CameraIntrinsics) -> float: ...
@overload
def peft_inverse(r_d: NDArray[np.float64], intr: CameraIntrinsics) -> FloatArray: ...
def peft_inverse(r_d: ArrayLike, intr: CameraIntrinsics) -> float | FloatArray:
    """Incidence angle for radial distance ``r_d``.

    Newton iteration seeded at ``r_d / c1``; any step leaving the current bracket falls
    back to bisection, so convergence is guaranteed on the monotone interval
    ``[0, alpha_max]``.
    """
    r = np.asarray(r_d, dtype=np.float64)
    if np.any(r < 0.0) or np.any(r > intr.radius_max) or not np.all(np.isfinite(r)):
        raise CameraDomainError(f"radial distance outside [0, {intr.radius_max:.6f}] px")

    lo = np.zeros_like(r)
    hi = np.full_like(r, intr.alpha_max)
    alpha = np.clip(r / intr.c[0], 0.0, intr.alpha_max)
    tolerance = _NEWTON_TOLERANCE * np.maximum(1.0, r)
    residual = intr.polynomial(alpha) - r
    for _ in range(_NEWTON_MAX_ITERATIONS):
        done = np.abs(residual) <= tolerance
        if np.all(done):
            return float(alpha) if alpha.ndim == 0 else alpha
        hi = np.where(residual > 0.0, alpha, hi)
        lo = np.where(residual < 0.0, alpha, lo)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = alpha - residual / intr.derivative(alpha)
        escaped = ~np.isfinite(newton) | (newton <= lo) | (newton >= hi)
        stepped = np.where(escaped, 0.5 * (lo + hi), newton)
        alpha = np.where(done, alpha, stepped)
        residual = intr.polynomial(alpha) - r

    worst = float(np.max(np.abs(residual)))
    if worst <= float(np.max(tolerance)):
        return float(alpha) if alpha.ndim == 0 else alpha
    raise ConvergenceError(solver="peft_inverse", iterations=_NEWTON_MAX_ITERATIONS, residual=worst)


# --------------------------------------------------------------------------------------
# Rays and pixels
# --------------------------------------------------------------------------------------


def unproject_pixel(pixel: ArrayLike, calib: CameraCalibration) -> FloatArray:
    """Unit vehicle-frame ray(s) through pixel(s) ``(..., 2)``."""
    p = np.asarray(pixel, dtype=np.float64)
    if p.shape[-1:] != (2,):
        raise ShapeError(f"pixels must have a trailing axis of 2, got shape {p.shape}")
    intr = calib.intrinsics
    width, height = intr.image_size
    if np.any(p[..., 0] < 0.0) or np.any(p[..., 0] > width):
        raise CameraDomainError("pixel outside the image bounds")
    if np.any(p[..., 1] < 0.0) or np.any(p[..., 1] > height):
        raise CameraDomainError("pixel outside the image bounds")
    du = p[..., 0] - intr.principal_point[0]
    dv = p[..., 1] - intr.principal_point[1]
    radius = np.hypot(du, dv)
    if np.any(radius > intr.radius_max):
        raise CameraDomainError("pixel outside the valid fisheye circle")
    alpha = np.asarray(peft_inverse(radius, intr))
    phi = np.arctan2(dv, du)
    sin_a = np.sin(alpha)
    cam = np.stack([sin_a * np.cos(phi), sin_a * np.sin(phi), np.cos(alpha)], axis=-1)
    return calib.extrinsics.to_vehicle(cam)


def project_rays(rays: ArrayLike, calib: CameraCalibration) -> tuple[FloatArray, NDArray[np.bool_]]:
    """Pixels for vehicle-frame directions ``(..., 3)`` and a mask of rays inside the FOV.

    Pixels of rays outside the field of view are NaN.
    """
    d = np.asarray(rays, dtype=np.float64)
    if d.shape[-1:] != (3,):
        raise ShapeError(f"rays must have a trailing axis of 3, got shape {d.shape}")
    cam = calib.extrinsics.to_camera(d)
    lateral = np.hypot(cam[..., 0], cam[..., 1])
    if np.any((lateral == 0.0) & (cam[..., 2] == 0.0)):
        raise CameraDomainError("zero-length ray")
    intr = calib.intrinsics
    # atan2 keeps full precision near the optical axis, unlike arccos
    alpha = np.arctan2(lateral, cam[..., 2])
    inside = alpha <= intr.alpha_max
    radius = intr.polynomial(np.minimum(alpha, intr.alpha_max))
    phi = np.arctan2(cam[..., 1], cam[..., 0])
    u = intr.principal_point[0] + radius * np.cos(phi)
    v = intr.principal_point[1] + radius * np.sin(phi)
    pixels = np.stack([u, v], axis=-1)
    pixels[~inside] = np.nan
    return pixels, inside


def project_ray(ray: ArrayLike, calib: CameraCalibration) -> tuple[float, float] | None:
    """Pixel of a single vehicle-frame direction, or ``None`` outside the field of view."""
    pixels, inside = project_rays(np.asarray(ray, dtype=np.float64).reshape(3), calib)
    if not bool(inside):
        return None
    return float(pixels[0]), float(pixels[1])


# --------------------------------------------------------------------------------------
# Rig construction and IO
# --------------------------------------------------------------------------------------


def _rotation_z(angle: float) -> FloatArray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def look_extrinsics(
    position: Sequence[float],
    yaw: float,
    pitch: float,
    roll: float = 0.0,
) -> CameraExtrinsics:
    """Extrinsics of a camera at ``position`` looking along ``yaw``, tilted down by ``pitch``."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    forward = np.array([cp * cy, cp * sy, -sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(forward, right)
    rotation = _rotation_z(roll) @ np.stack([right, down, forward])
    center = np.asarray(position, dtype=np.float64)
    return CameraExtrinsics(rotation=rotation, translation=-rotation @ center)


def with_roll(calib: CameraCalibration, angle: float) -> CameraCalibration:
    """Calibration of the same camera rolled about its optical axis by ``angle``.

    A pixel offset ``d`` from the principal point of the original image maps to
    ``R(angle) d`` in the rolled image.
    """
    rz = _rotation_z(angle)
    ext = calib.extrinsics
    rolled = CameraExtrinsics(rotation=rz @ ext.rotation, translation=rz @ ext.translation)
    return CameraCalibration(intrinsics=calib.intrinsics, extrinsics=rolled, name=calib.name)


def validate_rig(rig: Sequence[CameraCalibration]) -> tuple[CameraCalibration, ...]:
    names = [c.name for c in rig]
    if len(set(names)) != len(names):
        raise CameraDomainError(f"rig camera names must be distinct, got {names}")
    return tuple(sorted(rig, key=lambda c: c.index))


def calibration_from_record(record: CameraRecord) -> CameraCalibration:
    intr = CameraIntrinsics(
        c=(record.c[0], record.c[1], record.c[2], record.c[3]),
        principal_point=(record.principal_point[0], record.principal_point[1]),
        image_size=(record.image_size[0], record.image_size[1]),
        alpha_max=record.alpha_max,
    )
    ext = CameraExtrinsics(
        rotation=np.asarray(record.rotation, dtype=np.float64).reshape(3, 3),
        translation=np.asarray(record.translation, dtype=np.float64),
    )
    return CameraCalibration(intrinsics=intr, extrinsics=ext, name=record.name)


def calibration_to_record(calib: CameraCalibration) -> CameraRecord:
    intr = calib.intrinsics
    return CameraRecord(
        name=calib.name,
        c=list(intr.c),
        principal_point=list(intr.principal_point),
        image_size=list(intr.image_size),
        alpha_max=intr.alpha_max,
        rotation=[float(x) for x in calib.extrinsics.rotation.reshape(-1)],
        translation=[float(x) for x in calib.extrinsics.translation],
    )


def load_rig(path: str | Path) -> tuple[CameraCalibration, ...]:
    rig_file = RigFile.model_validate_json(Path(path).read_text(encoding="utf-8"))
    return validate_rig([calibration_from_record(rec) for rec in rig_file.cameras])


def save_rig(
    path: str | Path, rig: Sequence[CameraCalibration], *, note: str | None = None
) -> None:
    rig_file = RigFile(note=note, cameras=[calibration_to_record(c) for c in rig])
    Path(path).write_text(rig_file.model_dump_json(indent=2), encoding="utf-8")


# --------------------------------------------------------------------------------------
# Input geometry and projection encodings
# --------------------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class InputGeometry:
    """Native image → top crop → resize to the network input size."""

    native_size: tuple[int, int]
    crop_top: int
    input_size: tuple[int, int]

    def __post_init__(self) -> None:
        if not 0 <= self.crop_top < self.native_size[1]:
            raise CameraDomainError(f"crop_top {self.crop_top} outside the native image height")

    @property
    def scale(self) -> tuple[float, float]:
        """Native pixels per input pixel along u and v."""
        width, height = self.native_size
        return width / self.input_size[0], (height - self.crop_top) / self.input_size[1]

    def to_native(self, pixels: ArrayLike) -> FloatArray:
        p = np.asarray(pixels, dtype=np.float64)
        sx, sy = self.scale
        return np.stack([p[..., 0] * sx, p[..., 1] * sy + self.crop_top], axis=-1)

    def from_native(self, pixels: ArrayLike) -> FloatArray:
        p = np.asarray(pixels, dtype=np.float64)
        sx, sy = self.scale
        return np.stack([p[..., 0] / sx, (p[..., 1] - self.crop_top) / sy], axis=-1)


def scale_top_crop(
    native_height: int, reference_px: int = 26, reference_height: int = 528
) -> int:
    """Top crop scaled from the reference (26 px at 528 px height) to another image height."""
    return round(reference_px * native_height / reference_height)


def build_projection_encoding(
    calib: CameraCalibration,
    endpoint_shape: tuple[int, int],
    crop_top: int,
    input_size: tuple[int, int] | None = None,
) -> ProjectionEncoding:
    """Vehicle-frame rays through the centres of an endpoint's feature cells.

    Cells tile the cropped (and resized) input evenly; ``input_size`` defaults to the
    cropped native size. Cell centres outside the valid circle are clamped onto it to keep a
    unit ray and flagged invalid.
    """
    rows, cols = endpoint_shape
    if rows <= 0 or cols <= 0:
        raise ShapeError(f"endpoint shape must be positive, got {endpoint_shape}")
    intr = calib.intrinsics
    width, height = intr.image_size
    size = input_size if input_size is not None else (width, height - crop_top)
    geometry = InputGeometry(native_size=(width, height), crop_top=crop_top, input_size=size)

    u = (np.arange(cols) + 0.5) * (size[0] / cols)
    v = (np.arange(rows) + 0.5) * (size[1] / rows)
    grid = np.stack(np.meshgrid(u, v, indexing="xy"), axis=-1)
    native = geometry.to_native(grid)

    offset = native - np.asarray(intr.principal_point)
    radius = np.hypot(offset[..., 0], offset[..., 1])
    valid = radius <= intr.radius_max
    shrink = np.where(valid, 1.0, intr.radius_max * (1.0 - 1e-12) / np.maximum(radius, 1e-12))
    clamped = np.asarray(intr.principal_point) + offset * shrink[..., None]
    clamped[..., 0] = np.clip(clamped[..., 0], 0.0, width)
    clamped[..., 1] = np.clip(clamped[..., 1], 0.0, height)
    rays = unproject_pixel(clamped, calib)
    rays = rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    rays.flags.writeable = False
    valid.flags.writeable = False
    return ProjectionEncoding(rays=rays, valid=valid, camera_index=calib.index)
