"""Training augmentations applied consistently to BEV features, target maps and labels.

BEV transforms act on the projected feature map after the bottleneck. Labels are moved
exactly with :func:`polygon.transform` and re-encoded afterwards; dense maps are resampled
with ``grid_sample`` (bilinear for features and heatmaps, nearest for binary masks) and
carry a validity mask for the zero-padded border.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from . import polygon
from .camera import CameraCalibration, with_roll
from .config import AugmentationConfig
from .models import AugmentationRecord, PolygonLabel
from .tensor import channel_dropout, generator_for, seed_for

# swaps metric (x, y) and grid_sample (v, u) axes
_SWAP = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)


@dataclass(frozen=True, slots=True)
class BevTransform:
    """Mirror ``y -> -y`` (if ``flip``), then rotate by ``yaw`` about the vehicle origin."""

    flip: bool = False
    yaw: float = 0.0
    dropout: bool = False
    dropout_seed: int = 0

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.yaw == 0.0

    @property
    def is_pure_flip(self) -> bool:
        return self.flip and self.yaw == 0.0

    def matrix(self) -> Tensor:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = torch.tensor([[c, -s], [s, c]], dtype=torch.float64)
        mirror = torch.diag(torch.tensor([1.0, -1.0 if self.flip else 1.0], dtype=torch.float64))
        return rot @ mirror


IDENTITY = BevTransform()


def sample_bev_transform(cfg: AugmentationConfig, seed: int, step: int, slot: int) -> BevTransform:
    """Draw the transform of one training sample from its own stream.

    The same number of uniforms is consumed whatever is enabled, so toggling one
    augmentation never shifts the draws of another.
    """
    u = torch.rand(5, generator=generator_for(seed, "bev", step, slot), dtype=torch.float64)
    flip = cfg.enabled("flip") and float(u[0]) < cfg.flip_p
    yaw = 0.0
    if cfg.enabled("quarter_turns"):
        turns = math.floor(float(u[1]) / cfg.quarter_turn_p) + 1 if cfg.quarter_turn_p > 0 else 4
        if turns <= 3:
            yaw += turns * math.pi / 2.0
    if cfg.enabled("yaw") and float(u[2]) < cfg.yaw_p:
        yaw += math.radians((2.0 * float(u[3]) - 1.0) * cfg.yaw_deg)
    dropout = cfg.enabled("feature_dropout") and cfg.feature_dropout_p > 0.0
    return BevTransform(
        flip=flip,
        yaw=yaw,
        dropout=dropout,
        dropout_seed=seed_for(seed, "dropout", step, slot) & 0x7FFF_FFFF_FFFF_FFFF,
    )


def _sampling_grid(t: BevTransform, size: int, dtype: torch.dtype) -> Tensor:
    """Source coordinates ``(1, size, size, 2)`` for every output pixel."""
    inverse = torch.linalg.inv(t.matrix())
    affine = _SWAP @ inverse @ _SWAP
    theta = torch.zeros(1, 2, 3, dtype=torch.float64)
    theta[0, :, :2] = affine
    return F.affine_grid(theta, [1, 1, size, size], align_corners=False).to(dtype)


def transform_map(x: Tensor, t: BevTransform, mode: str = "bilinear") -> tuple[Tensor, Tensor]:
    """Resample a ``(C, H, W)`` BEV map; returns the map and its ``(1, H, W)`` validity."""
    ones = torch.ones(1, *x.shape[-2:], dtype=torch.bool, device=x.device)
    if t.is_identity:
        return x, ones
    if t.is_pure_flip:
        return torch.flip(x, dims=[-1]), ones
    grid = _sampling_grid(t, x.shape[-1], x.dtype).to(x.device)
    out = F.grid_sample(x[None], grid, mode=mode, padding_mode="zeros", align_corners=False)
    inside = (grid[0].abs() <= 1.0).all(dim=-1)
    return out[0], inside[None]


def transform_features(
    features: Tensor,
    transforms: Sequence[BevTransform],
    dropout_p: float = 0.0,
    train: bool = True,
) -> Tensor:
    """Per-sample transform plus channel dropout of a ``(B, C, R, R)`` feature map."""
    out: list[Tensor] = []
    for x, t in zip(features, transforms, strict=True):
        y, _ = transform_map(x, t, mode="bilinear")
        if t.dropout and train and dropout_p > 0.0:
            gen = torch.Generator().manual_seed(t.dropout_seed)
            y = channel_dropout(y, dropout_p, train=True, generator=gen)
        out.append(y)
    return torch.stack(out)


def transform_seg_targets(
    targets: Tensor,
    transforms: Sequence[BevTransform],
) -> tuple[Tensor, Tensor]:
    """``(B, 4, S, S)`` masks (nearest) and heatmaps (bilinear) plus ``(B, 1, S, S)`` validity."""
    maps: list[Tensor] = []
    valid: list[Tensor] = []
    for x, t in zip(targets, transforms, strict=True):
        masks, inside = transform_map(x[0:2], t, mode="nearest")
        heat, _ = transform_map(x[2:4], t, mode="bilinear")
        maps.append(torch.cat([masks, heat]))
        valid.append(inside)
    return torch.stack(maps), torch.stack(valid)


def transform_labels(labels: Sequence[PolygonLabel], t: BevTransform) -> list[PolygonLabel]:
    """Exact label transform; a mirror reorders corners and visibility flags together."""
    if t.is_identity:
        return list(labels)
    out: list[PolygonLabel] = []
    for label in labels:
        corners = polygon.transform(
            torch.tensor(label.corners, dtype=torch.float64), t.yaw, flip=t.flip
        )
        visibility = list(label.visibility)
        if t.flip:
            visibility = [visibility[i] for i in polygon.FLIP_ORDER]
        out.append(
            PolygonLabel(
                category=label.category,
                corners=[(float(x), float(y)) for x, y in corners.tolist()],
                visibility=visibility,
            )
        )
    return out


@dataclass(frozen=True, slots=True)
class AugmentedBev:
    features: Tensor
    seg_targets: Tensor | None
    seg_valid: Tensor | None
    labels: list[list[PolygonLabel]]


def apply_bev_augment(
    features: Tensor,
    seg_targets: Tensor | None,
    labels: Sequence[Sequence[PolygonLabel]],
    transforms: Sequence[BevTransform],
    dropout_p: float = 0.0,
) -> AugmentedBev:
    """Apply one sampled transform per sample to features, target maps and labels."""
    maps, valid = (None, None)
    if seg_targets is not None:
        maps, valid = transform_seg_targets(seg_targets, transforms)
    return AugmentedBev(
        features=transform_features(features, transforms, dropout_p),
        seg_targets=maps,
        seg_valid=valid,
        labels=[transform_labels(ls, t) for ls, t in zip(labels, transforms, strict=True)],
    )


@dataclass(frozen=True, slots=True)
class ImageAugmentParams:
    """Per-camera roll and photometric parameters for one sample."""

    rolls: tuple[float, ...]
    brightness: tuple[float, ...]
    contrast: tuple[float, ...]
    saturation: tuple[float, ...]
    noise_std: tuple[float, ...]
    noise_seed: int

    @classmethod
    def identity(cls, cameras: int) -> ImageAugmentParams:
        ones = (1.0,) * cameras
        zeros = (0.0,) * cameras
        return cls(zeros, ones, ones, ones, zeros, 0)


def sample_image_params(
    cfg: AugmentationConfig,
    cameras: int,
    seed: int,
    step: int,
    slot: int,
) -> ImageAugmentParams:
    gen = generator_for(seed, "image", step, slot)
    u = torch.rand(cameras, 6, generator=gen, dtype=torch.float64)
    rolls: list[float] = []
    brightness: list[float] = []
    contrast: list[float] = []
    saturation: list[float] = []
    noise: list[float] = []
    for row in u.tolist():
        roll = 0.0
        if cfg.enabled("roll") and row[0] < cfg.roll_p:
            roll = math.radians((2.0 * row[1] - 1.0) * cfg.roll_deg)
        rolls.append(roll)
        jitter = cfg.enabled("color_noise") and row[2] < cfg.color_p
        brightness.append(1.0 + (2.0 * row[3] - 1.0) * cfg.brightness if jitter else 1.0)
        contrast.append(1.0 + (2.0 * row[4] - 1.0) * cfg.contrast if jitter else 1.0)
        saturation.append(1.0 + (2.0 * row[5] - 1.0) * cfg.saturation if jitter else 1.0)
        # noise goes with the colour draw
        noise.append(cfg.noise_std if jitter else 0.0)
    return ImageAugmentParams(
        rolls=tuple(rolls),
        brightness=tuple(brightness),
        contrast=tuple(contrast),
        saturation=tuple(saturation),
        noise_std=tuple(noise),
        noise_seed=seed_for(seed, "noise", step, slot) & 0x7FFF_FFFF_FFFF_FFFF,
    )


def roll_image(image: Tensor, calib: CameraCalibration, angle: float) -> Tensor:
    """Rotate a ``(3, H, W)`` image about the principal point by ``angle``.

    Matches :func:`camera.with_roll`: original offset ``d`` lands at ``R(angle) d``.
    """
    if angle == 0.0:
        return image
    height, width = image.shape[-2:]
    u0, v0 = calib.intrinsics.principal_point
    dtype = torch.float64
    v, u = torch.meshgrid(
        torch.arange(height, dtype=dtype) + 0.5,
        torch.arange(width, dtype=dtype) + 0.5,
        indexing="ij",
    )
    c, s = math.cos(angle), math.sin(angle)
    du, dv = u - u0, v - v0
    src_u = u0 + c * du + s * dv
    src_v = v0 - s * du + c * dv
    grid = torch.stack([2.0 * src_u / width - 1.0, 2.0 * src_v / height - 1.0], dim=-1)
    out = F.grid_sample(
        image[None], grid[None].to(image.dtype), mode="bilinear", padding_mode="zeros",
        align_corners=False,
    )
    return out[0]


def apply_image_augment(
    images: Tensor,
    calibs: Sequence[CameraCalibration],
    params: ImageAugmentParams,
) -> tuple[Tensor, list[CameraCalibration]]:
    """Roll each camera's ``(3, H, W)`` image and extrinsics together, then jitter colours."""
    out: list[Tensor] = []
    rolled: list[CameraCalibration] = []
    gen = torch.Generator().manual_seed(params.noise_seed)
    for k, (image, calib) in enumerate(zip(images, calibs, strict=True)):
        angle = params.rolls[k]
        x = roll_image(image, calib, angle)
        rolled.append(with_roll(calib, angle) if angle != 0.0 else calib)
        if params.brightness[k] != 1.0 or params.contrast[k] != 1.0 or params.saturation[k] != 1.0:
            x = x * params.brightness[k]
            mean = x.mean()
            x = (x - mean) * params.contrast[k] + mean
            gray = x.mean(dim=0, keepdim=True)
            x = (gray + (x - gray) * params.saturation[k]).clamp(0.0, 1.0)
        if params.noise_std[k] > 0.0:
            noise = torch.randn(x.shape, generator=gen, dtype=x.dtype) * params.noise_std[k]
            x = (x + noise).clamp(0.0, 1.0)
        out.append(x)
    return torch.stack(out), rolled


def augmentation_record(
    step: int,
    sample: str,
    bev: BevTransform,
    image: ImageAugmentParams,
) -> AugmentationRecord:
    return AugmentationRecord(
        step=step,
        sample=sample,
        flip=bev.flip,
        yaw=bev.yaw,
        rolls=list(image.rolls),
        feature_dropout=bev.dropout,
    )
