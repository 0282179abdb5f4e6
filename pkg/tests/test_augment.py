from __future__ import annotations

import math

import pytest
import torch

from fisheye_bev_parking.augment import (
    IDENTITY,
    BevTransform,
    ImageAugmentParams,
    apply_bev_augment,
    apply_image_augment,
    augmentation_record,
    roll_image,
    sample_bev_transform,
    sample_image_params,
    transform_features,
    transform_labels,
    transform_map,
    transform_seg_targets,
)
from fisheye_bev_parking.bev import bev_cell_centers, cell_index
from fisheye_bev_parking.camera import CameraCalibration, project_ray, unproject_pixel, with_roll
from fisheye_bev_parking.config import AugmentationConfig
from fisheye_bev_parking.models import PolygonLabel

SLOT = PolygonLabel(
    category="parking",
    corners=[(5.5, 4.25), (5.5, 1.75), (0.5, 1.75), (0.5, 4.25)],
    visibility=[True, False, True, True],
)


def _blob(center: tuple[float, float], sigma: float = 1.5, rows: int = 25) -> torch.Tensor:
    """Gaussian bump on the BEV grid around a metric point."""
    grid = bev_cell_centers(rows, 25.0)
    d2 = ((grid - torch.tensor(center, dtype=torch.float64)) ** 2).sum(dim=-1)
    return torch.exp(-d2 / (2 * sigma**2))[None]


def _metric_centroid(weights: torch.Tensor) -> torch.Tensor:
    grid = bev_cell_centers(weights.shape[-1], 25.0)
    w = weights[0] / weights[0].sum()
    return (w[..., None] * grid).sum(dim=(0, 1))


def _centroid(label: PolygonLabel) -> tuple[float, float]:
    xs, ys = zip(*label.corners, strict=True)
    return sum(xs) / 4, sum(ys) / 4


def test_bev_draws_are_reproducible_and_independent_per_sample() -> None:
    cfg = AugmentationConfig()
    a = sample_bev_transform(cfg, 5, step=3, slot=1)
    assert sample_bev_transform(cfg, 5, step=3, slot=1) == a
    draws = {sample_bev_transform(cfg, 5, step=3, slot=k) for k in range(20)}
    assert len(draws) > 1


def test_disabled_preset_draws_the_identity() -> None:
    cfg = AugmentationConfig(preset="none")
    for slot in range(10):
        t = sample_bev_transform(cfg, 1, step=0, slot=slot)
        assert t.is_identity
        assert not t.dropout


def test_enabling_yaw_leaves_the_flip_draws_alone() -> None:
    flip_only = AugmentationConfig(preset="bev_flip")
    with_yaw = AugmentationConfig(preset="bev_flip_yaw")
    for slot in range(30):
        a = sample_bev_transform(flip_only, 2, step=1, slot=slot)
        b = sample_bev_transform(with_yaw, 2, step=1, slot=slot)
        assert a.flip == b.flip
        assert a.yaw == 0.0
        assert abs(b.yaw) <= math.radians(22.5)


def test_quarter_turns_are_exact_multiples() -> None:
    cfg = AugmentationConfig(preset="bev_quarter_turns")
    yaws = [sample_bev_transform(cfg, 3, step=0, slot=k).yaw for k in range(200)]
    for yaw in yaws:
        assert yaw in (0.0, math.pi / 2, math.pi, 3 * math.pi / 2)
    turned = sum(yaw != 0.0 for yaw in yaws) / len(yaws)
    assert 0.45 < turned < 0.75


def test_identity_and_flip_maps_need_no_resampling() -> None:
    x = torch.rand(3, 25, 25, dtype=torch.float64)
    same, valid = transform_map(x, IDENTITY)
    assert same is x
    assert bool(valid.all())
    flipped, valid = transform_map(x, BevTransform(flip=True))
    assert torch.equal(flipped, torch.flip(x, dims=[-1]))
    assert bool(valid.all())


def test_quarter_turn_moves_a_cell_where_the_labels_go() -> None:
    x = torch.zeros(1, 25, 25, dtype=torch.float64)
    point = torch.tensor([4.0, 3.0], dtype=torch.float64)
    row, col, _ = cell_index(point, 25, 25.0)
    x[0, row, col] = 1.0
    t = BevTransform(yaw=math.pi / 2)
    out, valid = transform_map(x, t)
    moved = t.matrix() @ point
    new_row, new_col, inside = cell_index(moved, 25, 25.0)
    assert bool(inside)
    assert (int(new_row), int(new_col)) == (15, 8)
    assert float(out[0, new_row, new_col]) == pytest.approx(1.0, abs=1e-6)
    assert float(out.sum()) == pytest.approx(1.0, abs=1e-6)
    assert bool(valid[0, 12, 12])


@pytest.mark.parametrize("flip", [False, True])
def test_maps_and_labels_move_together(flip: bool) -> None:
    t = BevTransform(flip=flip, yaw=math.radians(30.0))
    center = _centroid(SLOT)
    out, _ = transform_map(_blob(center), t)
    (moved,) = transform_labels([SLOT], t)
    expected = torch.tensor(_centroid(moved), dtype=torch.float64)
    assert torch.allclose(_metric_centroid(out), expected, atol=0.05)
    assert torch.allclose(t.matrix() @ torch.tensor(center, dtype=torch.float64), expected)


def test_label_flip_keeps_clockwise_order_and_reorders_visibility() -> None:
    (flipped,) = transform_labels([SLOT], BevTransform(flip=True))
    assert flipped.category == "parking"
    assert flipped.visibility == [False, True, True, True]
    # the entry edge stays first: both its corners keep x = 5.5
    assert [p[0] for p in flipped.corners[:2]] == [5.5, 5.5]
    assert sorted(p[1] for p in flipped.corners) == [-4.25, -4.25, -1.75, -1.75]
    assert transform_labels([SLOT], IDENTITY) == [SLOT]


def test_seg_targets_stay_binary_and_report_the_padded_border() -> None:
    targets = torch.zeros(1, 4, 40, 40, dtype=torch.float64)
    targets[0, 0, 10:20, 12:30] = 1.0
    targets[0, 2] = torch.rand(40, 40, dtype=torch.float64)
    maps, valid = transform_seg_targets(targets, [BevTransform(yaw=math.radians(30.0))])
    assert maps.shape == (1, 4, 40, 40)
    assert valid.shape == (1, 1, 40, 40)
    masks = maps[0, :2]
    assert bool(((masks == 0.0) | (masks == 1.0)).all())
    assert not bool(valid[0, 0, 0, 0])
    assert bool(valid[0, 0, 20, 20])
    assert float(masks[0].sum()) > 0.0


def test_feature_dropout_zeroes_whole_channels() -> None:
    features = torch.ones(1, 64, 5, 5, dtype=torch.float64)
    t = BevTransform(dropout=True, dropout_seed=9)
    out = transform_features(features, [t], dropout_p=0.5)
    per_channel = out[0].flatten(1)
    for row in per_channel:
        assert set(row.tolist()) <= {0.0, 2.0}
        assert len(set(row.tolist())) == 1
    assert 10 < int((per_channel[:, 0] == 0.0).sum()) < 54
    assert torch.equal(transform_features(features, [t], dropout_p=0.5), out)
    assert torch.equal(transform_features(features, [t], dropout_p=0.5, train=False), features)


def test_apply_bev_augment_without_segmentation_targets() -> None:
    features = torch.rand(2, 4, 25, 25, dtype=torch.float64)
    transforms = [BevTransform(flip=True), IDENTITY]
    result = apply_bev_augment(features, None, [[SLOT], []], transforms)
    assert result.seg_targets is None and result.seg_valid is None
    assert torch.equal(result.features[0], torch.flip(features[0], dims=[-1]))
    assert torch.equal(result.features[1], features[1])
    assert result.labels[0][0].visibility == [False, True, True, True]
    assert result.labels[1] == []


def test_image_params_follow_the_preset() -> None:
    none = sample_image_params(AugmentationConfig(preset="none"), 4, 1, step=0, slot=0)
    assert none.rolls == (0.0,) * 4
    assert none.brightness == (1.0,) * 4
    assert none.noise_std == (0.0,) * 4
    cfg = AugmentationConfig(preset="image_only", roll_p=1.0, color_p=1.0)
    params = sample_image_params(cfg, 4, 1, step=0, slot=0)
    assert all(0.0 < abs(r) <= math.radians(10.0) for r in params.rolls)
    assert all(0.8 <= b <= 1.2 for b in params.brightness)
    assert params.noise_std == pytest.approx((0.02,) * 4)
    assert sample_image_params(cfg, 4, 1, step=0, slot=0) == params


def test_rolled_image_agrees_with_the_rolled_camera(rig: tuple[CameraCalibration, ...]) -> None:
    calib = rig[0]
    width, height = calib.intrinsics.image_size
    u0, v0 = calib.intrinsics.principal_point
    spot = (u0 + 20.0, v0 - 10.0)
    v, u = torch.meshgrid(
        torch.arange(height, dtype=torch.float64) + 0.5,
        torch.arange(width, dtype=torch.float64) + 0.5,
        indexing="ij",
    )
    bump = torch.exp(-((u - spot[0]) ** 2 + (v - spot[1]) ** 2) / (2 * 2.0**2))
    image = bump[None].expand(3, height, width).clone()
    angle = math.radians(15.0)
    rolled = roll_image(image, calib, angle)
    weights = rolled[0] / rolled[0].sum()
    centroid = (float((weights * u).sum()), float((weights * v).sum()))

    ray = unproject_pixel(spot, calib)
    expected = project_ray(ray, with_roll(calib, angle))
    assert expected is not None
    assert centroid == pytest.approx(expected, abs=0.1)
    assert roll_image(image, calib, 0.0) is image


def test_image_augment_rolls_cameras_and_keeps_range(rig: tuple[CameraCalibration, ...]) -> None:
    images = torch.rand(4, 3, 109, 128, dtype=torch.float64)
    same, calibs = apply_image_augment(images, rig, ImageAugmentParams.identity(4))
    assert torch.equal(same, images)
    assert calibs == list(rig)

    params = ImageAugmentParams(
        rolls=(0.1, 0.0, 0.0, 0.0),
        brightness=(1.2, 1.0, 0.9, 1.0),
        contrast=(1.0, 1.1, 1.0, 1.0),
        saturation=(1.0, 1.0, 0.8, 1.0),
        noise_std=(0.05, 0.0, 0.05, 0.0),
        noise_seed=4,
    )
    out, calibs = apply_image_augment(images, rig, params)
    assert out.shape == images.shape
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0
    assert calibs[0] is not rig[0]
    assert calibs[1] is rig[1]
    assert torch.equal(out[3], images[3])
    again, _ = apply_image_augment(images, rig, params)
    assert torch.equal(out, again)


def test_zero_probabilities_leave_the_images_untouched(
    rig: tuple[CameraCalibration, ...],
) -> None:
    cfg = AugmentationConfig(
        preset="bev_quarter_turns_yaw",
        flip_p=0.0,
        yaw_p=0.0,
        quarter_turn_p=0.0,
        roll_p=0.0,
        color_p=0.0,
        feature_dropout_p=0.0,
    )
    images = torch.full((4, 3, 109, 128), 0.5, dtype=torch.float64)
    for step in range(5):
        params = sample_image_params(cfg, 4, 2, step=step, slot=1)
        assert params.noise_std == (0.0,) * 4
        out, calibs = apply_image_augment(images, rig, params)
        assert torch.equal(out, images)
        assert all(a is b for a, b in zip(calibs, rig, strict=True))
        t = sample_bev_transform(cfg, 2, step, 1)
        assert t.is_identity and not t.dropout


def test_augmentation_record() -> None:
    t = BevTransform(flip=True, yaw=0.25, dropout=True)
    record = augmentation_record(7, "train/000003", t, ImageAugmentParams.identity(4))
    assert record.step == 7
    assert record.flip and record.feature_dropout
    assert record.yaw == pytest.approx(0.25)
    assert record.rolls == [0.0] * 4


def test_double_flip_restores_the_labels_exactly() -> None:
    flip = BevTransform(flip=True)
    car = PolygonLabel(
        category="vehicle", corners=[(-2.0, 3.1), (-2.0, 1.3), (-6.7, 1.3), (-6.7, 3.1)]
    )
    assert transform_labels(transform_labels([SLOT, car], flip), flip) == [SLOT, car]
