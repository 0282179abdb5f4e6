from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from fisheye_bev_parking.camera import CameraCalibration
from fisheye_bev_parking.config import RunConfig
from fisheye_bev_parking.dataset import (
    Dataset,
    build_sample,
    frame_id,
    generate_dataset,
    load_manifest,
    split_stats,
)
from fisheye_bev_parking.errors import DatasetIncompleteError
from fisheye_bev_parking.models import PolygonLabel


def test_samples_are_a_function_of_seed_and_index(
    tiny_config: RunConfig, rig: tuple[CameraCalibration, ...]
) -> None:
    a = build_sample(tiny_config, rig, "train", 1)
    b = build_sample(tiny_config, rig, "train", 1)
    assert a.frame_id == "train-00001"
    assert a.images.shape == (4, 3, 109, 128)
    assert a.images.dtype == np.float32
    np.testing.assert_array_equal(a.images, b.images)
    assert a.labels == b.labels
    other = build_sample(tiny_config, rig, "val", 1)
    assert not np.array_equal(a.images, other.images)


def test_generate_writes_frames_then_manifest(
    tiny_config: RunConfig, rig: tuple[CameraCalibration, ...], tmp_path: Path
) -> None:
    root = tmp_path / "data"
    manifest = generate_dataset(tiny_config, rig, root, workers=2)
    assert manifest.splits == {
        "train": [frame_id("train", i) for i in range(3)],
        "val": [frame_id("val", i) for i in range(2)],
    }
    assert manifest.stats["train"].frames == 3
    assert manifest.config_hash == tiny_config.config_hash()
    assert load_manifest(root) == manifest
    assert not list(root.rglob("*.tmp"))

    sidecar = json.loads((root / "val" / "val-00000" / "images" / "left.json").read_text())
    assert sidecar["shape"] == [3, 109, 128]
    assert sidecar["byte_order"] == "little"
    raw = (root / "val" / "val-00000" / "images" / "left.f32").read_bytes()
    assert len(raw) == 4 * 3 * 109 * 128

    dataset = Dataset(root)
    assert [c.name for c in dataset.rig] == ["front", "left", "rear", "right"]
    assert dataset.frames("val") == ["val-00000", "val-00001"]
    sample = dataset.sample("train-00002")
    expected = build_sample(tiny_config, rig, "train", 2)
    np.testing.assert_array_equal(sample.images, expected.images)
    assert sample.labels == expected.labels
    assert dataset.sample("train-00002") is sample


def test_worker_count_does_not_change_the_data(
    tiny_config: RunConfig, rig: tuple[CameraCalibration, ...], tmp_path: Path
) -> None:
    cfg = tiny_config.model_copy(
        update={"data": tiny_config.data.model_copy(update={"train_scenes": 2, "val_scenes": 0})}
    )
    generate_dataset(cfg, rig, tmp_path / "one", workers=1)
    generate_dataset(cfg, rig, tmp_path / "two", workers=2)
    for fid in ("train-00000", "train-00001"):
        one = (tmp_path / "one" / "train" / fid / "images" / "rear.f32").read_bytes()
        two = (tmp_path / "two" / "train" / fid / "images" / "rear.f32").read_bytes()
        assert one == two
        labels = (tmp_path / "one" / "train" / fid / "labels.json").read_text()
        assert labels == (tmp_path / "two" / "train" / fid / "labels.json").read_text()


def test_missing_manifest_means_incomplete(tmp_path: Path) -> None:
    (tmp_path / "train").mkdir()
    with pytest.raises(DatasetIncompleteError) as info:
        Dataset(tmp_path)
    assert info.value.exit_code == 2


def test_split_stats() -> None:
    slot = PolygonLabel(
        category="parking",
        corners=[(2.0, 1.0), (2.0, -1.0), (-2.0, -1.0), (-2.0, 1.0)],
        visibility=[True, True, False, False],
    )
    car = PolygonLabel(category="vehicle", corners=slot.corners)
    stats = split_stats([[slot, car], [slot], []])
    assert stats.frames == 3
    assert stats.parking_slots == 2
    assert stats.vehicles == 1
    assert stats.slots_per_frame == pytest.approx(2 / 3)
    assert stats.visible_corner_ratio == pytest.approx(0.5)
    assert split_stats([]).slots_per_frame == 0.0


def test_frame_cache_keeps_only_the_most_recent_frames(tiny_dataset: Dataset) -> None:
    dataset = Dataset(tiny_dataset.root, cache_size=2)
    first, second, third = (dataset.sample(fid) for fid in dataset.frames("train"))
    assert dataset.sample("train-00002") is third
    # train-00000 was evicted; reloading it evicts train-00001
    assert dataset.sample("train-00000") is not first
    assert dataset.sample("train-00002") is third
    assert dataset.sample("train-00001") is not second
    assert len(dataset._cache) == 2
