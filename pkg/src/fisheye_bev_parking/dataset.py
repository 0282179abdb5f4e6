"""Synthetic dataset on disk.

Layout::

    <root>/calibration.json
    <root>/<split>/<frame_id>/images/<camera>.f32   raw planar float32, little-endian
    <root>/<split>/<frame_id>/images/<camera>.json  ImageSidecar
    <root>/<split>/<frame_id>/labels.json           FrameLabels
    <root>/manifest.json                            written last
"""

from __future__ import annotations

import logging
import os
from collections import OrderedDict
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .camera import CameraCalibration, load_rig, save_rig
from .config import RunConfig
from .errors import DatasetIncompleteError
from .models import DatasetManifest, FrameLabels, ImageSidecar, PolygonLabel, SplitStats
from .render import render_rig
from .scenes import SceneSpec, derive_labels, generate_scene
from .tensor import seed_for

logger = logging.getLogger(__name__)

SPLITS = ("train", "val")
MANIFEST = "manifest.json"
CALIBRATION = "calibration.json"


@dataclass(frozen=True, slots=True, eq=False)
class SceneSample:
    frame_id: str
    images: NDArray[np.float32]
    labels: list[PolygonLabel]


def frame_id(split: str, index: int) -> str:
    return f"{split}-{index:05d}"


def build_sample(
    cfg: RunConfig, rig: Sequence[CameraCalibration], split: str, index: int
) -> SceneSample:
    """Generate, render and label one scene; a pure function of the config seed and index."""
    fid = frame_id(split, index)
    seed = seed_for(cfg.seed, "scene", split, index)
    spec = SceneSpec(config=cfg.data.scene, seed=seed, frame_id=fid)
    world = generate_scene(spec)
    images = render_rig(world, rig, cfg.data.scene.supersample)
    labels = derive_labels(
        world,
        rig,
        cfg.model.bev,
        max_outside_fraction=cfg.data.scene.max_outside_fraction,
        crop_top=cfg.model.crop_top,
    )
    return SceneSample(frame_id=fid, images=images, labels=labels)


def _write_json(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_sample(
    root: Path, split: str, sample: SceneSample, rig: Sequence[CameraCalibration]
) -> None:
    frame_dir = root / split / sample.frame_id
    image_dir = frame_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    for calib, image in zip(rig, sample.images, strict=True):
        image.astype("<f4").tofile(image_dir / f"{calib.name}.f32")
        sidecar = ImageSidecar(camera=calib.name, shape=list(image.shape))  # type: ignore[arg-type]
        _write_json(image_dir / f"{calib.name}.json", sidecar.model_dump_json(indent=2))
    record = FrameLabels(frame_id=sample.frame_id, labels=sample.labels)
    _write_json(frame_dir / "labels.json", record.model_dump_json(indent=2, by_alias=True))


def split_stats(labels: Sequence[Sequence[PolygonLabel]]) -> SplitStats:
    frames = len(labels)
    slots = [label for frame in labels for label in frame if label.category == "parking"]
    vehicles = sum(1 for frame in labels for label in frame if label.category == "vehicle")
    corners = [flag for label in slots for flag in label.visibility]
    return SplitStats(
        frames=frames,
        parking_slots=len(slots),
        vehicles=vehicles,
        slots_per_frame=len(slots) / frames if frames else 0.0,
        vehicles_per_frame=vehicles / frames if frames else 0.0,
        visible_corner_ratio=sum(corners) / len(corners) if corners else 0.0,
    )


def generate_dataset(
    cfg: RunConfig,
    rig: Sequence[CameraCalibration],
    root: Path,
    workers: int = 1,
) -> DatasetManifest:
    """Render every split into ``root``; the manifest is written only once all frames exist."""
    root.mkdir(parents=True, exist_ok=True)
    (root / MANIFEST).unlink(missing_ok=True)
    save_rig(root / CALIBRATION, rig, note="synthetic rig used to render this dataset")

    counts = {"train": cfg.data.train_scenes, "val": cfg.data.val_scenes}
    splits: dict[str, list[str]] = {}
    stats: dict[str, SplitStats] = {}
    for split in SPLITS:

        def render_one(index: int, split: str = split) -> list[PolygonLabel]:
            sample = build_sample(cfg, rig, split, index)
            write_sample(root, split, sample, rig)
            return sample.labels

        with ThreadPoolExecutor(max_workers=workers) as pool:
            labels = list(pool.map(render_one, range(counts[split])))
        splits[split] = [frame_id(split, i) for i in range(counts[split])]
        stats[split] = split_stats(labels)
        logger.info(
            "rendered %d %s frames (%.1f slots, %.1f vehicles per frame)",
            counts[split],
            split,
            stats[split].slots_per_frame,
            stats[split].vehicles_per_frame,
        )

    manifest = DatasetManifest(
        seed=cfg.seed,
        config_hash=cfg.config_hash(),
        calibration=CALIBRATION,
        splits=splits,
        stats=stats,
    )
    _write_json(root / MANIFEST, manifest.model_dump_json(indent=2))
    return manifest


def load_manifest(root: Path) -> DatasetManifest:
    path = root / MANIFEST
    if not path.is_file():
        raise DatasetIncompleteError(path=str(root))
    return DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))


def read_images(frame_dir: Path, rig: Sequence[CameraCalibration]) -> NDArray[np.float32]:
    images: list[NDArray[np.float32]] = []
    for calib in rig:
        image_dir = frame_dir / "images"
        sidecar = ImageSidecar.model_validate_json(
            (image_dir / f"{calib.name}.json").read_text(encoding="utf-8")
        )
        raw = np.fromfile(image_dir / f"{calib.name}.f32", dtype="<f4")
        images.append(raw.reshape(sidecar.shape).astype(np.float32))
    return np.stack(images)


def read_labels(frame_dir: Path) -> list[PolygonLabel]:
    text = (frame_dir / "labels.json").read_text(encoding="utf-8")
    record = FrameLabels.model_validate_json(text)
    return record.labels


class Dataset:
    """Read access to a complete dataset, with a bounded in-memory frame cache."""

    def __init__(self, root: Path, cache_size: int = 256) -> None:
        self.root = root
        self.manifest = load_manifest(root)
        self.rig = load_rig(root / self.manifest.calibration)
        self.cache_size = cache_size
        self._cache: OrderedDict[str, SceneSample] = OrderedDict()

    def frames(self, split: str) -> list[str]:
        return list(self.manifest.splits.get(split, []))

    def sample(self, fid: str) -> SceneSample:
        cached = self._cache.get(fid)
        if cached is not None:
            self._cache.move_to_end(fid)
            return cached
        frame_dir = self.root / fid.rsplit("-", 1)[0] / fid
        cached = SceneSample(
            frame_id=fid,
            images=read_images(frame_dir, self.rig),
            labels=read_labels(frame_dir),
        )
        if self.cache_size > 0:
            self._cache[fid] = cached
            # least recently used frames go first
            while len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return cached
