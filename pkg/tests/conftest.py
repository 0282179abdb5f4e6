from __future__ import annotations

from pathlib import Path

import pytest

from fisheye_bev_parking.camera import CameraCalibration, load_rig
from fisheye_bev_parking.config import RunConfig, resolve_config
from fisheye_bev_parking.dataset import Dataset, generate_dataset

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def rig() -> tuple[CameraCalibration, ...]:
    return load_rig(CONFIGS / "synthetic_rig.json")


@pytest.fixture
def tiny_config(tmp_path: Path) -> RunConfig:
    """The tiny config with every output path under ``tmp_path``."""
    return resolve_config(
        CONFIGS / "tiny.json",
        overrides=[
            f"paths.dataset={tmp_path / 'data'}",
            f"paths.checkpoints={tmp_path / 'checkpoints'}",
            f"paths.reports={tmp_path / 'reports'}",
        ],
    )


@pytest.fixture
def tiny_dataset(tiny_config: RunConfig, rig: tuple[CameraCalibration, ...]) -> Dataset:
    generate_dataset(tiny_config, rig, tiny_config.paths.dataset)
    return Dataset(tiny_config.paths.dataset)
