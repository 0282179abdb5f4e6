from __future__ import annotations

import pytest
import torch

from fisheye_bev_parking.bench import STAGES, run_bench, stage_timing
from fisheye_bev_parking.camera import CameraCalibration
from fisheye_bev_parking.config import RunConfig
from fisheye_bev_parking.dataset import build_sample
from fisheye_bev_parking.errors import ConfigError
from fisheye_bev_parking.network import EncodingBatch, build_model, encode_rigs, prepare_images


def _inputs(
    cfg: RunConfig, rig: tuple[CameraCalibration, ...]
) -> tuple[torch.Tensor, EncodingBatch]:
    sample = build_sample(cfg, rig, "bench", 0)
    images = torch.from_numpy(sample.images).to(torch.float64)[None]
    images = prepare_images(images, cfg.model.crop_top, cfg.model.input_size)
    return images, encode_rigs([rig], cfg.model, torch.float64)


def test_stage_timing() -> None:
    timing = stage_timing([1.0, 2.0, 3.0, 4.0])
    assert timing.mean_ms == pytest.approx(2.5)
    assert timing.p95_ms == pytest.approx(3.85)


def test_bench_times_every_stage(
    tiny_config: RunConfig, rig: tuple[CameraCalibration, ...]
) -> None:
    model = build_model(tiny_config.model, tiny_config.seed, torch.float64)
    images, encoding = _inputs(tiny_config, rig)
    report = run_bench(model, tiny_config, images, encoding)
    assert report.iterations == 2 and report.warmup == 1
    assert report.fps > 0
    assert set(report.stages) == set(STAGES)
    stage_sum = sum(t.mean_ms for t in report.stages.values())
    assert stage_sum <= report.total.mean_ms * 1.05
    assert report.config_hash == tiny_config.config_hash()


def test_bench_needs_an_iteration(
    tiny_config: RunConfig, rig: tuple[CameraCalibration, ...]
) -> None:
    cfg = tiny_config.model_copy(
        update={"bench": tiny_config.bench.model_copy(update={"iterations": 0})}
    )
    model = build_model(cfg.model, cfg.seed, torch.float64)
    images, encoding = _inputs(cfg, rig)
    with pytest.raises(ConfigError):
        run_bench(model, cfg, images, encoding)
