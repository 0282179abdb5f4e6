"""Throughput harness: timed forward passes split into pipeline stages."""

from __future__ import annotations

import logging
import time
from collections.abc import Sequence

import numpy as np
import torch
from torch import Tensor

from .config import RunConfig
from .errors import ConfigError
from .heads import decode_detections
from .models import BenchReport, StageTiming
from .network import EncodingBatch, ParkingPerceptionNet

logger = logging.getLogger(__name__)

STAGES = ("backbone", "attention", "heads", "decode")


def stage_timing(samples_ms: Sequence[float]) -> StageTiming:
    values = np.asarray(samples_ms, dtype=np.float64)
    return StageTiming(mean_ms=float(values.mean()), p95_ms=float(np.percentile(values, 95)))


def _timed_pass(
    model: ParkingPerceptionNet, cfg: RunConfig, images: Tensor, encoding: EncodingBatch
) -> tuple[float, dict[str, float]]:
    times: dict[str, float] = {}
    start = time.perf_counter()
    t0 = start
    features = model.extract_features(images)
    t1 = time.perf_counter()
    times["backbone"] = t1 - t0
    bev = model.project_to_bev(features, encoding)
    t2 = time.perf_counter()
    times["attention"] = t2 - t1
    _, det = model.run_heads(bev)
    t3 = time.perf_counter()
    times["heads"] = t3 - t2
    if det is not None:
        for raw in det:
            decode_detections(
                raw,
                cfg.model.bev,
                cfg.model.max_offset_m,
                cfg.eval.confidence_threshold,
                cfg.eval.nms_giou_threshold,
            )
    t4 = time.perf_counter()
    times["decode"] = t4 - t3
    return (t4 - start) * 1e3, {k: v * 1e3 for k, v in times.items()}


def run_bench(
    model: ParkingPerceptionNet,
    cfg: RunConfig,
    images: Tensor,
    encoding: EncodingBatch,
) -> BenchReport:
    """Warm up, then time ``cfg.bench.iterations`` forward passes of one batch."""
    bc = cfg.bench
    if bc.iterations < 1:
        raise ConfigError("bench needs at least one measured iteration")
    model.eval()
    totals: list[float] = []
    stages: dict[str, list[float]] = {name: [] for name in STAGES}
    with torch.no_grad():
        for _ in range(bc.warmup):
            _timed_pass(model, cfg, images, encoding)
        for _ in range(bc.iterations):
            total, parts = _timed_pass(model, cfg, images, encoding)
            totals.append(total)
            for name, value in parts.items():
                stages[name].append(value)
    total_timing = stage_timing(totals)
    frames = images.shape[0]
    report = BenchReport(
        config_hash=cfg.config_hash(),
        iterations=bc.iterations,
        warmup=bc.warmup,
        fps=1e3 * frames / total_timing.mean_ms if total_timing.mean_ms > 0 else 0.0,
        total=total_timing,
        stages={name: stage_timing(values) for name, values in stages.items()},
    )
    logger.info("bench: %.1f fps, %.2f ms per pass", report.fps, total_timing.mean_ms)
    return report
