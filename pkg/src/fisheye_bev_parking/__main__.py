"""CLI entrypoint."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

import torch
from pydantic import ValidationError

from .bench import run_bench
from .camera import load_rig
from .checkpoint import load_checkpoint, load_model_state
from .config import RunConfig, resolve_config
from .dataset import MANIFEST, Dataset, build_sample, generate_dataset, load_manifest
from .errors import AcceptanceError, ConfigError, ParkingPerceptionError
from .evaluation import acceptance_failures, evaluate
from .models import FrameDetections, PolygonDetection
from .network import ParkingPerceptionNet, build_model, encode_rigs, prepare_images
from .overlay import render_overlay
from .settings import Settings
from .training import latest_checkpoint, predict, torch_dtype, train

logger = logging.getLogger("fisheye_bev_parking")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fisheye-bev-parking",
        description="Fisheye BEV parking perception: data generation, training and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("generate", "render the synthetic dataset"),
        ("train", "train (or resume) a model"),
        ("eval", "evaluate a checkpoint"),
        ("bench", "time forward passes"),
        ("inspect", "show the resolved config, dataset and checkpoint"),
    ):
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--config", required=True, type=Path)
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        if name in ("eval", "bench", "inspect"):
            cmd.add_argument("--checkpoint", type=Path, default=None)
        if name == "eval":
            cmd.add_argument(
                "--detections",
                type=Path,
                default=None,
                help="score a detections.jsonl dump instead of running the model",
            )
        if name == "inspect":
            cmd.add_argument("--schema", action="store_true", help="print the config JSON schema")
    return parser


def _report_dir(cfg: RunConfig, settings: Settings) -> Path:
    return settings.report_dir if settings.report_dir is not None else cfg.paths.reports


def _load_model(cfg: RunConfig, checkpoint: Path | None, required: bool) -> ParkingPerceptionNet:
    model = build_model(cfg.model, cfg.seed, torch_dtype(cfg.precision))
    path = checkpoint if checkpoint is not None else latest_checkpoint(cfg.paths.checkpoints)
    if path is None:
        if required:
            raise ConfigError(f"no checkpoint given and none found in {cfg.paths.checkpoints}")
        logger.warning("no checkpoint found; using freshly initialised weights")
        return model
    tensors, _ = load_checkpoint(path)
    load_model_state(model, tensors, path)
    logger.info("loaded %s", path)
    return model


def cmd_generate(cfg: RunConfig, settings: Settings) -> None:
    rig = load_rig(cfg.paths.calibration)
    manifest = generate_dataset(cfg, rig, cfg.paths.dataset, workers=settings.num_threads)
    counts = ", ".join(f"{k}={len(v)}" for k, v in manifest.splits.items())
    logger.info("dataset written to %s (%s)", cfg.paths.dataset, counts)


def cmd_train(cfg: RunConfig, settings: Settings) -> None:
    dataset = Dataset(cfg.paths.dataset)
    model = build_model(cfg.model, cfg.seed, torch_dtype(cfg.precision))
    result = train(
        cfg,
        dataset,
        model,
        checkpoint_dir=cfg.paths.checkpoints,
        report_dir=_report_dir(cfg, settings),
    )
    logger.info("training finished at step %d; checkpoint %s", result.steps, result.checkpoint)


def _read_detections(path: Path, frame_ids: Sequence[str]) -> list[list[PolygonDetection]]:
    if not path.is_file():
        raise ConfigError(f"detections file {path} not found")
    found: dict[str, list[PolygonDetection]] = {}
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                record = FrameDetections.model_validate_json(line)
                found[record.frame_id] = record.detections
    extra = found.keys() - set(frame_ids)
    if extra:
        logger.warning("ignoring %d frames outside the eval split", len(extra))
    # frames missing from the dump have no detections
    return [found.get(fid, []) for fid in frame_ids]


def cmd_eval(
    cfg: RunConfig, settings: Settings, checkpoint: Path | None, detections: Path | None = None
) -> None:
    dataset = Dataset(cfg.paths.dataset)
    frame_ids = dataset.frames(cfg.eval.split)
    reports = _report_dir(cfg, settings)
    reports.mkdir(parents=True, exist_ok=True)
    used: Path | None = None
    if detections is not None:
        predictions = _read_detections(detections, frame_ids)
    else:
        model = _load_model(cfg, checkpoint, required=True)
        predictions = predict(model, cfg, dataset, frame_ids, cfg.train.batch_size)
        with (reports / "detections.jsonl").open("w", encoding="utf-8") as fh:
            for fid, dets in zip(frame_ids, predictions, strict=True):
                record = FrameDetections(frame_id=fid, detections=dets)
                fh.write(record.model_dump_json(by_alias=True))
                fh.write("\n")
        used = checkpoint if checkpoint is not None else latest_checkpoint(cfg.paths.checkpoints)
    labels = [dataset.sample(fid).labels for fid in frame_ids]

    report = evaluate(
        list(zip(predictions, labels, strict=True)),
        cfg.eval,
        config_hash=cfg.config_hash(),
        checkpoint=None if used is None else str(used),
        workers=settings.num_threads,
    )
    (reports / "metrics.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
    frames = list(zip(frame_ids, predictions, labels, strict=True))
    for fid, dets, gt in frames[: cfg.eval.overlays]:
        render_overlay(reports / "overlays" / f"{fid}.png", cfg.model.bev, gt, dets, title=fid)

    failures = acceptance_failures(report, cfg.eval.acceptance)
    if failures:
        raise AcceptanceError(failures=failures)


def cmd_bench(cfg: RunConfig, settings: Settings, checkpoint: Path | None) -> None:
    dtype = torch_dtype(cfg.precision)
    model = _load_model(cfg, checkpoint, required=False)
    rig = load_rig(cfg.paths.calibration)
    sample = build_sample(cfg, rig, "bench", 0)
    images = torch.from_numpy(sample.images).to(dtype)[None]
    images = prepare_images(images, cfg.model.crop_top, cfg.model.input_size)
    encoding = encode_rigs([rig], cfg.model, dtype)
    report = run_bench(model, cfg, images, encoding)
    reports = _report_dir(cfg, settings)
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "bench.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")


def cmd_inspect(cfg: RunConfig, checkpoint: Path | None, schema: bool) -> None:
    if schema:
        print(json.dumps(RunConfig.model_json_schema(by_alias=True), indent=2))
        return
    print(f"config hash: {cfg.config_hash()}")
    print(cfg.model_dump_json(indent=2, by_alias=True))
    if (cfg.paths.dataset / MANIFEST).is_file():
        manifest = load_manifest(cfg.paths.dataset)
        for split, stats in manifest.stats.items():
            print(
                f"{split}: {stats.frames} frames, {stats.slots_per_frame:.1f} slots and "
                f"{stats.vehicles_per_frame:.1f} vehicles per frame, "
                f"{stats.visible_corner_ratio:.0%} visible slot corners"
            )
    else:
        print(f"no complete dataset at {cfg.paths.dataset}")
    path = checkpoint if checkpoint is not None else latest_checkpoint(cfg.paths.checkpoints)
    if path is None:
        return
    tensors, meta = load_checkpoint(path)
    print(f"checkpoint {path} (step {meta.get('step')})")
    total = 0
    for name in sorted(tensors):
        if not name.startswith("model/"):
            continue
        shape = tuple(tensors[name].shape)
        total += tensors[name].numel()
        print(f"  {name.removeprefix('model/'):<60} {shape}")
    print(f"  {total} parameters")


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    settings = Settings()
    logging.basicConfig(
        level=settings.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    torch.set_num_threads(settings.num_threads)
    try:
        cfg = resolve_config(args.config, overrides=args.override, seed=args.seed)
        match args.command:
            case "generate":
                cmd_generate(cfg, settings)
            case "train":
                cmd_train(cfg, settings)
            case "eval":
                cmd_eval(cfg, settings, args.checkpoint, args.detections)
            case "bench":
                cmd_bench(cfg, settings, args.checkpoint)
            case "inspect":
                cmd_inspect(cfg, args.checkpoint, args.schema)
    except ParkingPerceptionError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except ValidationError as exc:
        logger.error("invalid record: %s", exc)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
