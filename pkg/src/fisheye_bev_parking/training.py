"""Training loop, batch assembly and inference over dataset frames.

Data order and every augmentation draw are pure functions of ``(seed, step, slot)``, so a
run resumed from a checkpoint replays the uninterrupted run exactly.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import Tensor

from .augment import (
    IDENTITY,
    BevTransform,
    ImageAugmentParams,
    apply_image_augment,
    augmentation_record,
    sample_bev_transform,
    sample_image_params,
    transform_features,
    transform_labels,
    transform_seg_targets,
)
from .camera import CameraCalibration
from .checkpoint import load_checkpoint, load_model_state, model_tensors, save_checkpoint
from .config import RunConfig
from .dataset import Dataset
from .errors import ConfigError, NonFiniteGradientError, NonFiniteLossError
from .heads import DetectionTargets, decode_detections, encode_targets
from .losses import LossReport, total_loss
from .models import AugmentationRecord, LossRecord, PolygonDetection, PolygonLabel
from .network import BevHook, EncodingBatch, ParkingPerceptionNet, encode_rigs, prepare_images
from .scenes import target_maps
from .tensor import AdamWStepper, generator_for, one_cycle_lr

logger = logging.getLogger(__name__)

LOSS_LOG = "train_loss.jsonl"
AUGMENTATION_LOG = "train_augmentations.jsonl"


def torch_dtype(precision: str) -> torch.dtype:
    return torch.float64 if precision == "float64" else torch.float32


def checkpoint_path(directory: Path, step: int) -> Path:
    return directory / f"step-{step:06d}.ckpt"


def latest_checkpoint(directory: Path) -> Path | None:
    found = sorted(directory.glob("step-*.ckpt"))
    return found[-1] if found else None


def sample_frame(seed: int, step: int, slot: int, batch_size: int, frames: int) -> int:
    """Index of the frame in ``slot`` of ``step``: each epoch is a seeded permutation."""
    epoch, offset = divmod(step * batch_size + slot, frames)
    order = torch.randperm(frames, generator=generator_for(seed, "order", epoch))
    return int(order[offset])


@dataclass(frozen=True, slots=True, eq=False)
class Batch:
    frame_ids: list[str]
    images: Tensor
    encoding: EncodingBatch
    labels: list[list[PolygonLabel]]
    det_targets: list[DetectionTargets]
    seg_targets: Tensor | None
    seg_valid: Tensor | None
    transforms: list[BevTransform]
    records: list[AugmentationRecord] = field(default_factory=list)


def assemble_batch(
    cfg: RunConfig,
    dataset: Dataset,
    frame_ids: Sequence[str],
    step: int = 0,
    *,
    augment: bool = False,
    dtype: torch.dtype = torch.float32,
) -> Batch:
    """Load, augment and encode frames; targets are encoded after the label transform."""
    model_cfg = cfg.model
    grid = model_cfg.bev
    images: list[Tensor] = []
    rigs: list[Sequence[CameraCalibration]] = []
    transforms: list[BevTransform] = []
    labels: list[list[PolygonLabel]] = []
    maps: list[Tensor] = []
    records: list[AugmentationRecord] = []
    cameras = len(dataset.rig)
    for slot, fid in enumerate(frame_ids):
        sample = dataset.sample(fid)
        raw = torch.from_numpy(sample.images).to(dtype)
        if augment:
            params = sample_image_params(cfg.augmentation, cameras, cfg.seed, step, slot)
            transform = sample_bev_transform(cfg.augmentation, cfg.seed, step, slot)
            raw, rig = apply_image_augment(raw, dataset.rig, params)
        else:
            params = ImageAugmentParams.identity(cameras)
            transform = IDENTITY
            rig = list(dataset.rig)
        images.append(raw)
        rigs.append(rig)
        transforms.append(transform)
        labels.append(transform_labels(sample.labels, transform))
        records.append(augmentation_record(step, fid, transform, params))
        if model_cfg.uses_segmentation:
            seg = target_maps(sample.labels, grid, cfg.loss.center_sigma_px)
            maps.append(torch.from_numpy(seg).to(dtype))

    seg_targets: Tensor | None = None
    seg_valid: Tensor | None = None
    if maps:
        seg_targets, seg_valid = transform_seg_targets(torch.stack(maps), transforms)
    return Batch(
        frame_ids=list(frame_ids),
        images=prepare_images(torch.stack(images), model_cfg.crop_top, model_cfg.input_size),
        encoding=encode_rigs(rigs, model_cfg, dtype),
        labels=labels,
        det_targets=[
            encode_targets(ls, grid, model_cfg.max_offset_m, dtype) for ls in labels
        ],
        seg_targets=seg_targets,
        seg_valid=seg_valid,
        transforms=transforms,
        records=records,
    )


def bev_hook(cfg: RunConfig, batch: Batch) -> BevHook | None:
    """Feature transform of a training batch, or ``None`` when every sample is untouched."""
    dropout_p = cfg.augmentation.feature_dropout_p
    if all(t.is_identity and not t.dropout for t in batch.transforms):
        return None

    def hook(bev: Tensor) -> Tensor:
        return transform_features(bev, batch.transforms, dropout_p, train=True)

    return hook


def batch_loss(
    model: ParkingPerceptionNet, cfg: RunConfig, batch: Batch, hook: BevHook | None = None
) -> LossReport:
    out = model(batch.images, batch.encoding, hook)
    return total_loss(
        out.segmentation,
        out.detection,
        batch.seg_targets,
        batch.det_targets,
        cfg.loss,
        cfg.model.bev,
        cfg.model.max_offset_m,
        seg_mask=batch.seg_valid,
    )


@dataclass(frozen=True, slots=True)
class TrainResult:
    start_step: int
    steps: int
    checkpoint: Path
    initial_loss: float | None
    final_loss: float | None


def _truncate_log(
    path: Path, keep_below: int, record: type[LossRecord] | type[AugmentationRecord]
) -> None:
    """Drop records at or after step ``keep_below`` so a resumed run appends seamlessly."""
    if not path.is_file():
        return
    kept = [
        line
        for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip() and record.model_validate_json(line).step < keep_below
    ]
    path.write_text("".join(f"{line}\n" for line in kept), encoding="utf-8")


def train(
    cfg: RunConfig,
    dataset: Dataset,
    model: ParkingPerceptionNet,
    *,
    checkpoint_dir: Path,
    report_dir: Path,
) -> TrainResult:
    """Run (or resume) training up to ``cfg.train.steps`` optimizer steps."""
    tc = cfg.train
    oc = tc.optimizer
    stepper = AdamWStepper(
        model.named_parameters(),
        lr=oc.lr_start,
        betas=oc.betas,
        weight_decay=oc.weight_decay,
        eps=oc.eps,
    )
    metadata = {"config_hash": cfg.config_hash(), "seed": cfg.seed}

    start = 0
    latest = latest_checkpoint(checkpoint_dir)
    if latest is not None:
        tensors, meta = load_checkpoint(latest)
        load_model_state(model, tensors, latest)
        start = int(meta.get("step", 0))
        stepper.load_state_tensors(tensors, start)
        logger.info("resuming from %s at step %d", latest, start)
    else:
        latest = checkpoint_path(checkpoint_dir, 0)
        save_checkpoint(latest, model_tensors(model), {**metadata, "step": 0})

    frames = dataset.frames("train")
    if tc.steps > start and not frames:
        raise ConfigError("the training split of the dataset is empty")

    report_dir.mkdir(parents=True, exist_ok=True)
    loss_log = report_dir / LOSS_LOG
    aug_log = report_dir / AUGMENTATION_LOG
    _truncate_log(loss_log, start, LossRecord)
    _truncate_log(aug_log, start, AugmentationRecord)

    model.train()
    dtype = next(model.parameters()).dtype
    initial: float | None = None
    final: float | None = None
    for step in range(start, tc.steps):
        ids = [
            frames[sample_frame(cfg.seed, step, slot, tc.batch_size, len(frames))]
            for slot in range(tc.batch_size)
        ]
        batch = assemble_batch(cfg, dataset, ids, step, augment=True, dtype=dtype)
        lr = one_cycle_lr(step, tc.steps, oc.lr_start, oc.lr_peak, oc.lr_end)
        stepper.zero_grad()
        try:
            report = batch_loss(model, cfg, batch, bev_hook(cfg, batch))
            report.total.backward()
            stepper.step(lr)
        except (NonFiniteLossError, NonFiniteGradientError) as exc:
            logger.error("aborting at step %d: %s; last good checkpoint is %s", step, exc, latest)
            raise

        record = report.record(step, lr)
        initial = record.total if initial is None else initial
        final = record.total
        with loss_log.open("a", encoding="utf-8") as fh:
            fh.write(record.model_dump_json() + "\n")
        if tc.log_augmentations:
            with aug_log.open("a", encoding="utf-8") as fh:
                for aug in batch.records:
                    fh.write(aug.model_dump_json() + "\n")
        if step % tc.log_every == 0:
            logger.info("step %d/%d lr %.2e loss %.4f", step + 1, tc.steps, lr, record.total)

        done = step + 1
        if done % tc.checkpoint_every == 0 or done == tc.steps:
            latest = checkpoint_path(checkpoint_dir, done)
            tensors = {**model_tensors(model), **stepper.state_tensors()}
            save_checkpoint(latest, tensors, {**metadata, "step": done})

    return TrainResult(
        start_step=start,
        steps=max(tc.steps, start),
        checkpoint=latest,
        initial_loss=initial,
        final_loss=final,
    )


def predict(
    model: ParkingPerceptionNet,
    cfg: RunConfig,
    dataset: Dataset,
    frame_ids: Sequence[str],
    batch_size: int = 8,
) -> list[list[PolygonDetection]]:
    """Decoded detections of every frame, without augmentation."""
    if model.detection is None:
        return [[] for _ in frame_ids]
    model.eval()
    dtype = next(model.parameters()).dtype
    out: list[list[PolygonDetection]] = []
    with torch.no_grad():
        for i in range(0, len(frame_ids), batch_size):
            batch = assemble_batch(cfg, dataset, frame_ids[i : i + batch_size], dtype=dtype)
            result = model(batch.images, batch.encoding)
            assert result.detection is not None
            for raw in result.detection:
                out.append(
                    decode_detections(
                        raw,
                        cfg.model.bev,
                        cfg.model.max_offset_m,
                        cfg.eval.confidence_threshold,
                        cfg.eval.nms_giou_threshold,
                    )
                )
    return out
