"""Run configuration: one validated JSON document drives every command."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

AugmentationPreset = Literal[
    "none",
    "image_only",
    "bev_dropout",
    "bev_flip",
    "bev_flip_yaw",
    "bev_quarter_turns",
    "bev_quarter_turns_yaw",
]

AugmentationKind = Literal["color_noise", "roll", "feature_dropout", "flip", "yaw", "quarter_turns"]

# each ablation row adds to the one before it
PRESET_AUGMENTATIONS: dict[str, frozenset[str]] = {
    "none": frozenset(),
    "image_only": frozenset({"color_noise", "roll"}),
    "bev_dropout": frozenset({"color_noise", "roll", "feature_dropout"}),
    "bev_flip": frozenset({"color_noise", "roll", "feature_dropout", "flip"}),
    "bev_flip_yaw": frozenset({"color_noise", "roll", "feature_dropout", "flip", "yaw"}),
    "bev_quarter_turns": frozenset(
        {"color_noise", "roll", "feature_dropout", "flip", "quarter_turns"}
    ),
    "bev_quarter_turns_yaw": frozenset(
        {"color_noise", "roll", "feature_dropout", "flip", "quarter_turns", "yaw"}
    ),
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PathsConfig(_Strict):
    dataset: Path = Path("data/desk")
    checkpoints: Path = Path("runs/desk/checkpoints")
    reports: Path = Path("runs/desk/reports")
    calibration: Path = Path("configs/synthetic_rig.json")


class BevGridSpec(_Strict):
    rows: int = Field(default=25, ge=1)
    cols: int = Field(default=25, ge=1)
    extent_m: float = Field(default=25.0, gt=0)
    seg_upsamplings: int = Field(default=3, ge=0, le=5)

    @model_validator(mode="after")
    def _square_cells(self) -> BevGridSpec:
        if self.rows != self.cols:
            raise ValueError("the BEV grid must be square")
        return self

    @property
    def cell_size(self) -> float:
        return self.extent_m / self.rows

    @property
    def half_extent(self) -> float:
        return self.extent_m / 2.0

    @property
    def seg_size(self) -> int:
        return self.rows * 2**self.seg_upsamplings


class EndpointConfig(_Strict):
    stride: int = Field(ge=2, le=64)
    channels: int = Field(ge=1)

    @model_validator(mode="after")
    def _power_of_two(self) -> EndpointConfig:
        if self.stride & (self.stride - 1):
            raise ValueError(f"endpoint stride must be a power of two, got {self.stride}")
        return self


class AttentionConfig(_Strict):
    heads: int = Field(default=4, ge=1)
    head_channels: int = Field(default=32, ge=1)
    mlp_ratio: int = Field(default=2, ge=1)

    @property
    def channels(self) -> int:
        return self.heads * self.head_channels


MODEL_SIZE_PRESETS: dict[str, tuple[EndpointConfig, EndpointConfig]] = {
    "small": (EndpointConfig(stride=8, channels=64), EndpointConfig(stride=32, channels=128)),
    "large_like": (EndpointConfig(stride=4, channels=48), EndpointConfig(stride=16, channels=96)),
}


class ModelConfig(_Strict):
    size: Literal["small", "large_like", "custom"] = "small"
    input_size: tuple[int, int] = (128, 104)
    crop_top: int = Field(default=5, ge=0)
    stem_channels: int = Field(default=16, ge=1)
    endpoints: tuple[EndpointConfig, EndpointConfig] | None = None
    attention: AttentionConfig = Field(default_factory=AttentionConfig)
    bev: BevGridSpec = Field(default_factory=BevGridSpec)
    embedding_hidden: int = Field(default=64, ge=1)
    seg_channels: tuple[int, ...] = (64, 32, 16)
    detection_blocks: int = Field(default=3, ge=1)
    max_offset_m: float = Field(default=6.0, gt=0)
    activation: Literal["relu", "gelu"] = "relu"
    tasks: Literal["detection", "segmentation", "multi"] = "multi"

    @model_validator(mode="after")
    def _resolve_endpoints(self) -> ModelConfig:
        if self.endpoints is None:
            if self.size == "custom":
                raise ValueError("model.size 'custom' requires explicit endpoints")
            self.endpoints = MODEL_SIZE_PRESETS[self.size]
        first, second = self.endpoints
        if first.stride >= second.stride:
            raise ValueError("the first endpoint stride must be smaller than the second")
        width, height = self.input_size
        if width % first.stride or height % first.stride:
            raise ValueError(
                f"input size {self.input_size} is not divisible by stride {first.stride}"
            )
        if width < second.stride or height < second.stride:
            raise ValueError(f"input size {self.input_size} is smaller than stride {second.stride}")
        if len(self.seg_channels) != self.bev.seg_upsamplings:
            raise ValueError("seg_channels needs one entry per segmentation upsampling")
        return self

    @property
    def endpoint_configs(self) -> tuple[EndpointConfig, EndpointConfig]:
        assert self.endpoints is not None
        return self.endpoints

    @property
    def endpoint_shapes(self) -> tuple[tuple[int, int], tuple[int, int]]:
        """``(rows, cols)`` of each endpoint; extents floor."""
        width, height = self.input_size
        first, second = self.endpoint_configs
        return (
            (height // first.stride, width // first.stride),
            (height // second.stride, width // second.stride),
        )

    @property
    def bev_channels(self) -> int:
        return self.attention.channels

    @property
    def uses_segmentation(self) -> bool:
        return self.tasks in ("segmentation", "multi")

    @property
    def uses_detection(self) -> bool:
        return self.tasks in ("detection", "multi")


class LossWeights(_Strict):
    seg_binary: float = Field(default=1.0, ge=0)
    seg_center: float = Field(default=1e-1, ge=0)
    polygon_giou: float = Field(default=5e-2, ge=0)
    objectness: float = Field(default=7.5e-1, ge=0)
    class_: float = Field(default=6.25e-3, ge=0, alias="class")
    corner_distance: float = Field(default=5e-2, ge=0)
    corner_visibility: float = Field(default=3e-3, ge=0)

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    def as_dict(self) -> dict[str, float]:
        return {
            "seg_binary": self.seg_binary,
            "seg_center": self.seg_center,
            "polygon_giou": self.polygon_giou,
            "objectness": self.objectness,
            "class": self.class_,
            "corner_distance": self.corner_distance,
            "corner_visibility": self.corner_visibility,
        }


class LossConfig(_Strict):
    weights: LossWeights = Field(default_factory=LossWeights)
    focal_gamma: float = Field(default=2.0, ge=0)
    focal_alpha: float = Field(default=0.25, ge=0, le=1)
    center_sigma_px: float = Field(default=2.0, gt=0)


class AugmentationConfig(_Strict):
    preset: AugmentationPreset = "bev_flip_yaw"
    flip_p: float = Field(default=0.5, ge=0, le=1)
    yaw_deg: float = Field(default=22.5, ge=0, le=180)
    yaw_p: float = Field(default=0.9, ge=0, le=1)
    quarter_turn_p: float = Field(default=0.2, ge=0, le=1 / 3)
    feature_dropout_p: float = Field(default=0.5, ge=0, lt=1)
    roll_deg: float = Field(default=10.0, ge=0, le=45)
    roll_p: float = Field(default=0.9, ge=0, le=1)
    color_p: float = Field(default=0.5, ge=0, le=1)
    brightness: float = Field(default=0.2, ge=0, le=1)
    contrast: float = Field(default=0.2, ge=0, le=1)
    saturation: float = Field(default=0.2, ge=0, le=1)
    noise_std: float = Field(default=0.02, ge=0, le=1)
    top_crop_reference_px: int = Field(default=26, ge=0)
    top_crop_reference_height: int = Field(default=528, ge=1)

    def enabled(self, kind: AugmentationKind) -> bool:
        return kind in PRESET_AUGMENTATIONS[self.preset]


class OptimizerConfig(_Strict):
    lr_start: float = Field(default=1.5e-4, gt=0)
    lr_peak: float = Field(default=3e-4, gt=0)
    lr_end: float = Field(default=1.5e-5, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = Field(default=0.01, ge=0)
    eps: float = Field(default=1e-8, gt=0)


class TrainConfig(_Strict):
    steps: int = Field(default=10_000, ge=0)
    batch_size: int = Field(default=8, ge=1)
    checkpoint_every: int = Field(default=500, ge=1)
    log_every: int = Field(default=10, ge=1)
    log_augmentations: bool = False
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)


class SceneConfig(_Strict):
    """Sampling ranges for the procedural parking scenes."""

    layout: Literal["perpendicular", "parallel", "mixed", "random"] = "random"
    perpendicular_slot: tuple[float, float] = (2.5, 5.0)
    parallel_slot: tuple[float, float] = (6.0, 2.5)
    slots_per_row: tuple[int, int] = (4, 8)
    occupancy: float = Field(default=0.4, ge=0, le=1)
    vehicle_length: tuple[float, float] = (4.0, 4.8)
    vehicle_width: tuple[float, float] = (1.7, 1.9)
    vehicle_height: tuple[float, float] = (1.4, 1.6)
    aisle_width: float = Field(default=6.0, gt=0)
    marking_width: float = Field(default=0.15, gt=0)
    world_radius: float = Field(default=40.0, gt=0)
    ego_offset_m: float = Field(default=1.0, ge=0)
    ego_yaw_deg: float = Field(default=8.0, ge=0, le=90)
    max_outside_fraction: float = Field(default=0.7, ge=0, le=1)
    supersample: int = Field(default=2, ge=1, le=4)

    @model_validator(mode="after")
    def _ordered_ranges(self) -> SceneConfig:
        for name in ("slots_per_row", "vehicle_length", "vehicle_width", "vehicle_height"):
            low, high = getattr(self, name)
            if low > high or low <= 0:
                raise ValueError(f"{name} must be a positive (min, max) range")
        return self


class DataConfig(_Strict):
    train_scenes: int = Field(default=256, ge=0)
    val_scenes: int = Field(default=64, ge=0)
    scene: SceneConfig = Field(default_factory=SceneConfig)


class AcceptanceConfig(_Strict):
    min_f1: float | None = Field(default=None, ge=0, le=1)
    max_distance_cm: float | None = Field(default=None, ge=0)
    min_visibility_accuracy: float | None = Field(default=None, ge=0, le=1)


class EvalConfig(_Strict):
    split: Literal["train", "val"] = "val"
    confidence_threshold: float = Field(default=0.10, ge=0, le=1)
    nms_giou_threshold: float = Field(default=0.3, ge=-1, le=1)
    match_iou: float = Field(default=0.5, gt=0, le=1)
    overlays: int = Field(default=4, ge=0)
    acceptance: AcceptanceConfig = Field(default_factory=AcceptanceConfig)


class BenchConfig(_Strict):
    warmup: int = Field(default=3, ge=0)
    iterations: int = Field(default=20, ge=0)


class RunConfig(_Strict):
    """Everything a command needs besides environment settings."""

    seed: int = Field(default=0, ge=0)
    precision: Literal["float32", "float64"] = "float32"
    paths: PathsConfig = Field(default_factory=PathsConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    augmentation: AugmentationConfig = Field(default_factory=AugmentationConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def apply_override(raw: dict[str, Any], assignment: str) -> None:
    """Apply ``a.b.c=value`` to a raw config mapping; the value is parsed as JSON if possible."""
    key, sep, text = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    try:
        value: Any = json.loads(text)
    except json.JSONDecodeError:
        value = text
    parts = key.split(".")
    node = raw
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {key!r}: {part!r} is not a section")
        node = child
    node[parts[-1]] = value


def resolve_config(
    path: str | Path,
    *,
    overrides: list[str] | None = None,
    seed: int | None = None,
) -> RunConfig:
    """Load, override and validate a run config. Relative paths resolve against the file."""
    source = Path(path)
    try:
        raw = json.loads(source.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {source}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {source} must hold a JSON object")
    for assignment in overrides or []:
        apply_override(raw, assignment)
    if seed is not None:
        raw["seed"] = seed
    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {source}:\n{exc}") from exc
    return _anchor_paths(config, source.parent)


def _anchor_paths(config: RunConfig, base: Path) -> RunConfig:
    def anchor(p: Path) -> Path:
        return p if p.is_absolute() else (base / p)

    paths = config.paths
    anchored = PathsConfig(
        dataset=anchor(paths.dataset),
        checkpoints=anchor(paths.checkpoints),
        reports=anchor(paths.reports),
        calibration=anchor(paths.calibration),
    )
    return config.model_copy(update={"paths": anchored})

