"""Structured records written to and read from disk."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator

Category = Literal["parking", "vehicle"]
CATEGORIES: tuple[Category, ...] = ("parking", "vehicle")

Point = tuple[float, float]


def _signed_area(corners: list[Point]) -> float:
    total = 0.0
    for i, (x0, y0) in enumerate(corners):
        x1, y1 = corners[(i + 1) % len(corners)]
        total += x0 * y1 - x1 * y0
    return 0.5 * total


class CameraRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: Literal["front", "left", "rear", "right"]
    c: list[float] = Field(min_length=4, max_length=4)
    principal_point: list[float] = Field(min_length=2, max_length=2)
    image_size: list[int] = Field(min_length=2, max_length=2)
    alpha_max: float = Field(gt=0)
    rotation: list[float] = Field(min_length=9, max_length=9)
    translation: list[float] = Field(min_length=3, max_length=3)


class RigFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    note: str | None = None
    cameras: list[CameraRecord] = Field(min_length=1, max_length=4)


class PolygonLabel(BaseModel):
    """Ground-truth quad in the vehicle frame.

    Corners run clockwise seen from above; corners 0-1 are the entry line of a parking
    slot or the front edge of a vehicle.
    """

    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    category: Category = Field(alias="class")
    corners: list[Point] = Field(min_length=4, max_length=4)
    visibility: list[bool] = Field(default_factory=lambda: [True] * 4, min_length=4, max_length=4)

    @field_validator("corners")
    @classmethod
    def _clockwise(cls, corners: list[Point]) -> list[Point]:
        if _signed_area(corners) > 0.0:
            raise ValueError("label corners must be ordered clockwise")
        return corners


class PolygonDetection(BaseModel):
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    category: Category = Field(alias="class")
    confidence: float = Field(ge=0.0, le=1.0)
    corners: list[Point] = Field(min_length=4, max_length=4)
    visibility: list[float] = Field(min_length=4, max_length=4)
    detection_id: int = Field(default=0, ge=0)

    @field_validator("visibility")
    @classmethod
    def _unit_interval(cls, values: list[float]) -> list[float]:
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("corner visibility must lie in [0, 1]")
        return values


class FrameDetections(BaseModel):
    """One line of the detection dump."""

    frame_id: str
    detections: list[PolygonDetection]


class FrameLabels(BaseModel):
    frame_id: str
    labels: list[PolygonLabel]


class ImageSidecar(BaseModel):
    camera: Literal["front", "left", "rear", "right"]
    shape: list[int] = Field(min_length=3, max_length=3)
    dtype: Literal["float32"] = "float32"
    byte_order: Literal["little"] = "little"


class SplitStats(BaseModel):
    frames: int = Field(ge=0)
    parking_slots: int = Field(ge=0)
    vehicles: int = Field(ge=0)
    slots_per_frame: float = Field(ge=0)
    vehicles_per_frame: float = Field(ge=0)
    visible_corner_ratio: float = Field(ge=0, le=1)


class DatasetManifest(BaseModel):
    """Written last by ``generate``; its presence marks a complete dataset."""

    format: Literal["fisheye-bev-parking/dataset-v1"] = "fisheye-bev-parking/dataset-v1"
    seed: int
    config_hash: str
    calibration: str
    splits: dict[str, list[str]]
    stats: dict[str, SplitStats]


class TermRecord(BaseModel):
    value: float
    weighted: float


class LossRecord(BaseModel):
    step: int = Field(ge=0)
    lr: float
    total: float
    terms: dict[str, TermRecord]


class AugmentationRecord(BaseModel):
    step: int
    sample: str
    flip: bool
    yaw: float
    rolls: list[float]
    feature_dropout: bool


class ClassMetrics(BaseModel):
    true_positives: int = Field(ge=0)
    false_positives: int = Field(ge=0)
    false_negatives: int = Field(ge=0)
    precision: float = Field(ge=0, le=1)
    recall: float = Field(ge=0, le=1)
    f1: float = Field(ge=0, le=1)
    distance_error_cm: float | None = Field(default=None, ge=0)


class MetricsReport(BaseModel):
    config_hash: str
    checkpoint: str | None = None
    frames: int = Field(ge=0)
    per_class: dict[str, ClassMetrics]
    overall: ClassMetrics
    macro_f1: float = Field(ge=0, le=1)
    visibility_accuracy: float | None = Field(default=None, ge=0, le=1)


class StageTiming(BaseModel):
    mean_ms: float = Field(ge=0)
    p95_ms: float = Field(ge=0)


class BenchReport(BaseModel):
    config_hash: str
    iterations: int = Field(ge=1)
    warmup: int = Field(ge=0)
    fps: float = Field(ge=0)
    total: StageTiming
    stages: dict[str, StageTiming]
