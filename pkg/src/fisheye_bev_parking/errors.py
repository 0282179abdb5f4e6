"""Domain errors."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import ClassVar


class ParkingPerceptionError(Exception):
    """Base class for every error raised by this package."""

    exit_code: ClassVar[int] = 1


class ConfigError(ParkingPerceptionError):
    """Invalid configuration, detected before any work starts."""

    exit_code = 2


class CameraDomainError(ParkingPerceptionError, ValueError):
    """An angle, radius or pixel lies outside the camera model's domain."""


class ShapeError(ParkingPerceptionError, ValueError):
    """Operands with incompatible shapes."""


class SceneGenerationError(ParkingPerceptionError):
    """A scene layout cannot be realised inside the configured world."""


@dataclass(frozen=True, slots=True)
class ConvergenceError(ParkingPerceptionError):
    """Raised when an iterative solver stops without meeting its tolerance."""

    exit_code: ClassVar[int] = 3

    solver: str
    iterations: int
    residual: float

    def __str__(self) -> str:
        return (
            f"{self.solver} did not converge after {self.iterations} iterations "
            f"(residual {self.residual:.3e})"
        )


@dataclass(frozen=True, slots=True)
class NonFiniteGradientError(ParkingPerceptionError):
    """Raised when a parameter gradient contains NaN or inf before an optimizer step."""

    exit_code: ClassVar[int] = 3

    parameter: str
    step: int

    def __str__(self) -> str:
        return f"non-finite gradient for parameter {self.parameter!r} at step {self.step}"


@dataclass(frozen=True, slots=True)
class NonFiniteLossError(ParkingPerceptionError):
    """Raised when a loss term evaluates to NaN or inf."""

    exit_code: ClassVar[int] = 3

    term: str

    def __str__(self) -> str:
        return f"loss term {self.term!r} is not finite"


@dataclass(frozen=True, slots=True)
class DatasetIncompleteError(ParkingPerceptionError):
    """Raised when a dataset directory has no manifest (generation did not finish)."""

    exit_code: ClassVar[int] = 2

    path: str

    def __str__(self) -> str:
        return f"dataset at {self.path} has no manifest; regenerate it before training"


@dataclass(frozen=True, slots=True)
class CheckpointMismatchError(ParkingPerceptionError):
    """Raised when checkpoint tensors do not match the configured model."""

    exit_code: ClassVar[int] = 2

    path: str
    mismatches: Sequence[str]

    def __str__(self) -> str:
        listed = "; ".join(self.mismatches)
        return f"checkpoint {self.path} does not match the model: {listed}"


@dataclass(frozen=True, slots=True)
class AcceptanceError(ParkingPerceptionError):
    """Raised when evaluation metrics fall below configured acceptance thresholds."""

    exit_code: ClassVar[int] = 4

    failures: Sequence[str]

    def __str__(self) -> str:
        return "acceptance thresholds not met: " + "; ".join(self.failures)
