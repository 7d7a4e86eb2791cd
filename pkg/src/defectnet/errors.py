"""Exception types shared across the package."""

from __future__ import annotations


class DefectNetError(Exception):
    """Base class for all package errors."""


class ConfigError(DefectNetError, ValueError):
    """Invalid model, training or run configuration."""


class ShapeError(DefectNetError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class DataError(DefectNetError):
    """Dataset content is missing, unreadable or self-contradictory."""


class ScheduleError(DefectNetError, ValueError):
    """Epoch index outside the loss-mixing schedule."""


class MetricError(DefectNetError, ValueError):
    """Metric is undefined for the given labels."""


class NonFiniteLossError(DefectNetError, FloatingPointError):
    """A loss term became NaN or infinite."""


class TrainingAborted(DefectNetError, RuntimeError):
    """Training stopped on a non-finite loss.

    Attributes:
        epoch: Zero-based epoch index where the failure happened.
        step: Zero-based optimizer step inside that epoch.
    """

    def __init__(self, epoch: int, step: int, detail: str = "") -> None:
        self.epoch = epoch
        self.step = step
        msg = f"non-finite loss at epoch {epoch}, step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class CheckpointError(DefectNetError):
    """Checkpoint file is unreadable or incompatible."""
