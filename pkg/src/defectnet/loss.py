"""Combined segmentation/classification loss and distance-transform pixel weights."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .errors import NonFiniteLossError, ScheduleError, ShapeError

# Mixing factor used when the per-epoch schedule is switched off: both losses
# stay active for the whole run.
STATIC_LAMBDA = 0.5

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class MixSchedule:
    total_epochs: int
    delta: float
    dynamic_enabled: bool = True

    def __post_init__(self) -> None:
        if self.total_epochs < 1:
            raise ScheduleError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if not self.delta >= 0:
            raise ScheduleError(f"delta must be >= 0, got {self.delta}")


@dataclass(frozen=True)
class WeightMask:
    weights: np.ndarray
    w_pos: float
    p: float


@dataclass(frozen=True)
class LossBreakdown:
    seg_loss: float
    cls_loss: float
    lam: float
    total: float


def lambda_at(epoch: int, schedule: MixSchedule) -> float:
    """Segmentation share of the combined loss at ``epoch``.

    Falls linearly from 1 at epoch 0 to 0 at ``total_epochs``. With the
    schedule disabled the share is the constant :data:`STATIC_LAMBDA`.
    """
    if not 0 <= epoch <= schedule.total_epochs:
        raise ScheduleError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    if not schedule.dynamic_enabled:
        return STATIC_LAMBDA
    return 1.0 - epoch / schedule.total_epochs


def _is_finite(value: float | torch.Tensor) -> bool:
    if isinstance(value, torch.Tensor):
        return bool(torch.isfinite(value).all())
    return math.isfinite(value)


def total_loss(seg_loss, cls_loss, lam: float, delta: float):
    """``lam * seg_loss + delta * (1 - lam) * cls_loss``.

    Works on Python floats and on scalar tensors (keeping the autograd graph).

    Raises:
        NonFiniteLossError: any input or the result is NaN/inf.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    for name, value in (("seg_loss", seg_loss), ("cls_loss", cls_loss)):
        if not _is_finite(value):
            raise NonFiniteLossError(f"{name} is not finite")
    total = lam * seg_loss + delta * (1.0 - lam) * cls_loss
    if not _is_finite(total):
        raise NonFiniteLossError("total loss is not finite")
    return total


def segmentation_loss(
    seg_output_map: torch.Tensor,
    target_mask: torch.Tensor,
    weight_mask: torch.Tensor | WeightMask,
) -> torch.Tensor:
    """Weighted per-pixel binary cross-entropy, averaged over all pixels.

    The denominator is the pixel count, not the weight sum.
    """
    if isinstance(weight_mask, WeightMask):
        weight_mask = torch.as_tensor(weight_mask.weights)
    target = torch.as_tensor(target_mask).to(seg_output_map.dtype)
    weights = torch.as_tensor(weight_mask).to(seg_output_map.dtype)
    if seg_output_map.shape != target.shape or target.shape != weights.shape:
        raise ShapeError(
            "logits, target and weights must share a shape, got "
            f"{tuple(seg_output_map.shape)}, {tuple(target.shape)}, {tuple(weights.shape)}"
        )
    per_pixel = F.binary_cross_entropy_with_logits(seg_output_map, target, reduction="none")
    return (weights * per_pixel).mean()


def classification_loss(cls_logit: torch.Tensor, label) -> torch.Tensor:
    """Binary cross-entropy of ``sigmoid(cls_logit)``; batch mean for 1-d input."""
    target = torch.as_tensor(label, dtype=cls_logit.dtype).reshape(cls_logit.shape)
    return F.binary_cross_entropy_with_logits(cls_logit, target)


def compute_weight_mask(
    target_mask: np.ndarray, w_pos: float, p: float, dt_enabled: bool = True
) -> WeightMask:
    """Per-pixel loss weights for a binary target mask.

    Negative pixels get weight 1. A positive pixel gets
    ``w_pos * (D / D_max) ** p`` where ``D`` is its Euclidean distance to the
    nearest negative pixel and ``D_max`` is the largest ``D`` inside its
    8-connected positive region. With ``dt_enabled=False``, or when the mask
    has no negative pixel at all, every positive pixel gets ``w_pos``.
    """
    if w_pos <= 0:
        raise ValueError(f"w_pos must be positive, got {w_pos}")
    if p < 0:
        raise ValueError(f"p must be non-negative, got {p}")
    positive = np.asarray(target_mask) > 0
    weights = np.ones(positive.shape, dtype=np.float64)
    if not positive.any():
        return WeightMask(weights, float(w_pos), float(p))
    if not dt_enabled or positive.all():
        weights[positive] = w_pos
        return WeightMask(weights, float(w_pos), float(p))

    dist = ndimage.distance_transform_edt(positive)
    labels, n_regions = ndimage.label(positive, structure=_EIGHT_CONNECTED)
    region_max = ndimage.maximum(dist, labels=labels, index=np.arange(1, n_regions + 1))
    norm = dist[positive] / np.asarray(region_max)[labels[positive] - 1]
    weights[positive] = w_pos * norm**p
    return WeightMask(weights, float(w_pos), float(p))


def save_weight_mask_png(mask: WeightMask, path: str | Path) -> None:
    """Write ``mask`` as 8-bit grayscale with ``w_pos`` mapped to 255."""
    scaled = np.clip(mask.weights / mask.w_pos, 0.0, 1.0) * 255.0
    Image.fromarray(np.round(scaled).astype(np.uint8)).save(Path(path))
