"""Two-stage segmentation + classification network.

The segmentation stage maps an image to a reduced-resolution feature volume
and a single-channel defect logit map. The classification stage reads both
and emits one defect logit per image. Two optional gradient stops cut the
classification loss off from the segmentation parameters:

* ``grad_stop_shortcuts``: the global max/avg summaries of the output map
  that feed the final linear unit are constants in backward.
* ``grad_stop_seg_features``: every tensor flowing from the segmentation
  stage into the classification stage is a constant in backward.

Stops live in the forward graph (``detach``), never as post-hoc gradient
masking, so optimizer state is never touched.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError, ConfigError, ShapeError

VALID_DOWNSAMPLE = (2, 4, 8, 16)
CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 1
    base_channels: int = 32
    downsample_factor: int = 8
    grad_stop_shortcuts: bool = True
    grad_stop_seg_features: bool = True

    def __post_init__(self) -> None:
        if self.downsample_factor not in VALID_DOWNSAMPLE:
            raise ConfigError(
                f"downsample_factor must be one of {VALID_DOWNSAMPLE}, "
                f"got {self.downsample_factor}"
            )
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")


@dataclass
class ForwardOutputs:
    """Tensors produced by one forward pass over a batch.

    ``seg_features`` is (N, C, H/d, W/d), ``seg_output_map`` is (N, 1, H/d, W/d)
    raw logits, ``cls_logit`` is (N,).
    """

    seg_features: torch.Tensor
    seg_output_map: torch.Tensor
    cls_logit: torch.Tensor


def _conv_block(in_ch: int, out_ch: int, kernel: int) -> list[nn.Module]:
    # GroupNorm(1, C): per-sample statistics, identical in train and eval.
    return [
        nn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2),
        nn.GroupNorm(1, out_ch),
        nn.ReLU(inplace=True),
    ]


class SegmentationNet(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        b = config.base_channels
        n_pools = int(math.log2(config.downsample_factor))
        layers: list[nn.Module] = []
        in_ch = config.input_channels
        for block_idx, (n_convs, out_ch) in enumerate(((2, b), (3, 2 * b), (4, 4 * b))):
            for _ in range(n_convs):
                layers += _conv_block(in_ch, out_ch, 5)
                in_ch = out_ch
            if block_idx < n_pools:
                layers.append(nn.MaxPool2d(2))
        for _ in range(max(0, n_pools - 3)):
            layers.append(nn.MaxPool2d(2))
        self.body = nn.Sequential(*layers)
        self.wide = nn.Sequential(*_conv_block(in_ch, 32 * b, 15))
        self.head = nn.Conv2d(32 * b, 1, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        features = self.wide(self.body(x))
        return features, self.head(features)


class ClassificationNet(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        in_ch = 32 * config.base_channels + 1
        layers: list[nn.Module] = [nn.MaxPool2d(2, ceil_mode=True)]
        for out_ch in (8, 16, 32):
            layers += _conv_block(in_ch, out_ch, 5)
            in_ch = out_ch
        self.body = nn.Sequential(*layers)
        # global max + avg of the conv output, global max + avg of the output map
        self.fc = nn.Linear(2 * in_ch + 2, 1)

    def forward(
        self,
        seg_features: torch.Tensor,
        seg_output_map: torch.Tensor,
        *,
        stop_shortcuts: bool,
        stop_features: bool,
    ) -> torch.Tensor:
        feats = seg_features.detach() if stop_features else seg_features
        omap = seg_output_map.detach() if stop_features else seg_output_map
        x = self.body(torch.cat([feats, omap], dim=1))
        shortcut = seg_output_map.detach() if (stop_shortcuts or stop_features) else seg_output_map
        pooled = torch.cat(
            [
                torch.amax(x, dim=(2, 3)),
                torch.mean(x, dim=(2, 3)),
                torch.amax(shortcut, dim=(2, 3)),
                torch.mean(shortcut, dim=(2, 3)),
            ],
            dim=1,
        )
        return self.fc(pooled).squeeze(1)


class TwoStageModel(nn.Module):
    """Segmentation stage followed by a classification stage.

    Parameters are registered under the ``segmentation.`` and
    ``classification.`` prefixes, so the two parameter sets are disjoint by
    construction.
    """

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.segmentation = SegmentationNet(config)
        self.classification = ClassificationNet(config)

    def set_gradient_stops(self, shortcuts: bool, seg_features: bool) -> None:
        self.config = replace(
            self.config, grad_stop_shortcuts=shortcuts, grad_stop_seg_features=seg_features
        )

    def forward(self, x: torch.Tensor) -> ForwardOutputs:
        if x.ndim != 4:
            raise ShapeError(f"expected an (N, C, H, W) batch, got shape {tuple(x.shape)}")
        d = self.config.downsample_factor
        h, w = x.shape[-2:]
        if h % d or w % d:
            raise ShapeError(f"spatial size {h}x{w} is not divisible by downsample factor {d}")
        if x.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"expected {self.config.input_channels} input channels, got {x.shape[1]}"
            )
        features, omap = self.segmentation(x)
        logit = self.classification(
            features,
            omap,
            stop_shortcuts=self.config.grad_stop_shortcuts,
            stop_features=self.config.grad_stop_seg_features,
        )
        return ForwardOutputs(features, omap, logit)

    def segmentation_parameters(self) -> dict[str, nn.Parameter]:
        return {f"segmentation.{n}": p for n, p in self.segmentation.named_parameters()}

    def classification_parameters(self) -> dict[str, nn.Parameter]:
        return {f"classification.{n}": p for n, p in self.classification.named_parameters()}


def build_model(config: ModelConfig, seed: int = 0) -> TwoStageModel:
    """Build a model whose initial weights depend only on ``config`` and ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = TwoStageModel(config)
    return model


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """Convert an H x W x C (or H x W) array to a (C, H, W) float32 tensor."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError(f"expected an H x W x C image, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def forward(model: TwoStageModel, image: np.ndarray | torch.Tensor) -> ForwardOutputs:
    """Run one H x W x C image through ``model`` and drop the batch axis.

    The returned ``seg_output_map`` has shape (H/d, W/d) and ``cls_logit`` is a
    0-d tensor. Both stay attached to the autograd graph.
    """
    if isinstance(image, torch.Tensor):
        x = image.unsqueeze(-1) if image.ndim == 2 else image
        if x.ndim != 3:
            raise ShapeError(f"expected an H x W x C image, got shape {tuple(image.shape)}")
        x = x.permute(2, 0, 1)
    else:
        x = image_to_tensor(image)
    param = next(model.parameters())
    out = model(x.unsqueeze(0).to(param.dtype))
    return ForwardOutputs(out.seg_features[0], out.seg_output_map[0, 0], out.cls_logit[0])


def gradient_partition(
    model: TwoStageModel,
) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
    """Split the gradients left by the last backward pass by parameter set.

    Parameters that received no gradient are reported as exact zeros.
    """

    def collect(params: dict[str, nn.Parameter]) -> dict[str, torch.Tensor]:
        return {
            name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for name, p in params.items()
        }

    return collect(model.segmentation_parameters()), collect(model.classification_parameters())


def save_checkpoint(path: str | Path, model: TwoStageModel, epoch: int) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "epoch": int(epoch),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
    }
    torch.save(payload, Path(path))


def load_checkpoint(path: str | Path) -> tuple[TwoStageModel, int]:
    """Load a checkpoint written by :func:`save_checkpoint`.

    Returns:
        The restored model (in eval mode) and the stored epoch index.

    Raises:
        CheckpointError: unreadable file, unknown format or mismatching weights.
    """
    path = Path(path)
    try:
        payload: dict[str, Any] = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of unpickling errors
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint of format {CHECKPOINT_FORMAT}")
    try:
        config = ModelConfig(**payload["config"])
        model = TwoStageModel(config)
        state = payload["state_dict"]
        dtype = next(iter(state.values())).dtype
        model.to(dtype)
        model.load_state_dict(state)
    except (KeyError, TypeError, RuntimeError, ConfigError, StopIteration) as exc:
        raise CheckpointError(f"checkpoint {path} does not match its config: {exc}") from exc
    model.eval()
    return model, int(payload["epoch"])
