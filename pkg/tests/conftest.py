from __future__ import annotations

import numpy as np
import pytest
import torch

from defectnet.data import DatasetSplit, ImageSample, SynthSpec, synth_generate
from defectnet.model import ModelConfig, build_model


@pytest.fixture
def micro_config() -> ModelConfig:
    return ModelConfig(input_channels=1, base_channels=2, downsample_factor=8)


@pytest.fixture
def micro_model(micro_config):
    return build_model(micro_config, seed=3).double()


@pytest.fixture
def tiny_split() -> DatasetSplit:
    """Four 32x32 positives and six negatives from the generator."""
    return synth_generate(SynthSpec(n_pos=4, n_neg=6, size=32, defect="blob"), seed=11)


def random_batch(n: int, size: int, seed: int = 0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 1, size, size, generator=g, dtype=dtype)


def make_sample(sample_id: str, mask: np.ndarray, channels: int = 1) -> ImageSample:
    h, w = mask.shape
    image = np.full((h, w, channels), 0.5, dtype=np.float32)
    return ImageSample(sample_id, image, mask.astype(np.uint8), int(mask.any()))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
