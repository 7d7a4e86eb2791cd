"""Alternating positive/negative training stream with frequency-of-use negatives."""

from __future__ import annotations

import csv
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass
class SamplerState:
    """Usage counters and RNG driving negative selection.

    ``usage_counts`` maps negative-sample id to the number of times it has been
    emitted. Counts only ever grow, one per emitted selection.
    """

    usage_counts: dict[str, int] = field(default_factory=dict)
    rng_seed: int = 0
    freq_enabled: bool = True
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.rng = np.random.default_rng(self.rng_seed)


def usage_weights(counts: np.ndarray) -> np.ndarray:
    """Selection weights inversely proportional to each sample's excess use.

    Excess use is the count above the least-used negative, so the weight is
    ``1 / (c_i - min(c) + 1)``. From a fresh state this equals ``1 / (c_i + 1)``.
    """
    return 1.0 / (counts - counts.min() + 1.0)


def select_negatives(state: SamplerState, negatives: Sequence[str], k: int) -> list[str]:
    """Pick ``k`` negative ids and record their use in ``state``.

    Draws are without replacement; when ``k`` exceeds the pool the pool is
    refilled and drawing continues. With frequency-of-use enabled each draw is
    weighted by :func:`usage_weights`, recomputed after every draw.
    """
    if not negatives:
        raise DataError("negative set is empty")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ids = list(negatives)
    counts = np.array([state.usage_counts.get(i, 0) for i in ids], dtype=np.float64)
    available = np.ones(len(ids), dtype=bool)
    chosen: list[str] = []
    for _ in range(k):
        if not available.any():
            available[:] = True
        candidates = np.flatnonzero(available)
        if state.freq_enabled:
            w = usage_weights(counts)[candidates]
            pick = candidates[state.rng.choice(len(candidates), p=w / w.sum())]
        else:
            pick = candidates[state.rng.integers(len(candidates))]
        available[pick] = False
        counts[pick] += 1
        chosen.append(ids[pick])
        state.usage_counts[ids[pick]] = state.usage_counts.get(ids[pick], 0) + 1
    return chosen


def build_epoch_stream(
    positives: Sequence[str], negatives: Sequence[str], state: SamplerState
) -> list[str]:
    """One epoch of ids alternating positive, negative, positive, ...

    Positives are shuffled once per epoch; ``len(positives)`` negatives are
    selected through :func:`select_negatives`.
    """
    if not positives:
        raise DataError("positive set is empty")
    order = state.rng.permutation(len(positives))
    negs = select_negatives(state, negatives, len(positives))
    stream: list[str] = []
    for idx, neg in zip(order, negs):
        stream.append(positives[idx])
        stream.append(neg)
    return stream


def batches(stream: Sequence[str], batch_size: int) -> list[list[str]]:
    """Chunk ``stream`` in order into batches of ``batch_size`` (last may be short)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    return [list(stream[i : i + batch_size]) for i in range(0, len(stream), batch_size)]


def export_usage_histogram(counts: SamplerState | Mapping[str, int], path: str | Path) -> None:
    """Write ``id<TAB>count`` rows sorted by id."""
    if isinstance(counts, SamplerState):
        counts = counts.usage_counts
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["id", "count"])
        for key in sorted(counts):
            writer.writerow([key, counts[key]])
