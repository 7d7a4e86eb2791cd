"""Per-image classification metrics and k-fold aggregation."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import ImageSample
from .errors import MetricError
from .model import TwoStageModel, image_to_tensor


@dataclass
class EvalReport:
    pr_points: list[tuple[float, float]]
    ap: float
    best_threshold: float
    fp: int
    fn: int
    tpr: float
    tnr: float
    n_pos: int = 0
    n_neg: int = 0

    def to_lines(self) -> list[str]:
        return [
            f"ap={self.ap!r}",
            f"best_threshold={self.best_threshold!r}",
            f"fp={self.fp}",
            f"fn={self.fn}",
            f"tpr={self.tpr!r}",
            f"tnr={self.tnr!r}",
            f"n_pos={self.n_pos}",
            f"n_neg={self.n_neg}",
        ]

    def write(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")

    def write_pr_table(self, path: str | Path) -> None:
        rows = ["recall\tprecision"] + [f"{r!r}\t{p!r}" for r, p in self.pr_points]
        Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


@dataclass
class FoldSummary:
    mean_ap: float
    fp: int
    fn: int
    n_folds: int
    fold_aps: list[float] = field(default_factory=list)

    def write(self, path: str | Path) -> None:
        lines = [
            f"n_folds={self.n_folds}",
            f"mean_ap={self.mean_ap!r}",
            f"fp={self.fp}",
            f"fn={self.fn}",
        ] + [f"fold{i}.ap={ap!r}" for i, ap in enumerate(self.fold_aps)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@torch.no_grad()
def score_dataset(
    model: TwoStageModel, samples: Sequence[ImageSample]
) -> tuple[list[float], list[int]]:
    """Defect probability ``sigmoid(cls_logit)`` for each sample, in input order."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    scores, labels = [], []
    try:
        for s in samples:
            x = image_to_tensor(s.image).unsqueeze(0).to(dtype)
            scores.append(float(torch.sigmoid(model(x).cls_logit)[0]))
            labels.append(int(s.label))
    finally:
        model.train(was_training)
    return scores, labels


def _threshold_counts(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray, int, int]:
    """Distinct thresholds (descending) with cumulative TP/FP at ``score >= t``."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores vs {y.size} labels")
    if s.size == 0:
        raise MetricError("no scores to evaluate")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each group of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(~y)[ends]
    return s[ends], tp, fp, int(y.sum()), int((~y).sum())


def pr_curve(scores, labels) -> list[tuple[float, float]]:
    """(recall, precision) at every distinct score threshold, recall ascending."""
    _, tp, fp, n_pos, _ = _threshold_counts(scores, labels)
    if n_pos == 0:
        raise MetricError("precision-recall curve needs at least one positive label")
    return [(t / n_pos, t / (t + f)) for t, f in zip(tp.tolist(), fp.tolist())]


def average_precision(scores, labels) -> float:
    """Step-wise area under the PR curve: sum of (R_k - R_{k-1}) * P_k.

    Samples sharing a score enter the positive set together.
    """
    points = pr_curve(scores, labels)
    ap, prev_recall = 0.0, 0.0
    for recall, precision in points:
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def best_f_measure(scores, labels) -> tuple[float, int, int, float, float]:
    """Threshold with the highest F1 and the confusion figures there.

    A sample is predicted defective when ``score >= threshold``. Ties in F1 go
    to the higher threshold.

    Returns:
        ``(threshold, fp, fn, tpr, tnr)``.
    """
    thresholds, tp, fp, n_pos, n_neg = _threshold_counts(scores, labels)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("best F-measure needs both positive and negative labels")
    best = 0
    for k in range(1, len(thresholds)):
        # F1 = 2TP / (2TP + FP + FN); compare fractions exactly, strict > keeps higher threshold
        num_k, den_k = 2 * tp[k], 2 * tp[k] + fp[k] + (n_pos - tp[k])
        num_b, den_b = 2 * tp[best], 2 * tp[best] + fp[best] + (n_pos - tp[best])
        if num_k * den_b > num_b * den_k:
            best = k
    t, f = int(tp[best]), int(fp[best])
    fn = n_pos - t
    return float(thresholds[best]), f, fn, t / n_pos, (n_neg - f) / n_neg


def evaluate_scores(scores, labels) -> EvalReport:
    threshold, fp, fn, tpr, tnr = best_f_measure(scores, labels)
    y = np.asarray(labels).astype(bool)
    return EvalReport(
        pr_points=pr_curve(scores, labels),
        ap=average_precision(scores, labels),
        best_threshold=threshold,
        fp=fp,
        fn=fn,
        tpr=tpr,
        tnr=tnr,
        n_pos=int(y.sum()),
        n_neg=int((~y).sum()),
    )


def evaluate_model(model: TwoStageModel, samples: Sequence[ImageSample]) -> EvalReport:
    return evaluate_scores(*score_dataset(model, samples))


def aggregate_folds(reports: Sequence[EvalReport]) -> FoldSummary:
    """Mean AP and summed FP/FN over per-fold reports.

    Raw scores from different folds are never pooled; each fold is scored on
    its own threshold.
    """
    if not reports:
        raise ValueError("need at least one fold report")
    aps = [r.ap for r in reports]
    return FoldSummary(
        mean_ap=sum(aps) / len(aps),
        fp=sum(r.fp for r in reports),
        fn=sum(r.fn for r in reports),
        n_folds=len(reports),
        fold_aps=aps,
    )


def format_class_table(reports: Mapping[str, EvalReport]) -> str:
    """TPR/TNR per surface class in percent, one row per class."""
    lines = ["class\tTPR\tTNR"]
    for name, r in reports.items():
        lines.append(f"{name}\t{100 * r.tpr:.1f}\t{100 * r.tnr:.1f}")
    return "\n".join(lines) + "\n"
