"""End-to-end training loop and the component-toggle ablation harness."""

from __future__ import annotations

import copy
import csv
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import DatasetSplit, ImageSample, downsample_mask
from .errors import ConfigError, NonFiniteLossError, TrainingAborted
from .evaluate import EvalReport, average_precision, evaluate_model, score_dataset
from .loss import (
    LossBreakdown,
    MixSchedule,
    classification_loss,
    compute_weight_mask,
    lambda_at,
    segmentation_loss,
    total_loss,
)
from .model import TwoStageModel, image_to_tensor, save_checkpoint
from .sampling import SamplerState, batches, build_epoch_stream

log = logging.getLogger(__name__)

TOGGLE_NAMES = ("dyn_balanced_loss", "grad_flow_adjust", "freq_sampling", "dist_transform")


def set_deterministic(enabled: bool = True) -> None:
    """Force deterministic torch kernels on a single intra-op thread."""
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


@dataclass(frozen=True)
class Toggles:
    dyn_balanced_loss: bool = True
    grad_flow_adjust: bool = True
    freq_sampling: bool = True
    dist_transform: bool = True

    @classmethod
    def all(cls, value: bool) -> Toggles:
        return cls(value, value, value, value)

    def as_tuple(self) -> tuple[bool, bool, bool, bool]:
        return tuple(getattr(self, n) for n in TOGGLE_NAMES)  # type: ignore[return-value]


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.01
    delta: float = 1.0
    epochs: int = 50
    batch_size: int = 5
    w_pos: float = 1.0
    p: float = 1.0
    toggles: Toggles = field(default_factory=Toggles)
    seed: int = 0
    validation_select: bool = False

    def __post_init__(self) -> None:
        if not self.eta > 0:
            raise ConfigError(f"eta must be > 0, got {self.eta}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.delta < 0:
            raise ConfigError(f"delta must be >= 0, got {self.delta}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lam: float
    seg_loss: float
    cls_loss: float
    total: float
    val_ap: float | None = None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    usage_counts: dict[str, int] = field(default_factory=dict)

    @property
    def lambdas(self) -> list[float]:
        return [r.lam for r in self.records]

    def write_tsv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(["epoch", "lambda", "seg_loss", "cls_loss", "total_loss", "val_ap"])
            for r in self.records:
                writer.writerow(
                    [r.epoch, repr(r.lam), repr(r.seg_loss), repr(r.cls_loss), repr(r.total),
                     "" if r.val_ap is None else repr(r.val_ap)]
                )


@dataclass
class _Prepared:
    image: torch.Tensor
    target: torch.Tensor
    weights: torch.Tensor
    label: float


def _prepare(sample: ImageSample, cfg: TrainConfig, factor: int, dtype: torch.dtype) -> _Prepared:
    target = downsample_mask(sample.mask, factor)
    wm = compute_weight_mask(target, cfg.w_pos, cfg.p, dt_enabled=cfg.toggles.dist_transform)
    return _Prepared(
        image=image_to_tensor(sample.image).to(dtype),
        target=torch.from_numpy(target).to(dtype)[None],
        weights=torch.from_numpy(wm.weights).to(dtype)[None],
        label=float(sample.label),
    )


def _batch_losses(model: TwoStageModel, items: Sequence[_Prepared]) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean segmentation and classification loss over ``items``."""
    shapes = {tuple(it.image.shape) for it in items}
    if len(shapes) == 1:
        out = model(torch.stack([it.image for it in items]))
        seg = segmentation_loss(
            out.seg_output_map,
            torch.stack([it.target for it in items]),
            torch.stack([it.weights for it in items]),
        )
        cls = classification_loss(out.cls_logit, [it.label for it in items])
        return seg, cls
    # mixed image sizes: per-sample pixel means, then a batch mean
    segs, clss = [], []
    for it in items:
        out = model(it.image[None])
        segs.append(segmentation_loss(out.seg_output_map, it.target[None], it.weights[None]))
        clss.append(classification_loss(out.cls_logit, [it.label]))
    return torch.stack(segs).mean(), torch.stack(clss).mean()


def train_step(
    model: TwoStageModel,
    optimizer: torch.optim.Optimizer,
    items: Sequence[_Prepared],
    lam: float,
    delta: float,
) -> LossBreakdown:
    """One forward, one backward of the combined loss, one SGD update."""
    model.train()
    seg, cls = _batch_losses(model, items)
    total = total_loss(seg, cls, lam, delta)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return LossBreakdown(seg.item(), cls.item(), lam, total.item())


def train(
    model: TwoStageModel,
    split: DatasetSplit,
    cfg: TrainConfig,
    validation: DatasetSplit | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[TwoStageModel, TrainHistory]:
    """Train ``model`` in place on ``split``.

    The ``grad_flow_adjust`` toggle overrides both gradient-stop flags of the
    model. Each epoch uses one alternating pass over the positives. With
    ``validation_select`` the parameters with the highest validation AP are
    restored at the end.

    Raises:
        TrainingAborted: a loss became non-finite; nothing is clipped.
    """
    if not split.positives or not split.negatives:
        raise ValueError("training needs at least one positive and one negative sample")
    if cfg.validation_select and validation is None:
        raise ConfigError("validation_select requires a validation split")
    stop = cfg.toggles.grad_flow_adjust
    model.set_gradient_stops(stop, stop)
    history = TrainHistory()
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if cfg.epochs == 0:
        if ckpt_dir is not None:
            save_checkpoint(ckpt_dir / "checkpoint_final.pt", model, 0)
        return model, history

    dtype = next(model.parameters()).dtype
    factor = model.config.downsample_factor
    prepared = {s.id: _prepare(s, cfg, factor, dtype) for s in split.samples}
    pos_ids = [s.id for s in split.positives]
    neg_ids = [s.id for s in split.negatives]
    schedule = MixSchedule(cfg.epochs, cfg.delta, cfg.toggles.dyn_balanced_loss)
    sampler = SamplerState({i: 0 for i in neg_ids}, rng_seed=cfg.seed,
                           freq_enabled=cfg.toggles.freq_sampling)
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.eta, momentum=0.0, weight_decay=0.0)
    best_ap, best_state = -math.inf, None

    for epoch in range(cfg.epochs):
        lam = lambda_at(epoch, schedule)
        stream = build_epoch_stream(pos_ids, neg_ids, sampler)
        sums, n_items = np.zeros(3), 0
        for step, ids in enumerate(batches(stream, cfg.batch_size)):
            try:
                br = train_step(model, optimizer, [prepared[i] for i in ids], lam, cfg.delta)
            except NonFiniteLossError as exc:
                raise TrainingAborted(epoch, step, str(exc)) from exc
            sums += np.array([br.seg_loss, br.cls_loss, br.total]) * len(ids)
            n_items += len(ids)
        seg_m, cls_m, tot_m = (sums / n_items).tolist()
        val_ap = None
        if cfg.validation_select:
            val_ap = average_precision(*score_dataset(model, validation.samples))
            if val_ap > best_ap:
                best_ap, best_state = val_ap, copy.deepcopy(model.state_dict())
                history.best_epoch = epoch
                if ckpt_dir is not None:
                    save_checkpoint(ckpt_dir / "checkpoint_best.pt", model, epoch + 1)
        history.records.append(EpochRecord(epoch, lam, seg_m, cls_m, tot_m, val_ap))
        log.info("epoch %d lambda=%.3f seg=%.5f cls=%.5f total=%.5f val_ap=%s",
                 epoch, lam, seg_m, cls_m, tot_m, val_ap)

    history.usage_counts = dict(sampler.usage_counts)
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "checkpoint_final.pt", model, cfg.epochs)
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, history


@dataclass
class AblationRow:
    toggles: Toggles
    report: EvalReport | None = None
    error: str | None = None

    @property
    def aborted(self) -> bool:
        return self.report is None


def ablate(
    model_factory: Callable[[int], TwoStageModel],
    split: DatasetSplit,
    test: DatasetSplit,
    cfg: TrainConfig,
    toggle_grid: Sequence[Toggles],
) -> list[AblationRow]:
    """Train and evaluate once per toggle vector, same seed for every row.

    A row whose training aborts is recorded with its error and the remaining
    rows still run.
    """
    rows = []
    for toggles in toggle_grid:
        row_cfg = replace(cfg, toggles=toggles)
        model = model_factory(cfg.seed)
        try:
            trained, _ = train(model, split, row_cfg)
        except TrainingAborted as exc:
            log.warning("ablation row %s aborted: %s", toggles.as_tuple(), exc)
            rows.append(AblationRow(toggles, error=str(exc)))
            continue
        rows.append(AblationRow(toggles, report=evaluate_model(trained, test.samples)))
    return rows


def format_ablation_table(rows: Sequence[AblationRow], dataset: str = "") -> str:
    """Tab-separated table: AP, FP+FN and one check column per component."""
    ap_col = f"{dataset} AP" if dataset else "AP"
    header = [ap_col, "FP+FN", "dynamically_balanced_loss", "gradient_flow_adjustment",
              "frequency_of_use_sampling", "distance_transform"]
    lines = ["\t".join(header)]
    for row in rows:
        marks = ["x" if flag else "" for flag in row.toggles.as_tuple()]
        if row.report is None:
            cells = ["aborted", "-"]
        else:
            cells = [f"{100 * row.report.ap:.2f}", f"{row.report.fp}+{row.report.fn}"]
        lines.append("\t".join(cells + marks))
    return "\n".join(lines) + "\n"
