"""Command-line entry points: ``train``, ``eval``, ``ablate`` and ``synth``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime abort
(divergence, data error, unreadable checkpoint).
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from .config import RunConfig
from .data import DatasetSplit, load_dataset, save_mask_folders, synth_generate
from .errors import CheckpointError, ConfigError, DataError, ShapeError, TrainingAborted
from .evaluate import aggregate_folds, evaluate_model
from .model import build_model, load_checkpoint
from .sampling import export_usage_histogram
from .train import (
    TOGGLE_NAMES,
    Toggles,
    ablate,
    format_ablation_table,
    set_deterministic,
    train,
)

log = logging.getLogger("defectnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits with 2 by default
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _resolve(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if getattr(args, "deterministic", False):
        overrides.append("train.deterministic=true")
    return RunConfig.resolve(args.config, overrides)


def _prepare_out(cfg: RunConfig, cli_out: str | None) -> Path:
    out = cfg.output_dir(cli_out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "resolved.cfg")
    return out


def _load_split(cfg: RunConfig, which: str) -> DatasetSplit | None:
    """Train/val/test split from disk or from the generator; None if not configured."""
    factor = cfg["model.downsample_factor"]
    layout = cfg["data.layout"]
    if layout == "synthetic":
        seed_key = {"train": "synth.seed", "val": "synth.val_seed", "test": "synth.test_seed"}[which]
        return synth_generate(cfg.synth_spec(), cfg[seed_key], downsample_factor=factor)
    key = {"train": "data.root", "val": "data.val_root", "test": "data.test_root"}[which]
    if which == "train":
        cfg.require(key)
    if not cfg[key]:
        return None
    return load_dataset(cfg[key], layout, pad_to=factor)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    if cfg["train.deterministic"]:
        set_deterministic(True)
    train_split = _load_split(cfg, "train")
    val_split = _load_split(cfg, "val") if cfg["train.validation_select"] else None
    if cfg["train.validation_select"] and val_split is None:
        raise ConfigError("missing required config key 'data.val_root' (train.validation_select)")
    out = _prepare_out(cfg, args.out)
    model = build_model(cfg.model_config(), seed=cfg["train.seed"])
    model, history = train(model, train_split, cfg.train_config(), validation=val_split,
                           checkpoint_dir=out)
    history.write_tsv(out / "history.tsv")
    if history.usage_counts:
        export_usage_histogram(history.usage_counts, out / "usage_histogram.tsv")
    test_split = _load_split(cfg, "test")
    if test_split is not None and history.records:
        report = evaluate_model(model, test_split.samples)
        report.write(out / "test_report.txt")
        report.write_pr_table(out / "test_pr.tsv")
        print(f"test AP={report.ap:.4f} FP={report.fp} FN={report.fn}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    if args.config or args.set:
        expected = RunConfig.resolve(args.config, args.set).model_config()
        got = model.config
        for name in ("input_channels", "base_channels", "downsample_factor"):
            if getattr(expected, name) != getattr(got, name):
                raise ConfigError(
                    f"model.{name}={getattr(expected, name)} does not match checkpoint "
                    f"value {getattr(got, name)}"
                )
    factor = model.config.downsample_factor
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for i, root in enumerate(args.data):
        split = load_dataset(root, args.layout, pad_to=factor)
        report = evaluate_model(model, split.samples)
        reports.append(report)
        prefix = "" if len(args.data) == 1 else f"fold{i}_"
        report.write(out / f"{prefix}report.txt")
        report.write_pr_table(out / f"{prefix}pr.tsv")
        print(f"{root}: AP={report.ap:.4f} FP={report.fp} FN={report.fn}")
    if len(reports) > 1:
        summary = aggregate_folds(reports)
        summary.write(out / "summary.txt")
        print(f"mean AP={summary.mean_ap:.4f} FP={summary.fp} FN={summary.fn}")
    return EXIT_OK


def read_grid(path: str | Path) -> list[Toggles]:
    """Parse a toggle grid: one row per line of ``name=0|1`` for all four components."""
    rows = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read grid file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        flags = {}
        for token in text.split():
            name, sep, value = token.partition("=")
            if not sep or name not in TOGGLE_NAMES or value not in ("0", "1"):
                raise UsageError(f"{path}:{lineno}: bad grid token {token!r}")
            if name in flags:
                raise UsageError(f"{path}:{lineno}: {name} given twice")
            flags[name] = value == "1"
        missing = [n for n in TOGGLE_NAMES if n not in flags]
        if missing:
            raise UsageError(f"{path}:{lineno}: missing flags {missing}")
        rows.append(Toggles(**flags))
    if not rows:
        raise UsageError(f"grid file {path} has no rows")
    return rows


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    grid = read_grid(args.grid)
    if cfg["train.deterministic"]:
        set_deterministic(True)
    train_split = _load_split(cfg, "train")
    test_split = _load_split(cfg, "test")
    if test_split is None:
        raise ConfigError("missing required config key 'data.test_root'")
    out = _prepare_out(cfg, args.out)
    model_cfg = cfg.model_config()
    rows = ablate(lambda seed: build_model(model_cfg, seed=seed), train_split, test_split,
                  cfg.train_config(), grid)
    table = format_ablation_table(rows, dataset=train_split.name)
    (out / "ablation.tsv").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    factor = cfg["model.downsample_factor"]
    if cfg["synth.size"] % factor:
        raise UsageError(
            f"synth.size={cfg['synth.size']} is not divisible by the downsample factor {factor}"
        )
    out = cfg.output_dir(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"output directory {out} is not empty (use --force)")
        for sub in ("pos", "pos_masks", "neg"):
            shutil.rmtree(out / sub, ignore_errors=True)
    split = synth_generate(cfg.synth_spec(), cfg["synth.seed"], downsample_factor=factor)
    save_mask_folders(split, out)
    cfg.write(out / "resolved.cfg")
    print(f"wrote {len(split.positives)} positive and {len(split.negatives)} negative images to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="defectnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="config file or preset name (dagm, ksdd, steel, synthetic)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="shortcut for --set train.seed=N")
        p.add_argument("--deterministic", action="store_true", help="deterministic torch kernels")
        p.add_argument("--out", help="output directory (overrides output.dir)")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--epochs", type=int, help="shortcut for --set train.epochs=N")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one or more fold splits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, action="append", help="dataset root; repeat per fold")
    p.add_argument("--layout", default="mask_folders", choices=("mask_folders", "rotated_box_index"))
    p.add_argument("--config", help="optional run config checked against the checkpoint")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", default="eval_out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a component-toggle grid")
    common(p)
    p.add_argument("--grid", required=True, help="grid file, one toggle vector per line")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="write a synthetic mask_folders dataset")
    common(p)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, DataError, CheckpointError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
