from __future__ import annotations

import hashlib
import subprocess
import sys

import pytest
import torch

from defectnet.cli import main
from defectnet.config import OUTPUT_ROOT_ENV, RunConfig, preset_names
from defectnet.errors import ConfigError
from defectnet.model import build_model, load_checkpoint

TINY = """\
model.base_channels = 2
train.eta = 0.05
train.epochs = 1
train.batch_size = 4
train.w_pos = 5.0
data.layout = synthetic
synth.n_pos = 4
synth.n_neg = 4
synth.size = 32
synth.seed = 3
synth.test_seed = 4
"""

ALL_ON = " ".join(
    f"{n}=1" for n in ("dyn_balanced_loss", "grad_flow_adjust", "freq_sampling", "dist_transform")
)


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


def _digest(root):
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*.png")):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------- config


def test_presets_resolve():
    assert {"dagm", "ksdd", "steel", "synthetic"} <= set(preset_names())
    for name in preset_names():
        RunConfig.resolve(name)
    dagm = RunConfig.resolve("dagm")
    assert (dagm["train.eta"], dagm["train.delta"], dagm["train.w_pos"]) == (0.01, 1.0, 20.0)


def test_unknown_key_rejected(tmp_path, capsys):
    with pytest.raises(ConfigError, match="train.etaa"):
        RunConfig.resolve(None, ["train.etaa=1"])
    assert main(["train", "--set", "train.etaa=1", "--out", str(tmp_path)]) == 1
    assert "train.etaa" in capsys.readouterr().err


def test_missing_data_root_names_key(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "o")]) == 1
    assert "data.root" in capsys.readouterr().err


def test_argparse_errors_exit_one():
    with pytest.raises(SystemExit) as info:
        main(["train", "--bogus"])
    assert info.value.code == 1


def test_env_var_sets_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    cfg = RunConfig.resolve(None, ["output.dir=runs/x"])
    assert cfg.output_dir() == tmp_path / "runs" / "x"
    assert cfg.output_dir("elsewhere").name == "elsewhere"


# ---------------------------------------------------------------- train


def test_train_writes_artifacts(tmp_path, tiny_cfg, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", tiny_cfg, "--seed", "1", "--out", str(out)]) == 0
    for name in ("resolved.cfg", "checkpoint_final.pt", "history.tsv", "usage_histogram.tsv",
                 "test_report.txt", "test_pr.tsv"):
        assert (out / name).exists(), name
    resolved = RunConfig.resolve(str(out / "resolved.cfg"))
    assert resolved["train.seed"] == 1 and resolved["model.base_channels"] == 2
    assert "test AP=" in capsys.readouterr().out


def test_zero_epochs_keeps_initial_weights(tmp_path, tiny_cfg):
    out = tmp_path / "run"
    assert main(["train", "--config", tiny_cfg, "--epochs", "0", "--seed", "5", "--out", str(out)]) == 0
    model, epoch = load_checkpoint(out / "checkpoint_final.pt")
    fresh = build_model(RunConfig.resolve(tiny_cfg).model_config(), seed=5)
    assert epoch == 0
    assert all(torch.equal(a, b) for a, b in zip(model.state_dict().values(),
                                                 fresh.state_dict().values()))


def test_diverging_training_exits_two(tmp_path, tiny_cfg, capsys):
    code = main(["train", "--config", tiny_cfg, "--set", "train.eta=1e30", "--set", "train.epochs=3",
                 "--out", str(tmp_path / "run")])
    assert code == 2
    assert "non-finite loss at epoch" in capsys.readouterr().err


# ---------------------------------------------------------------- synth and eval


def test_synth_dataset(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["synth", "--config", "synthetic", "--set", "synth.seed=2"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert len(list((a / "pos").glob("*.png"))) == 60
    assert len(list((a / "neg").glob("*.png"))) == 60
    assert len(list((a / "pos_masks").glob("*.png"))) == 60
    assert _digest(a) == _digest(b)
    capsys.readouterr()
    assert main(args + ["--out", str(a)]) == 1
    assert "--force" in capsys.readouterr().err
    assert main(args + ["--out", str(a), "--force"]) == 0
    assert _digest(a) == _digest(b)


def test_synth_indivisible_size(tmp_path, capsys):
    assert main(["synth", "--set", "synth.size=100", "--out", str(tmp_path / "s")]) == 1
    err = capsys.readouterr().err
    assert "100" in err and "factor 8" in err


@pytest.fixture
def trained(tmp_path, tiny_cfg):
    out = tmp_path / "run"
    assert main(["train", "--config", tiny_cfg, "--out", str(out)]) == 0
    folds = []
    for i in range(3):
        root = tmp_path / f"fold{i}"
        assert main(["synth", "--config", tiny_cfg, "--set", f"synth.seed={20 + i}",
                     "--out", str(root)]) == 0
        folds.append(str(root))
    return out / "checkpoint_final.pt", folds


def test_eval_single_split(tmp_path, trained):
    ckpt, folds = trained
    out = tmp_path / "ev1"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", folds[0], "--out", str(out)]) == 0
    assert (out / "report.txt").exists() and (out / "pr.tsv").exists()
    assert not (out / "summary.txt").exists()


def test_eval_three_folds(tmp_path, trained):
    ckpt, folds = trained
    out = tmp_path / "ev3"
    argv = ["eval", "--checkpoint", str(ckpt), "--out", str(out)]
    for f in folds:
        argv += ["--data", f]
    assert main(argv) == 0
    reports = []
    for i in range(3):
        text = (out / f"fold{i}_report.txt").read_text().splitlines()
        reports.append(dict(line.split("=", 1) for line in text))
    summary = dict(line.split("=", 1) for line in (out / "summary.txt").read_text().splitlines())
    assert int(summary["fp"]) == sum(int(r["fp"]) for r in reports)
    assert int(summary["fn"]) == sum(int(r["fn"]) for r in reports)
    assert float(summary["mean_ap"]) == pytest.approx(
        sum(float(r["ap"]) for r in reports) / 3, abs=1e-12
    )


def test_eval_config_mismatch(tmp_path, trained):
    ckpt, folds = trained
    code = main(["eval", "--checkpoint", str(ckpt), "--data", folds[0], "--set",
                 "model.base_channels=4", "--out", str(tmp_path / "e")])
    assert code == 1


def test_eval_corrupt_checkpoint(tmp_path, trained, capsys):
    _, folds = trained
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"\x00" * 64)
    assert main(["eval", "--checkpoint", str(bad), "--data", folds[0],
                 "--out", str(tmp_path / "e")]) == 2
    assert "bad.pt" in capsys.readouterr().err


# ---------------------------------------------------------------- ablate


def test_ablate_keeps_grid_order(tmp_path, tiny_cfg):
    names = ("dyn_balanced_loss", "grad_flow_adjust", "freq_sampling", "dist_transform")
    lines = []
    for k in range(5):  # gradual: the first k components switched on
        lines.append(" ".join(f"{n}={int(i < k)}" for i, n in enumerate(names)))
    lines.append(lines[-1])  # duplicate rows run twice
    grid = tmp_path / "grid.txt"
    grid.write_text("# gradual\n" + "\n".join(lines) + "\n")
    out = tmp_path / "abl"
    assert main(["ablate", "--config", tiny_cfg, "--grid", str(grid), "--out", str(out)]) == 0
    table = (out / "ablation.tsv").read_text().splitlines()
    assert len(table) == 1 + 6
    for k, row in enumerate(table[1:6]):
        marks = row.split("\t")[2:]
        assert marks == ["x" if i < k else "" for i in range(4)]
    assert table[5] == table[6]


@pytest.mark.parametrize("content", ["", "# nothing\n", "dyn_balanced_loss=1\n",
                                     ALL_ON + " bogus=1\n", ALL_ON.replace("=1", "=2", 1) + "\n"])
def test_ablate_bad_grid(tmp_path, tiny_cfg, content):
    grid = tmp_path / "grid.txt"
    grid.write_text(content)
    assert main(["ablate", "--config", tiny_cfg, "--grid", str(grid),
                 "--out", str(tmp_path / "abl")]) == 1


def test_console_module_help():
    proc = subprocess.run([sys.executable, "-m", "defectnet.cli", "--help"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    for cmd in ("train", "eval", "ablate", "synth"):
        assert cmd in proc.stdout
