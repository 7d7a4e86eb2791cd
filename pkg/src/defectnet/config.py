"""Flat ``section.key = value`` run configuration with command-line overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .data import SynthSpec
from .errors import ConfigError
from .model import ModelConfig
from .train import TOGGLE_NAMES, Toggles, TrainConfig

OUTPUT_ROOT_ENV = "DEFECTNET_OUTPUT_ROOT"

LAYOUTS = ("mask_folders", "rotated_box_index", "synthetic")
DEFECTS = ("blob", "scratch")

# key -> (type, default)
SCHEMA: dict[str, tuple[type, Any]] = {
    "model.input_channels": (int, 1),
    "model.base_channels": (int, 32),
    "model.downsample_factor": (int, 8),
    "train.eta": (float, 0.01),
    "train.delta": (float, 1.0),
    "train.epochs": (int, 50),
    "train.batch_size": (int, 5),
    "train.w_pos": (float, 1.0),
    "train.p": (float, 1.0),
    "train.seed": (int, 0),
    "train.validation_select": (bool, False),
    "train.deterministic": (bool, False),
    **{f"toggles.{name}": (bool, True) for name in TOGGLE_NAMES},
    "data.layout": (str, "mask_folders"),
    "data.root": (str, ""),
    "data.val_root": (str, ""),
    "data.test_root": (str, ""),
    "synth.n_pos": (int, 60),
    "synth.n_neg": (int, 60),
    "synth.size": (int, 128),
    "synth.defect": (str, "blob"),
    "synth.noise_level": (float, 0.05),
    "synth.seed": (int, 0),
    "synth.val_seed": (int, 500),
    "synth.test_seed": (int, 1000),
    "output.dir": (str, "runs/default"),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_value(key: str, raw: str) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    kind = SCHEMA[key][0]
    text = raw.strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from exc


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_lines(lines: list[str], source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in text.split("=", 1))
        values[key] = parse_value(key, raw)
    return values


def preset_names() -> list[str]:
    files = resources.files("defectnet").joinpath("presets")
    return sorted(p.name[:-4] for p in files.iterdir() if p.name.endswith(".cfg"))


def read_config_file(path_or_preset: str) -> dict[str, Any]:
    """Read a config file, or a packaged preset when no such file exists."""
    path = Path(path_or_preset)
    if path.is_file():
        return parse_lines(path.read_text(encoding="utf-8").splitlines(), str(path))
    preset = resources.files("defectnet").joinpath("presets", f"{path_or_preset}.cfg")
    if preset.is_file():
        return parse_lines(preset.read_text(encoding="utf-8").splitlines(), f"preset:{path_or_preset}")
    raise ConfigError(
        f"config {path_or_preset!r} is neither a file nor a preset ({', '.join(preset_names())})"
    )


@dataclass
class RunConfig:
    """Fully resolved run configuration: every schema key has a value."""

    values: dict[str, Any] = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    @classmethod
    def resolve(cls, config: str | None = None, overrides: list[str] | None = None) -> RunConfig:
        cfg = cls()
        if config:
            cfg.values.update(read_config_file(config))
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            cfg.values[key.strip()] = parse_value(key.strip(), raw)
        cfg.validate()
        return cfg

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def set(self, key: str, value: Any) -> None:
        self.values[key] = parse_value(key, format_value(value))

    def validate(self) -> None:
        if self["data.layout"] not in LAYOUTS:
            raise ConfigError(f"data.layout must be one of {LAYOUTS}, got {self['data.layout']!r}")
        if self["synth.defect"] not in DEFECTS:
            raise ConfigError(f"synth.defect must be one of {DEFECTS}, got {self['synth.defect']!r}")
        # surface dataclass-level errors with their key names
        self.model_config()
        self.train_config()

    def require(self, key: str) -> Any:
        value = self[key]
        if value in ("", None):
            raise ConfigError(f"missing required config key {key!r}")
        return value

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            input_channels=self["model.input_channels"],
            base_channels=self["model.base_channels"],
            downsample_factor=self["model.downsample_factor"],
            grad_stop_shortcuts=self["toggles.grad_flow_adjust"],
            grad_stop_seg_features=self["toggles.grad_flow_adjust"],
        )

    def toggles(self) -> Toggles:
        return Toggles(**{name: self[f"toggles.{name}"] for name in TOGGLE_NAMES})

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            eta=self["train.eta"],
            delta=self["train.delta"],
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            w_pos=self["train.w_pos"],
            p=self["train.p"],
            toggles=self.toggles(),
            seed=self["train.seed"],
            validation_select=self["train.validation_select"],
        )

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            n_pos=self["synth.n_pos"],
            n_neg=self["synth.n_neg"],
            size=self["synth.size"],
            defect=self["synth.defect"],
            noise_level=self["synth.noise_level"],
            channels=self["model.input_channels"],
        )

    def output_dir(self, cli_out: str | None = None) -> Path:
        if cli_out:
            return Path(cli_out)
        out = Path(self["output.dir"])
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            return Path(root) / out
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(self.values[k])}\n" for k in sorted(self.values))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")
