"""Run configuration: defaults, flat ``key=value`` files, command-line overrides."""
from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .artifacts import derive_seed
from .data import PoisonConfig, make_original_trigger
from .errors import ConfigError
from .synthesis import SynthesisConfig
from .train import TrainConfig


def default_out_dir() -> str:
    return os.environ.get("BDF_OUT_DIR", "runs/default")


@dataclass
class RunConfig:
    seed: int = 42
    out_dir: str = ""
    # dataset
    num_classes: int = 10
    train_per_class: int = 500
    test_per_class: int = 100
    image_size: int = 28
    channels: int = 1
    glyph_ink: float = 0.3
    glyph_thickness: int = 0  # 0 picks size/14
    noise: float = 0.1
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    # attack
    trigger_square: int = 3
    trigger_margin: int = 1
    target: int = 8
    poison_rate: float = 0.05
    # training
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    # trigger synthesis
    syn_lambda: float = 0.01
    syn_iterations: int = 300
    syn_step: float = 20.0
    syn_batch: int = 32
    syn_calibration: int = 128
    anomaly_cutoff: float = 2.0
    # analyses
    n_activation_images: int = 256
    gradcam_images: int = 100
    dilation: int = 1
    # defense
    calibration_images: int = 256
    grid_steps: int = 20
    grid_low_fraction: float = 0.1
    max_acc_drop: float = 5.0
    use_clean_maxima: bool = False

    def __post_init__(self):
        if not self.out_dir:
            self.out_dir = default_out_dir()

    def seed_for(self, subsystem: str) -> int:
        return derive_seed(self.seed, subsystem)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.momentum,
                           self.seed_for("train"))

    def synthesis_config(self) -> SynthesisConfig:
        return SynthesisConfig(self.syn_lambda, self.syn_iterations, self.syn_step, self.syn_batch,
                               self.seed_for("synthesis"), self.syn_calibration)

    def original_trigger(self):
        size = (self.image_size, self.image_size)
        return make_original_trigger(size, self.trigger_square, self.trigger_margin,
                                     self.target, self.channels)

    def poison_config(self, trigger=None) -> PoisonConfig:
        return PoisonConfig(trigger or self.original_trigger(), self.poison_rate, self.seed_for("poison"))

    def to_text(self) -> str:
        """Flat key=value dump. ``out_dir`` is left out so the record of a run
        does not depend on where it was written."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None and f.name != "out_dir":
                lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = str(_FIELD_TYPES[key])
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    if kind.startswith("Optional") and raw.lower() in ("", "none"):
        return None
    return raw


def parse_config_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = coerce(key.strip(), value)
    return out


def build_config(config_path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the config file, then explicitly given command-line values."""
    values = {}
    if config_path:
        values.update(parse_config_text(Path(config_path).read_text()))
    for key, v in (overrides or {}).items():
        if v is not None:
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = v
    return RunConfig(**values)
