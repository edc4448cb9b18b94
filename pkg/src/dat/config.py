"""Experiment configuration: one flat record, key=value files, stable hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .discretizer import DiscretizerConfig
from .trainer import TRAIN_MODES, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    name: str = "run"
    seed: int = 0
    # dataset
    data: str = "synthetic"              # synthetic | idx
    data_seed: int = 0                   # synthetic generator seed, kept apart from the training seed
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    n_train: int = 10000
    n_test: int = 2000
    num_classes: int = 10
    # models
    width: int = 8
    downsample: int = 4
    latent_dim: int = 16
    num_entries: int = 128
    hidden: int = 32
    # discretizer training
    disc_epochs: int = 6
    disc_lr: float = 2e-3
    disc_batch_size: int = 64
    commitment_weight: float = 0.25
    # classifier training
    mode: str = "standard"
    epochs: int = 6
    batch_size: int = 128
    lr: float = 0.05
    alpha: float = 0.1
    perturbation: str = "raw"
    bound_eps: float = math.inf
    epsilon: float = 4 / 255
    steps: int = 1
    step_size: Optional[float] = None
    fraction: float = 0.038
    # evaluation / analysis
    attacks: str = "1,2,4"               # FGSM epsilons in 1/255 units
    corruptions: str = "all"             # all | none | comma list of kinds
    with_discretizer: bool = False
    n_batches: int = 200
    analysis_batch_size: int = 64
    # inputs produced by earlier runs
    discretizer: str = ""
    classifier: str = ""
    baseline: str = ""

    def validate(self) -> "ExperimentConfig":
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.data not in ("synthetic", "idx"):
            raise ConfigError(f"data must be 'synthetic' or 'idx', got {self.data!r}")
        if self.perturbation not in ("raw", "sign"):
            raise ConfigError(f"perturbation must be 'raw' or 'sign', got {self.perturbation!r}")
        if self.alpha < 0 or self.epsilon <= 0 or self.steps < 1 or not 0 <= self.fraction <= 1:
            raise ConfigError("need alpha >= 0, epsilon > 0, steps >= 1, 0 <= fraction <= 1")
        if self.epochs < 0 or self.disc_epochs < 0 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 0 and batch_size >= 2")
        return self

    # -- hashing ---------------------------------------------------------------
    def canonical_bytes(self) -> bytes:
        d = dataclasses.asdict(self)
        return json.dumps({k: _jsonable(v) for k, v in d.items()}, sort_keys=True,
                          separators=(",", ":")).encode("utf-8")

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_bytes()).hexdigest()[:12]

    def run_dir(self, root) -> Path:
        return Path(root) / f"{self.name}-{self.config_hash()}"

    # -- views for the training code -----------------------------------------
    def train_config(self) -> TrainConfig:
        return TrainConfig(mode=self.mode, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           seed=self.seed, width=self.width, num_classes=self.num_classes, alpha=self.alpha,
                           perturbation=self.perturbation, bound_eps=None if math.isinf(self.bound_eps)
                           else self.bound_eps, epsilon=self.epsilon, steps=self.steps,
                           step_size=self.step_size, fraction=self.fraction)

    def discretizer_config(self, channels: int) -> DiscretizerConfig:
        return DiscretizerConfig(channels=channels, downsample=self.downsample, latent_dim=self.latent_dim,
                                 num_entries=self.num_entries, hidden=self.hidden, epochs=self.disc_epochs,
                                 batch_size=self.disc_batch_size, lr=self.disc_lr,
                                 commitment_weight=self.commitment_weight, seed=self.seed)


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_value(key: str, text: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(text)
            return low in ("1", "true", "yes")
        if kind == "int":
            return int(text)
        if kind == "float":
            return _parse_float(text)
        if kind == "Optional[float]":
            return None if text.lower() in ("", "none") else _parse_float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    return text


def _parse_float(text: str) -> float:
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def read_config_file(path) -> dict:
    """Parse UTF-8 ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        values[key] = parse_value(key, value)
    return values


def write_config_file(path, config: ExperimentConfig) -> None:
    lines = [f"# config hash {config.config_hash()}"]
    for f in fields(config):
        v = getattr(config, f.name)
        lines.append(f"{f.name} = {'none' if v is None else _jsonable(v)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    merged = {**(file_values or {}), **(overrides or {})}
    unknown = set(merged) - set(FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**merged).validate()
