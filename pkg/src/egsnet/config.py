"""Flat run configuration: one documented key per field, YAML file plus ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Optional

import yaml

from .datasets import SyntheticConfig
from .losses import LossConfig

MODES = ("full", "joint_only", "alternate_only", "emotion_only", "similarity_only")
CHOICES = {
    "mode": MODES,
    "metric": ("prototype", "cosine", "relation"),
    "backbone": ("conv4", "resnet18"),
    "period_unit": ("steps", "epochs"),
    "theta_counter": ("global", "per_period"),
    "eval_branch": ("similarity", "emotion"),
}


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class Config:
    # data; an empty data_dir means "generate the synthetic suite in memory"
    data_dir: str = ""
    image_side: int = 84
    num_basic_classes: int = 7
    num_compound_classes: int = 12
    samples_per_class: int = 40
    domain_shift_strength: float = 0.3
    noise_std: float = 0.6
    num_source_domains: int = 3
    data_seed: int = 0
    # model
    backbone: str = "conv4"
    channels: int = 64
    blocks: int = 4
    metric: str = "prototype"
    # schedule
    mode: str = "full"
    epochs_joint: int = 200
    epochs_alternate: int = 5
    episodes_per_epoch: int = 100
    period_len: int = 20
    period_unit: str = "steps"
    n_way: int = 5
    k_shot: int = 5
    n_query: int = 16
    batch_size: int = 32
    lr: float = 0.001
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 0
    # losses
    lambda_emo: float = 1.0
    theta0: float = 1.0
    theta_gamma: float = 0.5
    theta_step: int = 100
    weight_decay_enabled: bool = True
    theta_counter: str = "global"
    # alternate stage: also step the opposite period's head (it sees zero gradient, so only Adam momentum moves it)
    train_classifier_in_similarity: bool = False
    train_metric_in_emotion: bool = False
    # evaluation
    eval_tasks: int = 1000
    eval_shots: str = "1,5"
    eval_splits: str = "target,basic,compound"
    eval_query: int = 16
    eval_seed: int = 1234
    eval_branch: str = "similarity"
    db_max_samples: int = 0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in CHOICES and value not in CHOICES[f.name]:
                raise ConfigError(f.name, f"{value!r} not in {CHOICES[f.name]}")
        positive = (
            "image_side", "num_basic_classes", "samples_per_class", "num_source_domains", "channels",
            "blocks", "episodes_per_epoch", "period_len", "n_way", "k_shot", "n_query", "batch_size",
            "theta_step", "eval_tasks", "eval_query",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be positive")
        for name in ("epochs_joint", "epochs_alternate", "checkpoint_every", "db_max_samples",
                     "num_compound_classes", "lambda_emo", "theta0", "noise_std", "domain_shift_strength"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        if not 0 < self.theta_gamma <= 1:
            raise ConfigError("theta_gamma", "must lie in (0, 1]")
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("lr", "need lr > 0 and betas in [0, 1)")
        try:
            self.shots
        except ValueError:
            raise ConfigError("eval_shots", f"expected comma-separated integers, got {self.eval_shots!r}") from None

    @property
    def shots(self) -> list[int]:
        return [int(s) for s in str(self.eval_shots).split(",") if s.strip()]

    @property
    def splits(self) -> list[str]:
        return [s.strip() for s in str(self.eval_splits).split(",") if s.strip()]

    def loss(self) -> LossConfig:
        return LossConfig(self.lambda_emo, self.theta0, self.theta_gamma, self.theta_step, self.weight_decay_enabled)

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(
            num_basic_classes=self.num_basic_classes,
            num_compound_classes=self.num_compound_classes,
            image_side=self.image_side,
            samples_per_class=self.samples_per_class,
            domain_shift_strength=self.domain_shift_strength,
            noise_std=self.noise_std,
            seed=self.data_seed,
            num_source_domains=self.num_source_domains,
        )

    def replace(self, **changes) -> "Config":
        return coerce_overrides(self, changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def content_hash(self) -> str:
        """Git-style blob hash of the canonical JSON dump."""
        body = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


_FIELDS = {f.name: f for f in fields(Config)}


def _coerce(name: str, value):
    kind = _FIELDS[name].type
    try:
        if kind == "bool":
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("true", "yes", "1", "on"):
                    return True
                if low in ("false", "no", "0", "off"):
                    return False
                raise ValueError(value)
            if isinstance(value, (bool, int)):
                return bool(value)
            raise ValueError(value)
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if kind == "str":
            if isinstance(value, (list, tuple)):
                return ",".join(str(v) for v in value)
            return "" if value is None else str(value)
    except (TypeError, ValueError):
        raise ConfigError(name, f"cannot interpret {value!r} as {kind}") from None
    raise ConfigError(name, f"unsupported field type {kind}")


def coerce_overrides(base: Config, overrides: dict) -> Config:
    changes = {}
    for key, value in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(key, "unknown configuration key")
        changes[key] = _coerce(key, value)
    return dataclasses.replace(base, **changes)


def parse_set(items: Iterable[str]) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        value = yaml.safe_load(raw) if raw.strip() else ""
        out[key] = value
    return out


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> Config:
    data = {}
    if path:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(str(path), "config file must be a flat key: value mapping")
        for k, v in loaded.items():
            if isinstance(v, dict):
                raise ConfigError(str(k), "nested sections are not allowed; keys are flat")
        data.update(loaded)
    data.update(overrides or {})
    return coerce_overrides(Config(), data)


def dump_config(cfg: Config, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
