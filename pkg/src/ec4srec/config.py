"""Experiment configuration: nested dataclasses with a flat ``dotted.key=value`` text form."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .augment import AugmentParams
from .encoders import EncoderSpec
from .explain import resolve_method, schedule_updates
from .losses import MODES, LossConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExplainConfig:
    method: str = "occlusion"
    steps: int = 32  # integrated-gradients path steps

    def __post_init__(self):
        self.method = resolve_method(self.method)
        if self.steps < 1:
            raise ValueError("explain.steps must be >= 1")


@dataclass
class ExperimentConfig:
    mode: str = "full"
    epochs: int = 20
    p: int = 1
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    train_samples: str = "all"  # all prefixes, or only the longest per user
    eval_ks: tuple[int, ...] = (5, 10)
    select_metric: str = "NDCG@5"
    patience: int = 0  # 0 disables early stopping
    # guided-phase loss subset (ablation); empty means the mode's default set
    losses: tuple[str, ...] = ()
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)
    explain: ExplainConfig = field(default_factory=ExplainConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        unknown = set(self.losses) - {"cl+", "cl-", "sl+"}
        if unknown:
            raise ConfigError(f"unknown losses {sorted(unknown)}")
        self.eval_ks = tuple(int(k) for k in self.eval_ks)
        self.losses = tuple(self.losses)
        if self.select_metric.split("@")[0] not in ("HR", "NDCG"):
            raise ConfigError(f"select_metric must look like NDCG@5, got {self.select_metric!r}")
        try:
            sched = schedule_updates(self.epochs, self.p)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if sched.update_epochs and sched.update_epochs[-1] >= self.epochs:
            raise ConfigError("last scheduled refresh must come before the final epoch")

    def to_flat(self) -> dict[str, Any]:
        return flatten(self)

    def digest(self) -> str:
        payload = json.dumps(self.to_flat(), sort_keys=True, default=list).encode()
        return hashlib.sha256(payload).hexdigest()[:12]

    def replace(self, **flat_overrides) -> "ExperimentConfig":
        flat = self.to_flat()
        flat.update(flat_overrides)
        return from_flat(flat)


def flatten(obj, prefix: str = "") -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = value
    return out


def valid_keys() -> list[str]:
    return sorted(flatten(ExperimentConfig()))


def _coerce(raw: Any, default: Any, key: str):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            elem = type(default[0]) if default else str
            return tuple(elem(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return text


def from_flat(flat: dict[str, Any]) -> ExperimentConfig:
    defaults = flatten(ExperimentConfig())
    unknown = set(flat) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}; valid keys: {', '.join(sorted(defaults))}")
    merged = {k: _coerce(flat.get(k, v), v, k) for k, v in defaults.items()}
    nested: dict[str, dict[str, Any]] = {}
    top = {}
    for key, value in merged.items():
        if "." in key:
            group, name = key.split(".", 1)
            nested.setdefault(group, {})[name] = value
        else:
            top[key] = value
    try:
        return ExperimentConfig(
            **top,
            encoder=EncoderSpec(**nested["encoder"]),
            loss=LossConfig(**nested["loss"]),
            augment=AugmentParams(**nested["augment"]),
            explain=ExplainConfig(**nested["explain"]),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    flat: dict[str, Any] = {}
    if path is not None:
        flat.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    flat.update(overrides or {})
    return from_flat(flat)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key, value in cfg.to_flat().items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
