"""Run configuration: one flat key=value file covering architecture,
optimization, and data location.  Unknown keys are rejected so typos
cannot silently fall back to defaults."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

from .models import NetworkSpec
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int = 0):
        suffix = f" (line {line})" if line else ""
        super().__init__(f"{message}{suffix}")
        self.line = line


@dataclass
class RunConfig:
    variant: str = "cieunet"
    norm_kind: str = "BN"
    context: str = "auto"
    in_channels: int = 3
    base_width: int = 32
    classes: int = 2
    multigrid: bool = True
    psp_bins: Tuple[int, ...] = (1, 2, 3, 6)
    aspp_rates: Tuple[int, ...] = (6, 12, 18)
    gn_groups: int = 8

    patch_size: int = 64
    batch_size: int = 64
    max_steps: int = 30000
    base_lr: float = 1e-3
    poly_power: float = 0.9
    weight_decay: float = 1e-5
    clip_norm: float = 0.5
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0

    data_root: str = ""

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(
            variant=self.variant, norm_kind=self.norm_kind, context=self.context,
            in_channels=self.in_channels, base_width=self.base_width,
            classes=self.classes, multigrid=self.multigrid,
            psp_bins=tuple(self.psp_bins), aspp_rates=tuple(self.aspp_rates),
            gn_groups=self.gn_groups)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            patch_size=self.patch_size, batch_size=self.batch_size,
            max_steps=self.max_steps, base_lr=self.base_lr,
            poly_power=self.poly_power, weight_decay=self.weight_decay,
            clip_norm=self.clip_norm, beta1=self.beta1, beta2=self.beta2,
            adam_eps=self.adam_eps, seed=self.seed, log_every=self.log_every,
            checkpoint_every=self.checkpoint_every)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(name: str, raw: str, line: int):
    default = _FIELDS[name].default
    if isinstance(default, bool):
        if raw == "true":
            return True
        if raw == "false":
            return False
        raise ConfigError(f"{name} must be true or false, got {raw!r}", line)
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}", line) from exc
    return raw


def parse_config(text: str) -> RunConfig:
    """Parse key=value lines; # starts a full-line comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", lineno)
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        if not val:
            raise ConfigError(f"empty value for {key!r}", lineno)
        values[key] = _parse_value(key, val, lineno)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: RunConfig) -> str:
    """Round-trippable text form of every field."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        else:
            text = str(value)
        lines.append(f"{f.name}={text}")
    return "\n".join(lines) + "\n"


def write_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
