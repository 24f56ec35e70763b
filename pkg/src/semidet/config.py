"""Experiment configuration: all thresholds, schedules, ablation switches.

The config round-trips losslessly through a flat ``key = value`` text
file; every key has a CLI flag equivalent and CLI flags override file
values.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np


class ConfigError(ValueError):
    """Configuration value outside its documented domain."""


@dataclass
class ExperimentConfig:
    dataset_dir: str = "dataset"
    out_dir: str = "runs/default"
    labeled_fraction: float = -1.0  # <= 0: keep the manifest's split
    iterations: int = 3000
    burn_in: int = 1000
    batch_size: int = 4
    sr: float = 0.25  # labeled fraction of each mixed batch
    sr_decay_frac: float = 0.016667  # final fraction of the run over which SR -> 0
    lam: float = 2.0  # unsupervised loss weight
    sigma: float = 0.5  # pseudo-label confidence threshold
    mu: float = 0.05  # fusion similarity threshold
    r_i: float = 0.7  # reweighting pivot
    ema_alpha: float = 0.999
    adso: bool = True
    fusion_box: bool = True
    dex: bool = True  # deformable stage in the encoder
    teacher_strong_aug: bool = False
    supervised_only: bool = False
    base_lr: float = 0.01
    warmup_iters: int = 150
    milestones: tuple[float, float] = (0.7, 0.9)  # fractions of the run
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0001
    eval_interval: int = 500
    checkpoint_interval: int = 0  # 0: only initial and final checkpoints
    seed: int = 0
    precision: str = "float32"
    anchor_stride: int = 16
    anchor_scales: tuple[float, ...] = (16.0, 32.0, 64.0, 96.0, 128.0)
    dilation_rates: tuple[int, ...] = (4, 6, 8)
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.supervised_only else self.lam

    def validate(self) -> None:
        if self.iterations < 0:
            raise ConfigError(f"iterations {self.iterations} < 0")
        if not 0 <= self.burn_in:
            raise ConfigError(f"burn_in {self.burn_in} < 0")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size {self.batch_size} < 1")
        if not 0.0 < self.sigma < 1.0:
            raise ConfigError(f"sigma {self.sigma} outside (0, 1)")
        if self.mu <= 0.0:
            raise ConfigError(f"mu {self.mu} must be positive")
        if not 0.0 < self.r_i < 1.0:
            raise ConfigError(f"r_i {self.r_i} outside (0, 1)")
        if self.lam < 0.0:
            raise ConfigError(f"lambda {self.lam} < 0")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ConfigError(f"ema_alpha {self.ema_alpha} outside [0, 1]")
        if not 0.0 <= self.sr <= 1.0:
            raise ConfigError(f"sr {self.sr} outside [0, 1]")
        if self.labeled_fraction > 1.0:
            raise ConfigError(f"labeled_fraction {self.labeled_fraction} > 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision {self.precision!r} not float32/float64")
        if self.base_lr <= 0.0:
            raise ConfigError(f"base_lr {self.base_lr} must be positive")
        if len(self.anchor_scales) < 1:
            raise ConfigError("anchor_scales must not be empty")

    # ------------------------------------------------------ flat text form

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        values: dict = {}
        known = {f.name: f for f in fields(cls)}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, raw, getattr(cls(), key))
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_text(f.read())


def _parse_value(key: str, raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected boolean, got {raw!r}")
    if isinstance(default, tuple):
        elem = default[0] if default else 0.0
        parts = [p for p in raw.split(",") if p.strip()]
        caster = int if isinstance(elem, int) else float
        return tuple(caster(p.strip()) for p in parts)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def derive_rng(seed: int, *tags: int) -> np.random.Generator:
    """Deterministic named stream from the experiment seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))
