"""Run configuration: a flat dataclass with a key=value text representation.

Precedence is CLI flag > config file > default. Unknown keys are rejected by
name. The same text form is echoed into checkpoints and manifests so a saved
run can be rebuilt exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .data import DATASET_KINDS


@dataclass(frozen=True)
class TrainConfig:
    # data geometry
    image_size: int = 16
    channels: int = 3
    patch: int = 4
    dataset: str = "checkerboard"
    class_count: int = 4
    train_size: int = 512
    holdout_size: int = 128
    # model shape
    n_blocks: int = 4
    block_layers: int = 1
    block_width: int = 64
    ar_layers: int = 2
    ar_width: int = 128
    n_heads: int = 4
    d_inf: int = 8
    k_inf: int = 8
    k_red: int = 16
    cond_repeat: int = 4
    redundant_prior: str = "learned"
    final_permute: bool = False
    max_tokens: int = 80
    # optimization
    total_steps: int = 20_000
    batch_size: int = 32
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    warmup_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.03
    grad_clip: float = 1.0
    sigma_start: float = 0.1
    sigma_end: float = 0.005
    cond_dropout: float = 0.1
    stop_flow_gradient: bool = False
    # run control
    dtype: str = "float32"
    seed: int = 0
    log_every: int = 50
    ckpt_every: int = 5000

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError(f"patch {self.patch} does not divide image_size {self.image_size}")
        if self.dataset not in DATASET_KINDS:
            raise ValueError(f"dataset must be one of {DATASET_KINDS}")
        if not 0 <= self.d_inf <= self.token_dim:
            raise ValueError(f"d_inf {self.d_inf} outside [0, {self.token_dim}]")
        if self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")
        if min(self.lr_max, self.lr_min, self.batch_size, self.total_steps) <= 0:
            raise ValueError("rates and sizes must be positive")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError("cond_dropout must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.redundant_prior not in ("learned", "standard"):
            raise ValueError("redundant_prior must be learned or standard")
        if self.max_tokens < self.n_tokens:
            raise ValueError("max_tokens must cover the token count")

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def token_dim(self) -> int:
        return self.channels * self.patch * self.patch

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _parse_value(name: str, raw: str):
    field = _FIELDS[name]
    if field.type in ("bool", bool):
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {name!r}: cannot parse boolean from {raw!r}")
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    return raw.strip()


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for name in sorted(_FIELDS):
        value = getattr(cfg, name)
        lines.append(f"{name}={value}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict:
    """Parse key=value lines (# comments allowed) into typed overrides."""
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        overrides[key] = _parse_value(key, raw)
    return overrides


def config_from_text(text: str) -> TrainConfig:
    return TrainConfig(**parse_config_text(text))


def load_config_file(path: str) -> dict:
    with open(path) as fh:
        return parse_config_text(fh.read())


def make_config(file_overrides: dict | None = None, cli_overrides: dict | None = None) -> TrainConfig:
    merged: dict = {}
    merged.update(file_overrides or {})
    for key, value in (cli_overrides or {}).items():
        if value is not None:
            if key not in _FIELDS:
                raise ValueError(f"unknown config key {key!r}")
            merged[key] = value
    return TrainConfig(**merged)
