"""Run configuration and its flat ``section.key = value`` text format."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    channels: int = 64
    patch: int = 4
    canvas: int = 64
    nodes: int = 64
    depth: int = 3
    k: int = 9
    pool: str = "literal"
    decoder: str = "smd"
    delta: float = 0.2
    tau: float = 0.1
    alpha: float = 0.01
    lr: float = 1e-3
    decay: float = 0.95
    decay_every: int = 1000
    iterations: int = 2000
    seed: int = 0
    precision: str = "float64"
    n_classes: int = 4
    patients: int = 200
    train_domain: str = "A"
    train_classes: tuple[int, ...] = (1, 2, 3)
    eval_domain: str = "B"
    eval_class: int = 4
    eval_episodes: int = 50
    shots: int = 1

    def __post_init__(self):
        if self.canvas % self.patch:
            raise ConfigError(f"data.canvas={self.canvas} is not divisible by model.patch={self.patch}")
        if self.channels % 4:
            raise ConfigError(f"model.channels={self.channels} must be divisible by 4")
        if self.pool not in POOL_CHOICES:
            raise ConfigError(f"model.pool={self.pool!r}; accepted values: {', '.join(POOL_CHOICES)}")
        if self.decoder not in DECODER_CHOICES:
            raise ConfigError(f"model.decoder={self.decoder!r}; accepted values: "
                              f"{', '.join(DECODER_CHOICES)}")
        if self.precision not in PRECISION_CHOICES:
            raise ConfigError(f"train.precision={self.precision!r}; accepted values: "
                              f"{', '.join(PRECISION_CHOICES)}")
        if not 0 < self.delta < math.log(2):
            raise ConfigError(f"cnc.delta={self.delta} must lie in (0, ln 2)")
        if self.tau <= 0 or self.alpha < 0:
            raise ConfigError("cnc.tau must be positive and cnc.alpha non-negative")
        if self.depth < 1 or self.k < 1:
            raise ConfigError("spg.depth and spg.k must be positive")

    @property
    def feature_hw(self) -> tuple[int, int]:
        return self.canvas // self.patch, self.canvas // self.patch

    @property
    def dtype(self):
        import numpy as np

        return np.float32 if self.precision == "float32" else np.float64


POOL_CHOICES = ("literal", "gather")
DECODER_CHOICES = ("smd", "prototype")
PRECISION_CHOICES = ("float64", "float32")

# config-file key -> TrainConfig field
KEYS = {
    "model.channels": "channels",
    "model.patch": "patch",
    "model.nodes": "nodes",
    "model.pool": "pool",
    "model.decoder": "decoder",
    "spg.depth": "depth",
    "spg.k": "k",
    "cnc.delta": "delta",
    "cnc.tau": "tau",
    "cnc.alpha": "alpha",
    "optim.lr": "lr",
    "optim.decay": "decay",
    "optim.decay_every": "decay_every",
    "train.iterations": "iterations",
    "train.seed": "seed",
    "train.precision": "precision",
    "data.canvas": "canvas",
    "data.classes": "n_classes",
    "data.patients": "patients",
    "data.train_domain": "train_domain",
    "data.train_classes": "train_classes",
    "eval.domain": "eval_domain",
    "eval.class": "eval_class",
    "eval.episodes": "eval_episodes",
    "eval.shots": "shots",
}
_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(field_name: str, raw: str):
    kind = _FIELD_TYPES[field_name]
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind.startswith("tuple"):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return raw


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}; accepted keys: {', '.join(sorted(KEYS))}")
        try:
            values[KEYS[key]] = _coerce(KEYS[key], raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {raw!r}") from exc
    return replace(base or TrainConfig(), **values)


def load_config(path: Path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def dump_config(cfg: TrainConfig) -> str:
    """All keys with their materialised values, in sorted key order."""
    data = asdict(cfg)
    lines = []
    for key in sorted(KEYS):
        value = data[KEYS[key]]
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
