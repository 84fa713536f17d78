"""Run configuration: presets, a line-based ``key = value`` file format, overrides.

Example file::

    # cells for a small grid
    model = spaunet
    strategy = 1
    label_ratio = 0.1
    betas = 0.001
    channels = 8, 16, 32, 64, 128
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .models import MODEL_NAMES, ModelConfig
from .ssl import parse_strategy
from .training import TrainConfig

PRESETS: dict[str, dict] = {
    "desk": {
        "epochs": 30, "ssl_epochs": 30, "batch_size": 8, "lr": 1e-3, "lr_every": 60,
        "tile": 64, "train_stride": 32, "eval_stride": 64,
        "channels": (8, 16, 32, 64, 128), "bit_channels": 32,
        "scenes": 40, "size": 128,
    },
    # not expected to run to completion on desk hardware
    "paper": {
        "epochs": 150, "ssl_epochs": 150, "batch_size": 24, "lr": 3e-5, "lr_every": 60,
        "tile": 256, "train_stride": 128, "eval_stride": 256,
        "channels": (16, 32, 64, 128, 256), "bit_channels": 32,
        "scenes": 1064, "size": 1024,
    },
    # memorise 8 fixed tiles; train reports accuracy on those same tiles
    "overfit": {
        "epochs": 300, "ssl_epochs": 0, "batch_size": 8, "lr": 1e-3, "lr_every": 1000,
        "tile": 64, "train_stride": 64, "eval_stride": 64,
        "channels": (8, 16, 32, 64, 128), "bit_channels": 32,
        "scenes": 10, "size": 64, "label_ratio": 1.0, "weights": "unit",
        "split": (0.8, 0.1, 0.1), "eval_split": "train",
    },
}


@dataclass
class RunConfig:
    preset: str = "desk"
    model: str = "spaunet"
    strategy: int | None = None
    label_ratio: float = 0.1
    epochs: int = 30
    ssl_epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    lr_every: int = 60
    lam: float = 1e-4
    alpha: float = 0.001
    betas: tuple[float, ...] = (0.001,)
    buffer_n: int = 10
    weights: str = "auto"
    seed: int = 0
    dtype: str = "float32"
    tile: int = 64
    train_stride: int = 32
    eval_stride: int = 64
    channels: tuple[int, ...] = (8, 16, 32, 64, 128)
    bit_channels: int = 32
    tokens: int = 4
    heads: int = 4
    head_dim: int = 8
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    eval_split: str = "test"
    # synthesis
    scenes: int = 40
    size: int = 128
    class_ratios: tuple[float, ...] = (0.9170, 0.0428, 0.0368, 0.0033)
    # paths
    data: str | None = None
    out: str = "runs/out"
    init: str | None = None
    checkpoint: str | None = None
    # benchmark grid
    grid_models: tuple[str, ...] = ("spaunet", "bit")
    grid_strategies: tuple[str, ...] = ("none", "1")
    grid_label_ratios: tuple[float, ...] = (0.1, 0.5)
    grid_seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.model not in MODEL_NAMES:
            raise ConfigError(f"model: unknown model {self.model!r}; choose from {MODEL_NAMES}")
        try:
            strategy = parse_strategy(self.strategy)
        except ConfigError as exc:
            raise ConfigError(f"strategy: {exc}") from None
        self.strategy = None if strategy is None else int(strategy)
        if not 0 < self.label_ratio <= 1:
            raise ConfigError(f"label_ratio: must lie in (0, 1], got {self.label_ratio}")
        if self.eval_split not in ("train", "val", "test", "all"):
            raise ConfigError(f"eval_split: must be train, val, test or all, got {self.eval_split!r}")
        for m in self.grid_models:
            if m not in MODEL_NAMES:
                raise ConfigError(f"grid_models: unknown model {m!r}")
        for s in self.grid_strategies:
            try:
                parse_strategy(s)
            except ConfigError:
                raise ConfigError(f"grid_strategies: bad strategy {s!r}") from None
        if self.weights not in ("auto", "unit"):
            try:
                w = [float(x) for x in str(self.weights).split(",")]
            except ValueError:
                raise ConfigError(f"weights: expected auto, unit or 4 numbers, got {self.weights!r}") from None
            if len(w) != 4 or min(w) <= 0:
                raise ConfigError(f"weights: expected 4 positive numbers, got {self.weights!r}")
        if self.tile % 16 and self.model != "bit":
            raise ConfigError(f"tile: {self.model} needs a multiple of 16, got {self.tile}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(encoder_channels=self.channels, bit_channels=self.bit_channels, lam=self.lam,
                           tokens=self.tokens, heads=self.heads, head_dim=self.head_dim,
                           dtype=self.dtype, seed=self.seed)

    def train_config(self, epochs: int | None = None) -> TrainConfig:
        weights = self.weights
        if weights not in ("auto", "unit"):
            weights = tuple(float(x) for x in weights.split(","))
        return TrainConfig(epochs=self.epochs if epochs is None else epochs, batch_size=self.batch_size,
                           lr=self.lr, lr_every=self.lr_every, seed=self.seed, weights=weights,
                           alpha=self.alpha, betas=self.betas, buffer_n=self.buffer_n,
                           label_ratio=self.label_ratio)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    def with_(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw):
    """Convert a raw string (or already-typed value) to the field's type."""
    default = _FIELDS[key].default
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(raw, list) else raw
    text = raw.strip()
    try:
        if key == "strategy":
            return None if text.lower() in ("none", "") else int(text)
        if text.lower() == "none" and (default is None or key in ("data", "init", "checkpoint")):
            return None
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            elem = type(default[0]) if default else str
            return tuple(elem(p) for p in parts)
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def format_config(cfg: RunConfig) -> str:
    lines = []
    for name, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{name} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the preset, then file values, then command-line overrides."""
    merged: dict = {}
    for layer in (file_values or {}, overrides or {}):
        for k, v in layer.items():
            if v is None:
                continue
            k = k.replace("-", "_")
            if k not in _FIELDS:
                raise ConfigError(f"unknown key {k!r}")
            merged[k] = _coerce(k, v)
    preset = merged.get("preset", RunConfig.preset)
    if preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = {**PRESETS[preset], **merged}
    return RunConfig(**values)


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    file_values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        file_values = parse_config_text(p.read_text(), str(p))
    return resolve(file_values, overrides)
