"""Supervised training, prediction and evaluation loops."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import TileSet
from .errors import ConfigError, NumericError
from .losses import class_weights, weighted_cross_entropy
from .metrics import MetricsReport, evaluate_maps
from .models import prepare_images
from .nn import Module
from .optim import Adam, lr_schedule
from .tensor import Tape

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 24
    lr: float = 3e-5
    lr_every: int = 60
    seed: int = 0
    weights: str | tuple = "auto"  # "auto" (inverse frequency), "unit", or 4 floats
    alpha: float = 0.001
    betas: tuple[float, ...] = (0.001,)
    buffer_n: int = 10
    freeze: bool = False
    label_ratio: float = 1.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr >= 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.buffer_n < 1:
            raise ConfigError("buffer_n must be at least 1")
        self.betas = tuple(float(b) for b in self.betas)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)


def resolve_weights(spec, labels: np.ndarray) -> np.ndarray:
    if isinstance(spec, str):
        if spec == "auto":
            return class_weights(labels)
        if spec == "unit":
            return np.ones(4)
        raise ConfigError(f"unknown class weight mode {spec!r}")
    w = np.asarray(spec, dtype=np.float64)
    if w.shape != (4,) or not (w > 0).all():
        raise ConfigError(f"class weights must be 4 positive numbers, got {spec}")
    return w


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches; the order depends only on (seed, epoch)."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def model_dtype(model: Module):
    return model.parameters()[0].dtype


def forward_probs(model: Module, pre: np.ndarray, post: np.ndarray):
    dt = model_dtype(model)
    logits = model(prepare_images(pre, dt), prepare_images(post, dt))
    return T.softmax(logits, axis=1)


def _check_finite(value: float, step: int) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss at step {step}")


def pretrain(model: Module, labeled: TileSet, config: TrainConfig) -> TrainResult:
    """Supervised training with weighted cross-entropy only."""
    if len(labeled) == 0:
        raise ConfigError("labeled set is empty")
    weights = resolve_weights(config.weights, labeled.labels)
    opt = Adam(model.parameters(), lr=config.lr)
    result = TrainResult(params={})
    step = 0
    for epoch in range(config.epochs):
        opt.lr = lr_schedule(config.lr, epoch, every=config.lr_every)
        losses = []
        for idx in epoch_batches(len(labeled), config.batch_size, config.seed, epoch):
            opt.zero_grad()
            with Tape() as tape:
                probs = forward_probs(model, labeled.pre[idx], labeled.post[idx])
                loss = weighted_cross_entropy(probs, labeled.labels[idx], weights)
            value = loss.item()
            _check_finite(value, step)
            tape.backward(loss)
            if not config.freeze:
                opt.step()
            losses.append(value)
            result.steps.append({"step": step, "epoch": epoch, "L_s": value})
            step += 1
        row = {"epoch": epoch, "L_s": float(np.mean(losses)), "L_entropy": 0.0, "L_kl": 0.0,
               "total": float(np.mean(losses)), "lr": opt.lr}
        result.history.append(row)
        log.info("epoch %d L_s=%.5f", epoch, row["L_s"])
    result.params = {k: v.copy() for k, v in model.state_dict().items()}
    return result


def predict(model: Module, pre: np.ndarray, post: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Per-pixel class predictions; exact ties go to the lowest class index."""
    out = []
    for i in range(0, len(pre), batch_size):
        probs = forward_probs(model, pre[i:i + batch_size], post[i:i + batch_size])
        out.append(probs.data.argmax(axis=1).astype(np.uint8))
    return np.concatenate(out) if out else np.zeros((0,) + pre.shape[2:], dtype=np.uint8)


def evaluate(model: Module, tiles: TileSet, batch_size: int = 16) -> dict[str, MetricsReport]:
    preds = predict(model, tiles.pre, tiles.post, batch_size)
    return evaluate_maps(tiles.labels, preds)


def pixel_accuracy(model: Module, tiles: TileSet, batch_size: int = 16) -> float:
    preds = predict(model, tiles.pre, tiles.post, batch_size)
    return float((preds == tiles.labels).mean())


def overfit(model: Module, tiles: TileSet, steps: int = 500, lr: float = 1e-3, target: float = 0.99,
            weights="unit", check_every: int = 10) -> tuple[int, float]:
    """Full-batch Adam on a fixed tile batch until pixel accuracy reaches ``target``.

    Returns (steps taken, final accuracy). Accuracy is measured on the
    forward pass of the current step, i.e. before that step's update.
    """
    w = resolve_weights(weights, tiles.labels)
    opt = Adam(model.parameters(), lr=lr)
    acc = 0.0
    for step in range(steps):
        opt.zero_grad()
        with Tape() as tape:
            probs = forward_probs(model, tiles.pre, tiles.post)
            loss = weighted_cross_entropy(probs, tiles.labels, w)
        _check_finite(loss.item(), step)
        if step % check_every == 0:
            acc = float((probs.data.argmax(axis=1) == tiles.labels).mean())
            if acc >= target:
                return step, acc
        tape.backward(loss)
        opt.step()
    return steps, pixel_accuracy(model, tiles)
