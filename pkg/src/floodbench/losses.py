"""Supervised, entropy, and distribution-consistency losses.

All logarithms are natural. Probabilities are clamped to at least
``PROB_FLOOR`` before any log is taken.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError, ShapeError
from .tensor import Tensor

NUM_CLASSES = 4
PROB_FLOOR = 1e-12
KL_EPS = 1e-8


def check_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
        bad = labels[(labels < 0) | (labels >= NUM_CLASSES)][0]
        raise DataError(f"label value {bad} outside 0..{NUM_CLASSES - 1}")
    return labels.astype(np.int64, copy=False)


def one_hot(labels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """[B,H,W] integer labels to [B,4,H,W] indicators."""
    labels = check_labels(labels)
    classes = np.arange(NUM_CLASSES).reshape(1, NUM_CLASSES, *([1] * (labels.ndim - 1)))
    return (labels[:, None] == classes).astype(dtype)


def class_weights(labels: np.ndarray) -> np.ndarray:
    """Inverse class frequencies scaled to mean 1.

    Classes absent from ``labels`` get the largest weight among present
    classes; they contribute nothing to the loss until they appear anyway.
    """
    counts = np.bincount(check_labels(labels).ravel(), minlength=NUM_CLASSES).astype(np.float64)
    if counts.sum() == 0:
        return np.ones(NUM_CLASSES)
    present = counts > 0
    inv = np.zeros(NUM_CLASSES)
    inv[present] = counts.sum() / counts[present]
    inv[~present] = inv[present].max()
    return inv / inv.mean()


def weighted_cross_entropy(probs: Tensor, labels: np.ndarray, weights: Sequence[float] | None = None) -> Tensor:
    """``-(1/M) sum_i sum_c w_c y_ic log p_ic`` over the M labeled pixels."""
    w = np.ones(NUM_CLASSES) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (NUM_CLASSES,) or not (w > 0).all():
        raise ContractError(f"class weights must be {NUM_CLASSES} positive values, got {w}")
    target = one_hot(labels, probs.dtype)
    if target.shape != probs.shape:
        raise ShapeError(f"labels {np.shape(labels)} do not match probabilities {probs.shape}")
    target *= w.astype(probs.dtype).reshape(1, NUM_CLASSES, *([1] * (probs.ndim - 2)))
    pixels = probs.size // NUM_CLASSES
    return T.sum_(T.log(probs, floor=PROB_FLOOR) * target) * (-1.0 / pixels)


def entropy_loss(probs: Tensor) -> Tensor:
    """Mean per-pixel Shannon entropy of a [B,4,H,W] probability map."""
    pixels = probs.size // NUM_CLASSES
    return T.sum_(probs * T.log(probs, floor=PROB_FLOOR)) * (-1.0 / pixels)


def _smooth(p, eps: float):
    return (p + eps) / (1.0 + NUM_CLASSES * eps)


def _check_distribution(arr: np.ndarray, what: str) -> None:
    if arr.shape[-1] != NUM_CLASSES:
        raise ShapeError(f"{what} must have {NUM_CLASSES} entries, got shape {arr.shape}")
    if (arr < 0).any() or not np.allclose(arr.sum(axis=-1), 1.0, rtol=0, atol=1e-6):
        raise ContractError(f"{what} is not a probability vector: {arr}")


def kl_divergence(p, q) -> Tensor:
    """``KL(P || Q)`` after additive ``KL_EPS`` smoothing of both sides.

    ``p`` may be a Tensor (gradients flow into it) of shape [4] or [N,4];
    ``q`` is a fixed length-4 reference.
    """
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))
    q = np.asarray(q, dtype=np.float64)
    _check_distribution(p.data, "P")
    _check_distribution(q, "Q")
    ps = _smooth(p, KL_EPS)
    qs = _smooth(q, KL_EPS).astype(p.dtype)
    return T.sum_(ps * (T.log(ps) - np.log(qs)), axis=-1)


def consistency_terms(batch_p: Tensor, references: Sequence[np.ndarray]) -> list[Tensor]:
    """Mean KL of every row of ``batch_p`` [N,4] against each reference."""
    return [T.mean(kl_divergence(batch_p, q)) for q in references]


def consistency_loss(batch_p: Tensor, references: Sequence[np.ndarray], betas: Sequence[float]) -> Tensor:
    """``sum_k beta_k * (1/N) sum_i KL(P_i, Q_k)``."""
    references = list(references)
    betas = list(betas)
    if len(references) != len(betas):
        raise ContractError(f"{len(references)} references but {len(betas)} weights")
    total = None
    for beta, term in zip(betas, consistency_terms(batch_p, references)):
        total = term * beta if total is None else total + term * beta
    return total


def total_ssl_loss(l_sup: Tensor, l_entropy: Tensor, l_kl: Tensor, alpha: float) -> Tensor:
    """Supervised loss plus weighted entropy plus the (already weighted) KL term."""
    return l_sup + l_entropy * alpha + l_kl
