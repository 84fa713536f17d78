"""Semi-supervised training with image-level distribution consistency.

Each step combines three terms: weighted cross-entropy on a labeled batch,
entropy of the predictions on an unlabeled batch, and the KL divergence
between each unlabeled image's predicted class distribution and one or
more reference distributions. References are running means over small
FIFO buffers of per-image class histograms; which histograms feed the
buffers is set by the strategy:

1. argmax predictions on unlabeled images (pseudo-labels)
2. argmax predictions on labeled images
3. ground-truth labels of labeled images
4. all three, each with its own buffer and KL weight
"""

from __future__ import annotations

import copy
import enum
import logging
from collections import deque

import numpy as np

from . import tensor as T
from .data import TileSet
from .errors import ConfigError, ContractError
from .losses import consistency_terms, entropy_loss, total_ssl_loss, weighted_cross_entropy
from .nn import Module
from .optim import Adam, lr_schedule
from .tensor import Tape
from .training import (TrainConfig, TrainResult, _check_finite, epoch_batches, forward_probs,
                       predict, resolve_weights)

log = logging.getLogger(__name__)


class Strategy(enum.IntEnum):
    PSEUDO_UNLABELED = 1
    PRED_LABELED = 2
    GROUND_TRUTH = 3
    COMBINED = 4


STREAMS = {
    Strategy.PSEUDO_UNLABELED: ("pseudo",),
    Strategy.PRED_LABELED: ("labeled_pred",),
    Strategy.GROUND_TRUTH: ("ground_truth",),
    Strategy.COMBINED: ("pseudo", "labeled_pred", "ground_truth"),
}


def parse_strategy(value) -> Strategy | None:
    if value is None or str(value).lower() in ("none", "0", ""):
        return None
    try:
        return Strategy(int(value))
    except (ValueError, TypeError):
        raise ConfigError(f"strategy must be none or 1-4, got {value!r}") from None


def class_distribution(label_map: np.ndarray) -> np.ndarray:
    """Share of pixels in each of the four classes."""
    arr = np.asarray(label_map)
    if arr.size == 0:
        raise ContractError("cannot take the class distribution of an empty map")
    counts = np.bincount(arr.ravel().astype(np.int64), minlength=4)
    if counts.size > 4:
        raise ContractError("label map values must lie in 0..3")
    return counts / arr.size


class ReferenceBuffer:
    """FIFO of the last ``capacity`` class distributions."""

    def __init__(self, capacity: int = 10):
        if capacity < 1:
            raise ConfigError("buffer capacity must be at least 1")
        self.capacity = capacity
        self.entries: deque[np.ndarray] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, dist: np.ndarray) -> None:
        dist = np.asarray(dist, dtype=np.float64)
        if dist.shape != (4,) or (dist < 0).any() or abs(dist.sum() - 1.0) > 1e-9:
            raise ContractError(f"not a class distribution: {dist}")
        self.entries.append(dist.copy())

    def extend_from_maps(self, label_maps: np.ndarray) -> None:
        for m in label_maps:
            self.push(class_distribution(m))

    def reference(self) -> np.ndarray:
        """Mean of the stored entries (a partial mean while filling up)."""
        if not self.entries:
            raise ContractError("reference buffer is empty")
        q = np.mean(np.stack(self.entries), axis=0)
        return q / q.sum()


def buffer_reference(buffer: ReferenceBuffer) -> np.ndarray:
    return buffer.reference()


def make_buffers(capacity: int = 10) -> dict[str, ReferenceBuffer]:
    return {name: ReferenceBuffer(capacity) for name in ("pseudo", "labeled_pred", "ground_truth")}


def predict_labels(model: Module, pre: np.ndarray, post: np.ndarray, batch_size: int = 16) -> np.ndarray:
    return predict(model, pre, post, batch_size)


def select_reference(strategy: Strategy, model: Module | None, labeled_batch, unlabeled_batch,
                     buffers: dict[str, ReferenceBuffer], pseudo=None, labeled_pred=None) -> list[np.ndarray]:
    """Refresh the strategy's buffers with this batch and return its references.

    ``labeled_batch`` is ``(pre, post, labels)`` and ``unlabeled_batch`` is
    ``(pre, post)``. Precomputed argmax maps may be passed through ``pseudo``
    and ``labeled_pred`` to skip the extra forward passes.
    """
    strategy = Strategy(strategy)
    refs = []
    for stream in STREAMS[strategy]:
        if stream == "pseudo":
            if pseudo is None:
                if unlabeled_batch is None or model is None:
                    raise ConfigError(f"strategy {int(strategy)} needs unlabeled images and a model")
                pseudo = predict_labels(model, *unlabeled_batch[:2])
            buffers[stream].extend_from_maps(pseudo)
        elif stream == "labeled_pred":
            if labeled_pred is None:
                if labeled_batch is None or model is None:
                    raise ConfigError(f"strategy {int(strategy)} needs labeled images and a model")
                labeled_pred = predict_labels(model, *labeled_batch[:2])
            buffers[stream].extend_from_maps(labeled_pred)
        else:
            if labeled_batch is None or len(labeled_batch) < 3 or labeled_batch[2] is None:
                raise ConfigError(f"strategy {int(strategy)} needs ground-truth labels")
            buffers[stream].extend_from_maps(labeled_batch[2])
        refs.append(buffers[stream].reference())
    return refs


def ssl_train(model: Module, labeled: TileSet, unlabeled: TileSet, strategy: Strategy,
              config: TrainConfig, snapshot: Module | None = None,
              buffers: dict[str, ReferenceBuffer] | None = None) -> TrainResult:
    """Continue training ``model`` (already pre-trained) with the SSL objective.

    An epoch is one pass over the labeled tiles in the same order
    :func:`~floodbench.training.pretrain` would use; unlabeled batches are
    drawn from an independently shuffled, endlessly cycled stream. During
    the first epoch pseudo-labels come from ``snapshot`` (a frozen copy of
    the incoming model unless given), afterwards from the model being
    trained. Buffers persist across epochs.
    """
    strategy = Strategy(strategy)
    if len(unlabeled) == 0:
        raise ConfigError("unlabeled set is empty")
    if len(labeled) == 0:
        raise ConfigError("labeled set is empty")
    betas = list(config.betas)
    n_refs = len(STREAMS[strategy])
    if len(betas) == 1 and n_refs > 1:
        betas = betas * n_refs
    if len(betas) != n_refs:
        raise ConfigError(f"strategy {int(strategy)} needs {n_refs} KL weights, got {len(config.betas)}")
    needs_model = strategy != Strategy.GROUND_TRUTH
    if snapshot is None and needs_model:
        snapshot = copy.deepcopy(model)
    buffers = buffers if buffers is not None else make_buffers(config.buffer_n)
    weights = resolve_weights(config.weights, labeled.labels)
    opt = Adam(model.parameters(), lr=config.lr)
    unl_rng = np.random.default_rng([config.seed, 7919])
    unl_order = deque()
    result = TrainResult(params={})
    step = 0
    for epoch in range(config.epochs):
        opt.lr = lr_schedule(config.lr, epoch, every=config.lr_every)
        rows = []
        for idx in epoch_batches(len(labeled), config.batch_size, config.seed, epoch):
            while len(unl_order) < config.batch_size:
                unl_order.extend(unl_rng.permutation(len(unlabeled)).tolist())
            uidx = np.array([unl_order.popleft() for _ in range(min(config.batch_size, len(unlabeled)))])
            lab = (labeled.pre[idx], labeled.post[idx], labeled.labels[idx])
            unl = (unlabeled.pre[uidx], unlabeled.post[uidx])
            pseudo = labeled_pred = None
            if epoch == 0 and needs_model:
                pseudo = predict_labels(snapshot, *unl) if "pseudo" in STREAMS[strategy] else None
                if "labeled_pred" in STREAMS[strategy]:
                    labeled_pred = predict_labels(snapshot, *lab[:2])

            opt.zero_grad()
            with Tape() as tape:
                probs_l = forward_probs(model, *lab[:2])
                l_sup = weighted_cross_entropy(probs_l, lab[2], weights)
                probs_u = forward_probs(model, *unl)
                l_ent = entropy_loss(probs_u)
                if epoch > 0:
                    pseudo = probs_u.data.argmax(axis=1)
                    labeled_pred = probs_l.data.argmax(axis=1)
                refs = select_reference(strategy, None, lab, unl, buffers, pseudo=pseudo, labeled_pred=labeled_pred)
                image_dist = T.mean(probs_u, axis=(2, 3))  # [N, 4] soft class distribution
                terms = consistency_terms(image_dist, refs)
                l_kl = terms[0] * betas[0]
                for beta, term in zip(betas[1:], terms[1:]):
                    l_kl = l_kl + term * beta
                total = total_ssl_loss(l_sup, l_ent, l_kl, config.alpha)
            _check_finite(total.item(), step)
            tape.backward(total)
            if not config.freeze:
                opt.step()
            row = {"L_s": l_sup.item(), "L_entropy": l_ent.item(), "L_kl": l_kl.item(), "total": total.item()}
            row.update({f"kl_q{k + 1}": t.item() for k, t in enumerate(terms)})
            rows.append(row)
            result.steps.append({"step": step, "epoch": epoch, **row,
                                 "references": [r.tolist() for r in refs]})
            step += 1
        summary = {"epoch": epoch}
        summary.update({k: float(np.mean([r[k] for r in rows])) for k in rows[0]})
        summary.update({"lr": opt.lr, "strategy": int(strategy), "label_ratio": config.label_ratio,
                        "seed": config.seed})
        result.history.append(summary)
        log.info("epoch %d total=%.5f L_kl=%.6f", epoch, summary["total"], summary["L_kl"])
    result.params = {k: v.copy() for k, v in model.state_dict().items()}
    return result
