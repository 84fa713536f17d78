"""Central finite-difference checks for every differentiable op and the models.

Relative error of a checked tensor is ``||analytic - numeric|| /
max(||analytic||, ||numeric||, floor)`` over the checked entries. The floor
is 1e-12 for single ops and 1e-4 for whole models, where some gradients are
exactly zero (a bias shared by both BIT streams cancels in the difference).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import AttentionHeads, attention_head, ma_decode, msa_encode, prior_attention, tokenize
from .losses import consistency_loss, entropy_loss, kl_divergence, total_ssl_loss, weighted_cross_entropy
from .models import ModelConfig, build_model
from .tensor import Tape, Tensor

OP_TOL = 1e-6
MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    rel_err: float
    tol: float
    entries: int

    @property
    def passed(self) -> bool:
        return self.rel_err < self.tol


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def analytic_grads(loss_fn: Callable[[], Tensor], tensors: list[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def numeric_grad(loss_fn: Callable[[], Tensor], t: Tensor, index, h: float = 1e-5) -> float:
    orig = t.data[index]
    t.data[index] = orig + h
    up = loss_fn().item()
    t.data[index] = orig - h
    down = loss_fn().item()
    t.data[index] = orig
    return (up - down) / (2 * h)


def check_tensors(name: str, loss_fn: Callable[[], Tensor], tensors: list[Tensor], tol: float = OP_TOL,
                  max_entries: int | None = None, h: float = 1e-5, rng: np.random.Generator | None = None,
                  floor: float = 1e-12) -> list[CheckResult]:
    """Compare analytic and numeric gradients of ``loss_fn`` for each tensor.

    With ``max_entries`` set, larger tensors are checked on a random subset
    of entries plus one random direction through the whole tensor.
    """
    rng = rng or np.random.default_rng(0)
    grads = analytic_grads(loss_fn, tensors)
    results = []
    for k, (t, g) in enumerate(zip(tensors, grads)):
        label = t.name or f"{name}[{k}]"
        if max_entries is None or t.size <= max_entries:
            flat = range(t.size)
        else:
            flat = rng.choice(t.size, size=max_entries, replace=False)
        idx = [np.unravel_index(i, t.shape) for i in flat]
        num = np.array([numeric_grad(loss_fn, t, i, h) for i in idx])
        ana = np.array([g[i] for i in idx])
        if max_entries is not None and t.size > max_entries:
            direction = rng.standard_normal(t.shape)
            direction /= np.linalg.norm(direction)
            orig = t.data.copy()
            t.data = orig + h * direction
            up = loss_fn().item()
            t.data = orig - h * direction
            down = loss_fn().item()
            t.data = orig
            num = np.append(num, (up - down) / (2 * h))
            ana = np.append(ana, float((g * direction).sum()))
        results.append(CheckResult(label, rel_error(ana, num, floor), tol, len(num)))
    return results


def _rand(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    return Tensor(np.abs(x) + 0.5 if positive else x, requires_grad=True, dtype=np.float64)


def op_checks(seed: int = 0) -> list[CheckResult]:
    """Per-op checks on small random 64-bit inputs."""
    rng = np.random.default_rng(seed)
    out: list[CheckResult] = []

    def probe(name, fn, tensors):
        out_shape = fn().shape
        weights = rng.standard_normal(out_shape)

        def loss():
            return T.sum_(fn() * weights)

        worst = max(check_tensors(name, loss, tensors), key=lambda r: r.rel_err)
        out.append(CheckResult(name, worst.rel_err, OP_TOL, sum(t.size for t in tensors)))

    x4 = _rand(rng, 2, 3, 6, 6)
    w = _rand(rng, 4, 3, 3, 3)
    b = _rand(rng, 4)
    probe("conv2d", lambda: T.conv2d(x4, w, b), [x4, w, b])
    w1 = _rand(rng, 5, 3, 1, 1)
    probe("conv2d_1x1", lambda: T.conv2d(x4, w1, None), [x4, w1])
    probe("max_pool2", lambda: T.max_pool2(x4), [x4])
    probe("upsample_nearest2", lambda: T.upsample_nearest2(x4), [x4])
    probe("relu", lambda: T.relu(x4), [x4])
    probe("sigmoid", lambda: T.sigmoid(x4), [x4])
    probe("abs", lambda: T.abs_(x4), [x4])
    probe("square", lambda: T.square(x4), [x4])
    y4 = _rand(rng, 2, 3, 6, 6)
    c = _rand(rng, 1, 3, 1, 1)
    probe("add", lambda: x4 + c, [x4, c])
    probe("sub", lambda: x4 - y4, [x4, y4])
    probe("mul", lambda: x4 * c, [x4, c])
    pos = _rand(rng, 1, 3, 1, 1, positive=True)
    probe("div", lambda: x4 / pos, [x4, pos])
    pp = _rand(rng, 3, 4, positive=True)
    probe("log", lambda: T.log(pp), [pp])
    probe("exp", lambda: T.exp(pp), [pp])
    probe("concat_channels", lambda: T.concat_channels([x4, y4]), [x4, y4])
    m1 = _rand(rng, 2, 5, 4)
    m2 = _rand(rng, 4, 3)
    bias = _rand(rng, 3)
    probe("matmul", lambda: T.matmul(m1, m2), [m1, m2])
    probe("linear", lambda: T.linear(m1, m2, bias), [m1, m2, bias])
    v8 = _rand(rng, 8)
    probe("softmax", lambda: T.softmax(v8, axis=0), [v8])
    probe("softmax_axis1", lambda: T.softmax(x4, axis=1), [x4])
    probe("mean", lambda: T.mean(x4, axis=(2, 3), keepdims=True), [x4])
    probe("sum", lambda: T.sum_(x4, axis=1), [x4])
    probe("reshape", lambda: T.reshape(x4, (6, 36)), [x4])
    probe("transpose", lambda: T.transpose(x4, (0, 2, 3, 1)), [x4])
    probe("getitem", lambda: m1[:, 1:4], [m1])

    # attention
    probe("prior_attention", lambda: prior_attention(x4, 1e-4), [x4])
    feat = _rand(rng, 2, 8, 4, 4)
    tk = _rand(rng, 3, 8, 1, 1)
    probe("tokenize", lambda: tokenize(feat, tk), [feat, tk])
    q, k, v = _rand(rng, 3, 4), _rand(rng, 5, 4), _rand(rng, 5, 4)
    probe("attention_head", lambda: attention_head(q, k, v), [q, k, v])
    heads = AttentionHeads(8, 2, 4, np.random.default_rng(seed), np.float64)
    tok = _rand(rng, 1, 4, 8)
    probe("msa_encode", lambda: msa_encode(tok, heads), [tok] + heads.parameters())
    fmap = _rand(rng, 1, 8, 2, 2)
    tok3 = _rand(rng, 1, 3, 8)
    probe("ma_decode", lambda: ma_decode(fmap, tok3, heads), [fmap, tok3] + heads.parameters())

    # losses, differentiated with respect to probabilities
    logits = _rand(rng, 2, 4, 3, 3)
    labels = rng.integers(0, 4, size=(2, 3, 3))
    cw = np.array([0.5, 1.0, 2.0, 4.0])
    probe_loss = [
        ("weighted_cross_entropy", lambda: weighted_cross_entropy(T.softmax(logits, 1), labels, cw)),
        ("entropy_loss", lambda: entropy_loss(T.softmax(logits, 1))),
        ("kl_divergence", lambda: T.sum_(kl_divergence(T.softmax(m1.reshape(10, 4), 1), [0.4, 0.3, 0.2, 0.1]))),
        ("consistency_loss", lambda: consistency_loss(
            T.softmax(m1.reshape(10, 4), 1), [np.array([0.7, 0.1, 0.1, 0.1]), np.full(4, 0.25)], [0.5, 2.0])),
    ]
    for name, fn in probe_loss:
        src = m1 if "kl" in name or "consistency" in name else logits
        worst = max(check_tensors(name, fn, [src]), key=lambda r: r.rel_err)
        out.append(CheckResult(name, worst.rel_err, OP_TOL, src.size))
    return out


TINY_CHANNELS = (4, 8, 16, 32, 64)


def he_reinit(model, rng: np.random.Generator) -> None:
    """Redraw weights at He scale and biases at 0.1 scale.

    Glorot-initialised tiny ReLU nets have gradients around 1e-6 in the
    deep layers, below the central-difference noise floor. The check point
    is arbitrary, so a well-conditioned one is used.
    """
    for p in model.parameters():
        if p.ndim == 1:
            p.data = rng.standard_normal(p.shape) * 0.1
        else:
            fan_in = p.size // p.shape[0] if p.ndim == 4 else p.shape[0]
            p.data = rng.standard_normal(p.shape) * np.sqrt(2.0 / fan_in)


def model_checks(seed: int = 0, max_entries: int = 24) -> list[CheckResult]:
    """End-to-end checks of SPAUNet, UNet and BIT under the full SSL loss."""
    rng = np.random.default_rng(seed)
    results = []
    for name, size in (("spaunet", 16), ("unet", 16), ("bit", 8)):
        cfg = ModelConfig(encoder_channels=TINY_CHANNELS, bit_channels=8, heads=2, head_dim=4,
                          tokens=4, dtype="float64", seed=seed)
        model = build_model(name, cfg)
        he_reinit(model, rng)
        for pname, p in model.named_parameters():
            p.name = f"{name}.{pname}"
        pre = Tensor(rng.uniform(-1, 1, (2, 3, size, size)))
        post = Tensor(rng.uniform(-1, 1, (2, 3, size, size)))
        labels = rng.integers(0, 4, size=(2, size, size))
        ref = np.array([0.85, 0.08, 0.05, 0.02])
        cw = np.array([0.5, 1.0, 1.5, 2.0])

        def loss():
            probs = T.softmax(model(pre, post), axis=1)
            dist = T.mean(probs, axis=(2, 3))
            return total_ssl_loss(weighted_cross_entropy(probs, labels, cw), entropy_loss(probs),
                                  consistency_loss(dist, [ref], [0.1]), 0.1)

        results += check_tensors(name, loss, model.parameters(), MODEL_TOL, max_entries=max_entries,
                                 h=1e-6, rng=rng, floor=1e-4)
    return results


def run_suite(seed: int = 0, max_entries: int = 24) -> dict:
    t0 = time.perf_counter()
    ops = op_checks(seed)
    models = model_checks(seed, max_entries)
    worst_model: dict[str, CheckResult] = {}
    for r in models:
        key = r.name.split(".")[0]
        if key not in worst_model or r.rel_err > worst_model[key].rel_err:
            worst_model[key] = r
    return {
        "ops": ops,
        "models": models,
        "worst_model": worst_model,
        "passed": all(r.passed for r in ops + models),
        "seconds": time.perf_counter() - t0,
    }
