"""Spatial-inhibition prior attention and token multi-head attention.

The prior attention needs no parameters: each neuron's weight follows from
how far it sits from the mean of its channel, relative to the channel
variance. The token attention compresses a feature map into a few
semantic tokens, mixes them with self-attention, then lets every pixel
query the tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import MLP, Module, glorot_uniform
from .tensor import Tensor


@dataclass(frozen=True)
class EnergyConfig:
    lam: float = 1e-4

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError(f"energy lambda must be > 0, got {self.lam}")


def simam_energy(channel: np.ndarray, target_index: tuple[int, int], config: EnergyConfig = EnergyConfig()) -> float:
    """Minimal energy of the neuron at ``target_index`` in a single channel.

    Mean and variance are taken over every neuron of the channel (the
    target included). Lower energy marks a more distinctive neuron.
    """
    x = np.asarray(channel, dtype=np.float64)
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    t = x[target_index]
    lam = config.lam
    return 4.0 * (var + lam) / ((t - mu) ** 2 + 2.0 * var + 2.0 * lam)


def prior_attention(feature: Tensor, config: EnergyConfig | float = EnergyConfig()) -> Tensor:
    """Reweight ``feature`` [B,C,H,W] by ``sigmoid(1 / energy)`` per neuron.

    Statistics are computed per (batch item, channel) slice.
    """
    lam = config.lam if isinstance(config, EnergyConfig) else EnergyConfig(config).lam
    if feature.ndim != 4:
        raise ShapeError(f"prior_attention expects [B,C,H,W], got {feature.shape}")
    mu = T.mean(feature, axis=(2, 3), keepdims=True)
    dev2 = T.square(feature - mu)
    var = T.mean(dev2, axis=(2, 3), keepdims=True)
    # 1/e = (t - mu)^2 / (4 (var + lam)) + 1/2
    inv_energy = dev2 / ((var + lam) * 4.0) + 0.5
    return feature * T.sigmoid(inv_energy)


def attention_weights(feature: np.ndarray, config: EnergyConfig = EnergyConfig()) -> np.ndarray:
    """The per-neuron weights that :func:`prior_attention` applies."""
    x = np.asarray(feature, dtype=np.float64)
    mu = x.mean(axis=(-2, -1), keepdims=True)
    dev2 = (x - mu) ** 2
    var = dev2.mean(axis=(-2, -1), keepdims=True)
    return 1.0 / (1.0 + np.exp(-(dev2 / (4.0 * (var + config.lam)) + 0.5)))


def tokenize(feature: Tensor, token_kernel: Tensor, return_weights: bool = False):
    """Compress [B,C,H,W] features into [B,L',C] tokens.

    A pointwise convolution gives one logit map per token; each map is
    softmax-normalized over the H*W positions and used to pool the features.
    """
    B, C, H, W = feature.shape
    L = token_kernel.shape[0]
    if token_kernel.shape != (L, C, 1, 1):
        raise ShapeError(f"token kernel must be [L',{C},1,1], got {token_kernel.shape}")
    if L > (H * W) // 4:
        raise ShapeError(f"token count {L} exceeds H*W/4 = {(H * W) // 4}")
    logits = T.conv2d(feature, token_kernel, None, padding=0).reshape(B, L, H * W)
    weights = T.softmax(logits, axis=-1)
    flat = feature.reshape(B, C, H * W).transpose(0, 2, 1)  # B, HW, C
    tokens = T.matmul(weights, flat)
    return (tokens, weights) if return_weights else tokens


def attention_head(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d)) v``.

    Leading axes are treated as batch axes.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    d = q.shape[-1]
    scores = T.matmul(q, T.transpose(k, _swap_last(k.ndim))) * (1.0 / math.sqrt(d))
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


class AttentionHeads(Module):
    """Projection weights for ``heads`` attention heads of width ``head_dim``.

    The per-head [C, d] query/key/value matrices are stored side by side as
    one [C, h*d] matrix each; head j owns columns ``j*d:(j+1)*d``.
    """

    def __init__(self, channels: int, heads: int, head_dim: int, rng: np.random.Generator, dtype=np.float32):
        if heads < 1 or head_dim < 1:
            raise ConfigError("heads and head_dim must be positive")
        self.heads = heads
        self.head_dim = head_dim
        hd = heads * head_dim
        self.w_q = Tensor(glorot_uniform(rng, (channels, hd), channels, hd, dtype), requires_grad=True)
        self.w_k = Tensor(glorot_uniform(rng, (channels, hd), channels, hd, dtype), requires_grad=True)
        self.w_v = Tensor(glorot_uniform(rng, (channels, hd), channels, hd, dtype), requires_grad=True)
        self.w_o = Tensor(glorot_uniform(rng, (hd, channels), hd, channels, dtype), requires_grad=True)

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    def _split(self, x: Tensor) -> Tensor:
        # [B, n, h*d] -> [B, h, n, d]
        B, n, _ = x.shape
        return x.reshape(B, n, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def attend(self, queries: Tensor, context: Tensor) -> Tensor:
        """Multi-head attention of ``queries`` [B,n,C] over ``context`` [B,m,C]."""
        C = self.channels
        if queries.shape[-1] != C or context.shape[-1] != C:
            raise ShapeError(f"attention expects channel dim {C}, got {queries.shape}, {context.shape}")
        q = self._split(T.matmul(queries, self.w_q))
        k = self._split(T.matmul(context, self.w_k))
        v = self._split(T.matmul(context, self.w_v))
        heads = attention_head(q, k, v)  # B, h, n, d
        B, _, n, _ = heads.shape
        merged = heads.transpose(0, 2, 1, 3).reshape(B, n, self.heads * self.head_dim)
        return T.matmul(merged, self.w_o)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    return (x.reshape(1, *x.shape), True) if x.ndim == 2 else (x, False)


def msa_encode(t_sum: Tensor, heads: AttentionHeads) -> Tensor:
    """Self-attention over the concatenated tokens, plus a residual path.

    Accepts [2L', C] or [B, 2L', C].
    """
    x, squeeze = _batched(t_sum)
    out = x + heads.attend(x, x)
    return out.reshape(out.shape[1:]) if squeeze else out


def ma_decode(feature: Tensor, tokens: Tensor, heads: AttentionHeads) -> Tensor:
    """Pixels of ``feature`` [B,C,H,W] attend to ``tokens`` [B,L',C].

    Queries come from pixels, keys and values from tokens; the result keeps
    the spatial layout of ``feature`` and includes a residual path.
    """
    B, C, H, W = feature.shape
    if tokens.ndim != 3 or tokens.shape[0] != B or tokens.shape[2] != C:
        raise ShapeError(f"tokens {tokens.shape} incompatible with feature {feature.shape}")
    pixels = feature.reshape(B, C, H * W).transpose(0, 2, 1)
    out = pixels + heads.attend(pixels, tokens)
    return out.transpose(0, 2, 1).reshape(B, C, H, W)


class EncoderBlock(Module):
    """Token self-attention followed by a residual MLP of width 2C."""

    def __init__(self, channels: int, heads: int, head_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.attn = AttentionHeads(channels, heads, head_dim, rng, dtype)
        self.mlp = MLP(channels, 2 * channels, rng, dtype)

    def forward(self, t_sum: Tensor) -> Tensor:
        x = msa_encode(t_sum, self.attn)
        return x + self.mlp(x)


class DecoderBlock(Module):
    """Pixel-to-token attention followed by a residual per-pixel MLP."""

    def __init__(self, channels: int, heads: int, head_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.attn = AttentionHeads(channels, heads, head_dim, rng, dtype)
        self.mlp = MLP(channels, 2 * channels, rng, dtype)

    def forward(self, feature: Tensor, tokens: Tensor) -> Tensor:
        x = ma_decode(feature, tokens, self.attn)
        B, C, H, W = x.shape
        pixels = x.reshape(B, C, H * W).transpose(0, 2, 1)
        pixels = pixels + self.mlp(pixels)
        return pixels.transpose(0, 2, 1).reshape(B, C, H, W)
