"""UNet backbone, SPAUNet, and the token-transformer change detector (BIT).

All three map a bitemporal pair of [B, C0, H, W] images to [B, 4, H, W]
class logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import DecoderBlock, EncoderBlock, EnergyConfig, prior_attention, tokenize
from .errors import ConfigError, ShapeError
from .nn import Conv2d, ConvUnit, Module, glorot_uniform
from .tensor import Tensor

MODEL_NAMES = ("unet", "spaunet", "bit")


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 3
    class_count: int = 4
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    bit_channels: int = 32
    lam: float = 1e-4
    tokens: int = 4
    heads: int = 4
    head_dim: int = 8
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if len(self.encoder_channels) != 5:
            raise ConfigError(f"encoder_channels needs 5 entries, got {self.encoder_channels}")
        if self.class_count != 4:
            raise ConfigError("class_count must be 4 (joint damage scale)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        EnergyConfig(self.lam)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


@dataclass
class BitemporalPair:
    pre: Tensor
    post: Tensor

    def __post_init__(self):
        if self.pre.shape != self.post.shape:
            raise ShapeError(f"pre {self.pre.shape} and post {self.post.shape} differ")


def _check_pair(pre: Tensor, post: Tensor, channels: int, divisor: int) -> None:
    if pre.shape != post.shape:
        raise ShapeError(f"pre {pre.shape} and post {post.shape} differ")
    if pre.ndim != 4 or pre.shape[1] != channels:
        raise ShapeError(f"expected [B,{channels},H,W] images, got {pre.shape}")
    H, W = pre.shape[2:]
    if H % divisor or W % divisor:
        raise ShapeError(f"spatial size {H}x{W} must be divisible by {divisor}")


class UNet(Module):
    """Early-fusion UNet: pre and post are stacked on the channel axis."""

    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = config
        rng = np.random.default_rng(config.seed)
        dt = np.dtype(config.dtype)
        ch = config.encoder_channels
        cin = 2 * config.input_channels
        self.enc1 = ConvUnit(cin, ch[0], rng, dt)
        self.enc2 = ConvUnit(ch[0], ch[1], rng, dt)
        self.enc3 = ConvUnit(ch[1], ch[2], rng, dt)
        self.enc4 = ConvUnit(ch[2], ch[3], rng, dt)
        self.enc5 = ConvUnit(ch[3], ch[4], rng, dt)
        self.up4 = Conv2d(ch[4], ch[3], 3, rng, dt)
        self.dec4 = ConvUnit(2 * ch[3], ch[3], rng, dt)
        self.up3 = Conv2d(ch[3], ch[2], 3, rng, dt)
        self.dec3 = ConvUnit(2 * ch[2], ch[2], rng, dt)
        self.up2 = Conv2d(ch[2], ch[1], 3, rng, dt)
        self.dec2 = ConvUnit(2 * ch[1], ch[1], rng, dt)
        self.up1 = Conv2d(ch[1], ch[0], 3, rng, dt)
        self.dec1 = ConvUnit(2 * ch[0], ch[0], rng, dt)
        self.head = Conv2d(ch[0], config.class_count, 1, rng, dt)

    def skip(self, feature: Tensor) -> Tensor:
        return feature

    def forward(self, pre: Tensor, post: Tensor, return_features: bool = False):
        _check_pair(pre, post, self.config.input_channels, 16)
        x = T.concat_channels([pre, post])
        f1 = self.enc1(x)
        f2 = self.enc2(T.max_pool2(f1))
        f3 = self.enc3(T.max_pool2(f2))
        f4 = self.enc4(T.max_pool2(f3))
        f5 = self.enc5(T.max_pool2(f4))
        d = f5
        for up, dec, skip in ((self.up4, self.dec4, f4), (self.up3, self.dec3, f3),
                              (self.up2, self.dec2, f2), (self.up1, self.dec1, f1)):
            d = T.relu(up(T.upsample_nearest2(d)))
            d = dec(T.concat_channels([self.skip(skip), d]))
        logits = self.head(d)
        if return_features:
            return logits, {"enc1": f1, "enc2": f2, "enc3": f3, "enc4": f4, "bottleneck": f5}
        return logits


class SPAUNet(UNet):
    """UNet whose four skip connections pass through the prior attention.

    The bottleneck map is left unweighted. No parameters are added.
    """

    def skip(self, feature: Tensor) -> Tensor:
        return prior_attention(feature, EnergyConfig(self.config.lam))


class BIT(Module):
    """Siamese conv stem, token transformer, and a difference prediction head."""

    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = config
        rng = np.random.default_rng(config.seed)
        dt = np.dtype(config.dtype)
        C = config.bit_channels
        self.stem = ConvUnit(config.input_channels, C, rng, dt)
        self.token_kernel = Tensor(
            glorot_uniform(rng, (config.tokens, C, 1, 1), C, config.tokens, dt), requires_grad=True
        )
        self.encoder = EncoderBlock(C, config.heads, config.head_dim, rng, dt)
        self.decoder = DecoderBlock(C, config.heads, config.head_dim, rng, dt)
        self.head1 = Conv2d(C, C, 3, rng, dt)
        self.head2 = Conv2d(C, config.class_count, 3, rng, dt)

    def forward(self, pre: Tensor, post: Tensor, return_features: bool = False):
        _check_pair(pre, post, self.config.input_channels, 1)
        L = self.config.tokens
        f_pre = self.stem(pre)
        f_post = self.stem(post)
        t_sum = T.concat([tokenize(f_pre, self.token_kernel), tokenize(f_post, self.token_kernel)], axis=1)
        t_new = self.encoder(t_sum)
        t_pre, t_post = t_new[:, :L], t_new[:, L:]
        r_pre = self.decoder(f_pre, t_pre)
        r_post = self.decoder(f_post, t_post)
        diff = T.abs_(r_pre - r_post)
        logits = self.head2(T.relu(self.head1(diff)))
        if return_features:
            return logits, {"t_sum": t_sum, "t_new": t_new, "pre": r_pre, "post": r_post}
        return logits


def build_model(name: str, config: ModelConfig = ModelConfig()) -> Module:
    try:
        cls = {"unet": UNet, "spaunet": SPAUNet, "bit": BIT}[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; choose from {MODEL_NAMES}") from None
    return cls(config)


def model_name(model: Module) -> str:
    return {UNet: "unet", SPAUNet: "spaunet", BIT: "bit"}[type(model)]


def prepare_images(images: np.ndarray, dtype) -> Tensor:
    """uint8 [B,C,H,W] rasters to a float tensor in [-1, 1]."""
    arr = np.asarray(images)
    if arr.dtype == np.uint8:
        arr = arr.astype(dtype) / np.asarray(127.5, dtype=dtype) - np.asarray(1.0, dtype=dtype)
    return Tensor(arr.astype(dtype, copy=False))
