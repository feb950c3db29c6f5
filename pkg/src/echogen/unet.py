"""Class-conditional U-Net noise predictor over latents.

Conditioning: sinusoidal timestep embedding through a 2-layer MLP, plus a
learned class-embedding row added to it (row 3 is the unconditional token).
The summed embedding biases every residual block.  The encoder/decoder
split is exposed so a control branch can graft onto the skip activations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Embedding, GroupNorm, Linear, Module
from .rng import Rng
from .tensor import Tensor


@dataclass
class UNetConfig:
    in_channels: int = 4
    base_channels: int = 32
    channel_mult: tuple = (1, 2, 4)
    res_blocks_per_level: int = 2
    time_embed_dim: int = 128
    num_classes: int = 4  # 3 classes + null token
    attention_at_bottleneck: bool = True
    latent_size: int = 8

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        levels = len(self.channel_mult)
        if self.latent_size % (2 ** (levels - 1)) != 0:
            raise ValueError(
                f"latent_size {self.latent_size} not divisible by 2^{levels - 1} levels"
            )
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even")

    def widths(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mult]


def sinusoidal_embed(t: int, dim: int) -> Tensor:
    """Interleaved (sin, cos) pairs of t / 10000^(2i/dim)."""
    if dim % 2 != 0:
        raise ValueError(f"sinusoidal_embed: dim must be even, got {dim}")
    if t < 0:
        raise ValueError(f"sinusoidal_embed: t must be >= 0, got {t}")
    i = np.arange(dim // 2, dtype=np.float64)
    angles = float(t) / np.power(10000.0, 2.0 * i / dim)
    out = np.empty(dim, dtype=np.float32)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return Tensor(out)


def _sinusoidal_batch(ts: np.ndarray, dim: int) -> Tensor:
    i = np.arange(dim // 2, dtype=np.float64)
    angles = ts[:, None].astype(np.float64) / np.power(10000.0, 2.0 * i / dim)[None, :]
    out = np.empty((ts.shape[0], dim), dtype=np.float32)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return Tensor(out)


class ResBlock(Module):
    """GN -> silu -> conv, embedding bias, GN -> silu -> conv, residual skip."""

    def __init__(self, c_in: int, c_out: int, emb_dim: int, rng: Rng):
        self.norm1 = GroupNorm(c_in)
        self.conv1 = Conv2d(c_in, c_out, 3, rng, padding=1)
        self.emb_proj = Linear(emb_dim, c_out, rng)
        self.norm2 = GroupNorm(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, padding=1)
        self.skip = Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        h = T.add_channel_bias(h, self.emb_proj(T.silu(emb)))
        h = self.conv2(T.silu(self.norm2(h)))
        return T.add(h, self.skip(x) if self.skip is not None else x)


class Downsample(Module):
    def __init__(self, channels: int, rng: Rng):
        self.conv = Conv2d(channels, channels, 2, rng, stride=2)

    def __call__(self, x: Tensor, emb: Tensor = None) -> Tensor:
        return self.conv(x)


class Upsample(Module):
    def __init__(self, channels: int, rng: Rng):
        self.conv = Conv2d(channels, channels, 3, rng, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(T.upsample_nearest2x(x))


class AttnBlock(Module):
    """Single-head self-attention over flattened spatial positions."""

    def __init__(self, channels: int, rng: Rng):
        self.norm = GroupNorm(channels)
        self.q = Conv2d(channels, channels, 1, rng)
        self.k = Conv2d(channels, channels, 1, rng)
        self.v = Conv2d(channels, channels, 1, rng)
        self.proj = Conv2d(channels, channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        xn = self.norm(x)

        def tokens(t):
            return T.transpose(T.reshape(t, (n, c, h * w)), (0, 2, 1))

        att = T.attention_single_head(tokens(self.q(xn)), tokens(self.k(xn)), tokens(self.v(xn)))
        att = T.reshape(T.transpose(att, (0, 2, 1)), (n, c, h, w))
        return T.add(x, self.proj(att))


class UNetEncoder(Module):
    """conv_in, per-level residual blocks with downsampling, bottleneck."""

    def __init__(self, config: UNetConfig, rng: Rng):
        widths = config.widths()
        emb = config.time_embed_dim
        self.conv_in = Conv2d(config.in_channels, widths[0], 3, rng, padding=1)
        blocks = []
        self.skip_channels = [widths[0]]
        ch = widths[0]
        for li, w in enumerate(widths):
            for _ in range(config.res_blocks_per_level):
                blocks.append(ResBlock(ch, w, emb, rng))
                ch = w
                self.skip_channels.append(ch)
            if li < len(widths) - 1:
                blocks.append(Downsample(ch, rng))
                self.skip_channels.append(ch)
        self.blocks = blocks
        self.mid1 = ResBlock(ch, ch, emb, rng)
        self.attn = AttnBlock(ch, rng) if config.attention_at_bottleneck else None
        self.mid2 = ResBlock(ch, ch, emb, rng)
        self.out_channels = ch

    def __call__(self, z: Tensor, emb: Tensor, extra: Tensor | None = None):
        h = self.conv_in(z)
        if extra is not None:
            h = T.add(h, extra)
        skips = [h]
        for block in self.blocks:
            h = block(h, emb)
            skips.append(h)
        h = self.mid1(h, emb)
        if self.attn is not None:
            h = self.attn(h)
        h = self.mid2(h, emb)
        return h, skips


class UNet(Module):
    def __init__(self, config: UNetConfig, rng: Rng):
        self.config = config
        widths = config.widths()
        emb = config.time_embed_dim
        self.time_mlp1 = Linear(emb, emb, rng)
        self.time_mlp2 = Linear(emb, emb, rng)
        self.class_table = Embedding(config.num_classes, emb, rng)
        self.enc = UNetEncoder(config, rng)

        up = []
        ch = self.enc.out_channels
        pending = list(self.enc.skip_channels)
        for li in reversed(range(len(widths))):
            w = widths[li]
            for _ in range(config.res_blocks_per_level + 1):
                up.append(ResBlock(ch + pending.pop(), w, emb, rng))
                ch = w
            if li > 0:
                up.append(Upsample(ch, rng))
        assert not pending
        self.up = up
        self.out_norm = GroupNorm(ch)
        self.out_conv = Conv2d(ch, config.in_channels, 3, rng, padding=1, zero_init=True)

    # -- conditioning ----------------------------------------------------

    def embed(self, ts, class_ids) -> Tensor:
        ts = np.atleast_1d(np.asarray(ts, dtype=np.int64))
        class_ids = np.atleast_1d(np.asarray(class_ids, dtype=np.int64))
        if np.any(ts < 1):
            raise ValueError(f"invalid timestep {ts.min()}; must be >= 1")
        if np.any(class_ids < 0) or np.any(class_ids >= self.config.num_classes):
            raise ValueError(f"invalid class id; must be in [0, {self.config.num_classes})")
        temb = _sinusoidal_batch(ts, self.config.time_embed_dim)
        temb = self.time_mlp2(T.silu(self.time_mlp1(temb)))
        return T.add(temb, self.class_table(class_ids))

    # -- decoder (shared by plain and controlled forward) ------------------

    def decode(self, h: Tensor, skips: list, emb: Tensor) -> Tensor:
        skips = list(skips)
        for block in self.up:
            if isinstance(block, ResBlock):
                h = block(T.concat([h, skips.pop()], axis=1), emb)
            else:
                h = block(h)
        return self.out_conv(T.silu(self.out_norm(h)))

    def __call__(self, z_t: Tensor, ts, class_ids) -> Tensor:
        c = self.config
        expected = (c.in_channels, c.latent_size, c.latent_size)
        if z_t.data.ndim != 4 or tuple(z_t.shape[1:]) != expected:
            raise ValueError(f"unet: expected [N,{expected[0]},{expected[1]},{expected[2]}] latent, got {tuple(z_t.shape)}")
        n = z_t.shape[0]
        ts = np.broadcast_to(np.atleast_1d(np.asarray(ts, dtype=np.int64)), (n,))
        class_ids = np.broadcast_to(np.atleast_1d(np.asarray(class_ids, dtype=np.int64)), (n,))
        emb = self.embed(ts, class_ids)
        h, skips = self.enc(z_t, emb)
        return self.decode(h, skips, emb)


def init_unet(config: UNetConfig, seed: int) -> UNet:
    """Kaiming fan-in init, zero-initialized output conv, deterministic per seed."""
    return UNet(config, Rng(seed).derive("unet-init"))
