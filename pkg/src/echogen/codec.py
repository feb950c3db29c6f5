"""Convolutional VAE compressing images into the latent space used by diffusion.

Factor-8 by default: 64x64x1 image <-> 8x8x4 latent.  Downsampling is one
stride-2 conv per level followed by a stride-1 refinement conv; the decoder
mirrors with nearest-neighbor upsampling and ends in tanh.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, GroupNorm, Module
from .rng import Rng
from .tensor import Tensor

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0


@dataclass
class CodecConfig:
    image_size: int = 64
    in_channels: int = 1
    latent_channels: int = 4
    down_factor: int = 8
    base_channels: int = 32
    kl_weight: float = 1e-4

    def __post_init__(self):
        if self.down_factor < 1 or self.down_factor & (self.down_factor - 1):
            raise ValueError(f"down_factor {self.down_factor} is not a power of 2")
        if self.image_size % self.down_factor != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by down_factor {self.down_factor}")
        if self.base_channels % 8 != 0:
            raise ValueError("base_channels must be a multiple of 8 (group norm groups)")

    @property
    def levels(self) -> int:
        return int(np.log2(self.down_factor))

    @property
    def latent_size(self) -> int:
        return self.image_size // self.down_factor

    def widths(self) -> list[int]:
        # channel plan: base, 2*base, 4*base, capped at 4*base
        return [self.base_channels * min(2 ** i, 4) for i in range(self.levels + 1)]


@dataclass
class LatentPosterior:
    mu: Tensor
    logvar: Tensor


class _DownBlock(Module):
    def __init__(self, c_in, c_out, rng):
        self.conv1 = Conv2d(c_in, c_out, 2, rng, stride=2)
        self.norm1 = GroupNorm(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, padding=1)
        self.norm2 = GroupNorm(c_out)

    def __call__(self, x):
        x = T.silu(self.norm1(self.conv1(x)))
        return T.silu(self.norm2(self.conv2(x)))


class _UpBlock(Module):
    def __init__(self, c_in, c_out, rng):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, padding=1)
        self.norm1 = GroupNorm(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, padding=1)
        self.norm2 = GroupNorm(c_out)

    def __call__(self, x):
        x = T.silu(self.norm1(self.conv1(T.upsample_nearest2x(x))))
        return T.silu(self.norm2(self.conv2(x)))


class Codec(Module):
    def __init__(self, config: CodecConfig, seed: int = 0):
        self.config = config
        rng = Rng(seed).derive("codec-init")
        w = config.widths()
        self.enc_in = Conv2d(config.in_channels, w[0], 3, rng, padding=1)
        self.enc_down = [_DownBlock(w[i], w[i + 1], rng) for i in range(config.levels)]
        self.enc_out = Conv2d(w[-1], 2 * config.latent_channels, 3, rng, padding=1)
        self.dec_in = Conv2d(config.latent_channels, w[-1], 3, rng, padding=1)
        self.dec_up = [_UpBlock(w[i + 1], w[i], rng) for i in reversed(range(config.levels))]
        self.dec_out = Conv2d(w[0], config.in_channels, 3, rng, padding=1)

    def _check_image(self, image: Tensor) -> None:
        c = self.config
        expected = (c.in_channels, c.image_size, c.image_size)
        if image.data.ndim != 4 or tuple(image.shape[1:]) != expected:
            raise ValueError(f"encode: expected [N,{expected[0]},{expected[1]},{expected[2]}] image, got {tuple(image.shape)}")

    def encode(self, image: Tensor) -> LatentPosterior:
        self._check_image(image)
        h = self.enc_in(image)
        for block in self.enc_down:
            h = block(h)
        stats = self.enc_out(h)
        lc = self.config.latent_channels
        mu = T.narrow(stats, 1, 0, lc)
        logvar = T.clamp(T.narrow(stats, 1, lc, lc), LOGVAR_MIN, LOGVAR_MAX)
        return LatentPosterior(mu=mu, logvar=logvar)

    def decode(self, z: Tensor) -> Tensor:
        c = self.config
        expected = (c.latent_channels, c.latent_size, c.latent_size)
        if z.data.ndim != 4 or tuple(z.shape[1:]) != expected:
            raise ValueError(f"decode: expected [N,{expected[0]},{expected[1]},{expected[2]}] latent, got {tuple(z.shape)}")
        h = self.dec_in(z)
        for block in self.dec_up:
            h = block(h)
        return T.tanh(self.dec_out(h))


def reparameterize(p: LatentPosterior, noise: Tensor) -> Tensor:
    """z = mu + exp(logvar / 2) * noise."""
    if noise.shape != p.mu.shape:
        raise ValueError(f"reparameterize: noise shape {tuple(noise.shape)} != mu shape {tuple(p.mu.shape)}")
    return T.add(p.mu, T.mul(T.exp(T.mul(p.logvar, 0.5)), noise))


def codec_loss(image: Tensor, recon: Tensor, p: LatentPosterior, kl_weight: float) -> Tensor:
    """Reconstruction MSE plus kl_weight * KL(posterior || N(0,1))."""
    return T.add(T.mse_loss(recon, image), T.mul(T.kl_normal(p.mu, p.logvar), float(kl_weight)))


def latent_scale(latents: np.ndarray) -> float:
    """Std of encoded training latents; diffusion operates on z / scale."""
    latents = np.asarray(latents)
    if latents.size == 0:
        raise ValueError("latent_scale: empty input")
    if latents.shape[0] < 100:
        raise ValueError(f"latent_scale: need >= 100 latents, got {latents.shape[0]}")
    scale = float(latents.astype(np.float64).std())
    if scale <= 1e-8:
        raise ValueError("latent_scale: latents have (near-)zero variance")
    return scale


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB for [-1, 1] images."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * float(np.log10(peak * peak / mse))
