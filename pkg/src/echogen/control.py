"""Mask-conditioned control branch grafted onto a frozen denoiser.

A trainable copy of the base encoder+bottleneck consumes the latent plus
features from a strided hint encoder; its skip and bottleneck activations
are fused into the frozen base decoder through 1x1 convolutions whose
weights and biases start at exactly zero, so a fresh graft computes
precisely what the base computes, for any mask.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .nn import Conv2d, Module
from .rng import Rng
from .tensor import Tensor
from .unet import UNet, UNetConfig, UNetEncoder


class HintEncoder(Module):
    """Strided conv stack mapping a [N,1,S,S] mask to base-width latent features."""

    def __init__(self, config: UNetConfig, hint_size: int, rng: Rng):
        self.hint_size = hint_size
        n_down = int(np.log2(hint_size // config.latent_size))
        if config.latent_size * 2 ** n_down != hint_size:
            raise ValueError(f"hint size {hint_size} is not a power-of-2 multiple of latent size {config.latent_size}")
        chans = [1]
        for i in range(n_down):
            chans.append(config.base_channels if i == n_down - 1 else max(8, config.base_channels >> (n_down - 1 - i)))
        self.convs = [Conv2d(chans[i], chans[i + 1], 2, rng, stride=2) for i in range(n_down)]

    def __call__(self, mask: Tensor) -> Tensor:
        h = mask
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = T.silu(h)
        return h


class ControlBranch(Module):
    """Hint encoder + encoder copy + zero convs (one per skip, one at bottleneck)."""

    def __init__(self, config: UNetConfig, hint_size: int, seed: int = 0):
        rng = Rng(seed).derive("control-init")
        self.config = config
        self.hint = HintEncoder(config, hint_size, rng)
        self.encoder = UNetEncoder(config, rng)
        self.zero_convs = [Conv2d(c, c, 1, rng, zero_init=True) for c in self.encoder.skip_channels]
        self.zero_conv_mid = Conv2d(self.encoder.out_channels, self.encoder.out_channels, 1, rng, zero_init=True)

    def copy_encoder_from(self, base: UNet) -> None:
        self.encoder.load_state_dict(base.enc.state_dict())


def graft(base_checkpoint: Checkpoint, hint_size: int = 64, seed: int = 0) -> tuple[UNet, ControlBranch]:
    """Build (frozen base, fresh control branch) from a trained denoiser checkpoint."""
    cfg_echo = base_checkpoint.header.get("config", {}).get("unet")
    if cfg_echo is None:
        raise ValueError("incomplete checkpoint: header lacks a unet config echo")
    config = UNetConfig(**cfg_echo)
    base = UNet(config, Rng(0))
    blobs = base_checkpoint.strip_prefix("unet.")
    if not blobs:
        raise ValueError("incomplete checkpoint: no unet.* blobs")
    base.load_state_dict(blobs)
    base.freeze()
    branch = ControlBranch(config, hint_size=hint_size, seed=seed)
    branch.copy_encoder_from(base)
    return base, branch


def _check_mask(mask: Tensor, hint_size: int) -> None:
    if mask.data.ndim != 4 or tuple(mask.shape[1:]) != (1, hint_size, hint_size):
        raise ValueError(f"mask: expected [N,1,{hint_size},{hint_size}], got {tuple(mask.shape)}")
    if mask.data.min() < 0.0 or mask.data.max() > 1.0:
        raise ValueError("mask values must lie in [0, 1]")


def controlled_forward(z_t: Tensor, ts, class_ids, mask: Tensor, base: UNet,
                       branch: ControlBranch) -> Tensor:
    """Base forward with branch activations fused in through the zero convs."""
    _check_mask(mask, branch.hint.hint_size)
    n = z_t.shape[0]
    ts = np.broadcast_to(np.atleast_1d(np.asarray(ts, dtype=np.int64)), (n,))
    class_ids = np.broadcast_to(np.atleast_1d(np.asarray(class_ids, dtype=np.int64)), (n,))
    emb = base.embed(ts, class_ids)
    hint_features = branch.hint(mask)
    hb, skips_b = branch.encoder(z_t, emb, extra=hint_features)
    h, skips = base.enc(z_t, emb)
    fused = [T.add(s, zc(sb)) for s, zc, sb in zip(skips, branch.zero_convs, skips_b)]
    h = T.add(h, branch.zero_conv_mid(hb))
    return base.decode(h, fused, emb)
