"""Control branch: zero-conv identity, freezing, copy contract, gradients."""

import dataclasses

import numpy as np
import pytest

from echogen import diffusion as D
from echogen import tensor as T
from echogen.checkpoint import Checkpoint, blob_section_hash
from echogen.control import ControlBranch, controlled_forward, graft
from echogen.optim import Adam
from echogen.rng import Rng
from echogen.tensor import Tensor
from echogen.unet import UNetConfig, init_unet

from test_unet import unet_param_count_oracle

CFG = UNetConfig(base_channels=8, channel_mult=(1, 2), res_blocks_per_level=1,
                 time_embed_dim=16, latent_size=8)
HINT_SIZE = 32  # 8x8 latents from a 32x32 mask: 2 hint downsamples


def make_base_checkpoint(seed=1, randomize_out=True):
    net = init_unet(CFG, seed=seed)
    if randomize_out:
        rng = Rng(500 + seed)
        net.out_conv.weight.tensor.data = rng.normal(net.out_conv.weight.shape) * np.float32(0.05)
    blobs = {f"unet.{k}": v for k, v in net.state_dict().items()}
    header = {"stage": "diffusion", "config": {"unet": dataclasses.asdict(CFG)}, "seed": seed}
    return Checkpoint(header=header, blobs=blobs)


def control_param_count_oracle(cfg: UNetConfig, hint_size: int) -> int:
    def conv(cin, cout, k):
        return cout * cin * k * k + cout

    widths = [cfg.base_channels * m for m in cfg.channel_mult]
    # encoder + bottleneck copy (everything the oracle counts for the full
    # unet minus decoder, output head, and embedding layers)
    full = unet_param_count_oracle(cfg)
    emb = cfg.time_embed_dim
    dec = 0
    skips = [widths[0]]
    ch = widths[0]
    for li, w in enumerate(widths):
        for _ in range(cfg.res_blocks_per_level):
            ch = w
            skips.append(ch)
        if li < len(widths) - 1:
            skips.append(ch)

    def res(cin, cout):
        n = 2 * cin + conv(cin, cout, 3) + (emb * cout + cout) + 2 * cout + conv(cout, cout, 3)
        if cin != cout:
            n += conv(cin, cout, 1)
        return n

    skip_channels = list(skips)
    for li in reversed(range(len(widths))):
        w = widths[li]
        for _ in range(cfg.res_blocks_per_level + 1):
            dec += res(ch + skips.pop(), w)
            ch = w
        if li > 0:
            dec += conv(ch, ch, 3)
    dec += 2 * ch + conv(ch, cfg.in_channels, 3)
    embeddings = 2 * (emb * emb + emb) + cfg.num_classes * emb
    encoder_copy = full - dec - embeddings

    n_down = int(np.log2(hint_size // cfg.latent_size))
    chans = [1]
    for i in range(n_down):
        chans.append(cfg.base_channels if i == n_down - 1 else max(8, cfg.base_channels >> (n_down - 1 - i)))
    hint = sum(conv(chans[i], chans[i + 1], 2) for i in range(n_down))

    zero = sum(conv(c, c, 1) for c in skip_channels) + conv(widths[-1], widths[-1], 1)
    return encoder_copy + hint + zero


class TestGraft:
    def test_encoder_copy_byte_identical(self):
        base, branch = graft(make_base_checkpoint(), hint_size=HINT_SIZE)
        base_enc = base.enc.state_dict()
        for name, value in branch.encoder.state_dict().items():
            assert value.tobytes() == base_enc[name].tobytes()

    def test_zero_convs_exactly_zero(self):
        _, branch = graft(make_base_checkpoint(), hint_size=HINT_SIZE)
        for zc in branch.zero_convs + [branch.zero_conv_mid]:
            assert np.abs(zc.weight.data).max() == 0.0
            assert np.abs(zc.bias.data).max() == 0.0

    def test_base_fully_frozen(self):
        base, _ = graft(make_base_checkpoint(), hint_size=HINT_SIZE)
        assert all(p.frozen for p in base.parameters())

    def test_trainable_param_count_matches_oracle(self):
        _, branch = graft(make_base_checkpoint(), hint_size=HINT_SIZE)
        assert branch.param_count() == control_param_count_oracle(CFG, HINT_SIZE)
        assert all(not p.frozen for p in branch.parameters())

    def test_incomplete_checkpoint_rejected(self):
        ckpt = make_base_checkpoint()
        ckpt.blobs = {k: v for k, v in ckpt.blobs.items() if "out_conv" not in k}
        with pytest.raises(KeyError, match="missing blob"):
            graft(ckpt, hint_size=HINT_SIZE)
        with pytest.raises(ValueError, match="incomplete"):
            graft(Checkpoint(header={"stage": "diffusion", "config": {}}), hint_size=HINT_SIZE)


class TestControlledForward:
    def test_zero_conv_identity_any_mask(self):
        base, branch = graft(make_base_checkpoint(seed=2), hint_size=HINT_SIZE)
        rng = Rng(23)
        for trial in range(20):
            z = Tensor(rng.normal((1, 4, 8, 8)))
            t = int(rng.integers(1, 1000))
            c = int(rng.integers(0, 4))
            mask = Tensor((rng.uniform((1, 1, HINT_SIZE, HINT_SIZE)) > 0.5).astype(np.float32))
            with T.no_grad():
                controlled = controlled_forward(z, t, c, mask, base, branch).numpy()
                plain = base(z, t, c).numpy()
            assert np.abs(controlled - plain).max() == 0.0

    def test_mask_validation(self):
        base, branch = graft(make_base_checkpoint(seed=3), hint_size=HINT_SIZE)
        z = Tensor(np.zeros((1, 4, 8, 8), dtype=np.float32))
        with pytest.raises(ValueError, match="mask"):
            controlled_forward(z, 1, 0, Tensor(np.zeros((1, 1, 16, 16), dtype=np.float32)), base, branch)
        bad = Tensor(np.full((1, 1, HINT_SIZE, HINT_SIZE), 2.0, dtype=np.float32))
        with pytest.raises(ValueError, match="\\[0, 1\\]"):
            controlled_forward(z, 1, 0, bad, base, branch)

    def test_gradients_reach_branch_not_base(self):
        base, branch = graft(make_base_checkpoint(seed=4), hint_size=HINT_SIZE)
        rng = Rng(24)
        z = Tensor(rng.normal((2, 4, 8, 8)))
        eps = Tensor(rng.normal((2, 4, 8, 8)))
        mask = Tensor((rng.uniform((2, 1, HINT_SIZE, HINT_SIZE)) > 0.7).astype(np.float32))
        loss = D.diffusion_loss(eps, controlled_forward(z, 5, 1, mask, base, branch))
        loss.backward()
        assert all(p.grad is None for p in base.parameters())
        touched = [p for p in branch.parameters() if p.grad is not None]
        # zero convs sit on every fusion path, so they always receive gradient
        zc_names = {p.name for zc in branch.zero_convs for p in zc.parameters()}
        got_names = {p.name for p in touched}
        assert zc_names and zc_names.issubset(got_names)
        assert any(p.grad is not None and np.abs(p.grad).max() > 0 for p in touched)

    def test_one_branch_step_leaves_base_hash_unchanged(self):
        ckpt = make_base_checkpoint(seed=5)
        base, branch = graft(ckpt, hint_size=HINT_SIZE)
        before = blob_section_hash({f"unet.{k}": v for k, v in base.state_dict().items()}, "unet.")
        rng = Rng(25)
        opt = Adam(branch.parameters(), lr=1e-3)
        for _ in range(3):
            z = Tensor(rng.normal((2, 4, 8, 8)))
            eps = Tensor(rng.normal((2, 4, 8, 8)))
            mask = Tensor((rng.uniform((2, 1, HINT_SIZE, HINT_SIZE)) > 0.6).astype(np.float32))
            loss = D.diffusion_loss(eps, controlled_forward(z, 9, 2, mask, base, branch))
            loss.backward()
            opt.step()
        after = blob_section_hash({f"unet.{k}": v for k, v in base.state_dict().items()}, "unet.")
        assert before == after

    def test_zero_lr_leaves_branch_unchanged(self):
        base, branch = graft(make_base_checkpoint(seed=6), hint_size=HINT_SIZE)
        before = {n: p.data.copy() for n, p in branch.named_parameters()}
        rng = Rng(26)
        opt = Adam(branch.parameters(), lr=0.0)
        z = Tensor(rng.normal((1, 4, 8, 8)))
        eps = Tensor(rng.normal((1, 4, 8, 8)))
        mask = Tensor(np.ones((1, 1, HINT_SIZE, HINT_SIZE), dtype=np.float32))
        D.diffusion_loss(eps, controlled_forward(z, 3, 0, mask, base, branch)).backward()
        opt.step()
        for n, p in branch.named_parameters():
            assert p.data.tobytes() == before[n].tobytes()
