"""Parameters and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class Parameter:
    """A named trainable tensor.

    Frozen parameters accumulate no gradients and are skipped by the
    optimizer; their data stays byte-identical across training steps.
    """

    def __init__(self, data, name: str = "", frozen: bool = False):
        self.tensor = data if isinstance(data, Tensor) else Tensor(data)
        self.tensor.requires_grad = not frozen
        self.name = name
        self.frozen = frozen

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    @property
    def shape(self):
        return self.tensor.shape

    def freeze(self) -> None:
        self.frozen = True
        self.tensor.requires_grad = False
        self.tensor.grad = None

    def unfreeze(self) -> None:
        self.frozen = False
        self.tensor.requires_grad = True

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={tuple(self.shape)}, frozen={self.frozen})"


@dataclass
class AdamState:
    """First/second moment buffers plus hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[Parameter], state: AdamState) -> None:
    """One bias-corrected Adam update; frozen params untouched, grads zeroed."""
    for p in params:
        if p.frozen:
            continue
        if p.grad is None:
            raise ValueError(f"adam_step: missing gradient on trainable parameter {p.name!r}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p in params:
        if p.frozen:
            continue
        g = p.grad
        key = p.name
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m = state.m[key]
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        data = p.tensor.data
        data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps_hat)).astype(data.dtype)
        p.zero_grad()


class Adam:
    """Convenience wrapper binding a parameter list to an AdamState."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps_hat: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps_hat=eps_hat)

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_blobs(self, prefix: str = "optim.") -> dict:
        """Moment buffers as named fp32 blobs for checkpointing."""
        blobs = {}
        for key in sorted(self.state.m):
            blobs[f"{prefix}{key}.m"] = self.state.m[key]
            blobs[f"{prefix}{key}.v"] = self.state.v[key]
        return blobs

    def load_state_blobs(self, blobs: dict, step_count: int, prefix: str = "optim.") -> None:
        self.state.step_count = step_count
        for p in self.params:
            mk, vk = f"{prefix}{p.name}.m", f"{prefix}{p.name}.v"
            if mk in blobs:
                self.state.m[p.name] = blobs[mk].copy()
                self.state.v[p.name] = blobs[vk].copy()
