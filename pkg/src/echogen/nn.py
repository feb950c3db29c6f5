"""Small module system: parameter registration, layers, state dicts.

Parameter paths follow attribute names ("down.0.conv1.weight") and become
blob names in checkpoints, so registration order and naming are part of
the serialization contract.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .optim import Parameter
from .rng import Rng
from .tensor import Tensor


class Module:
    """Base class; submodules and parameters are discovered via attributes."""

    def _entries(self):
        for attr, value in self.__dict__.items():
            if isinstance(value, (Parameter, Module)):
                yield attr, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{attr}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in self._entries():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                value.name = path
                yield path, value
            else:
                yield from value.named_parameters(prefix=f"{path}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self, prefix: str = "") -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, blobs: dict, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            if name not in blobs:
                raise KeyError(f"checkpoint missing blob {name!r}")
            blob = blobs[name]
            if tuple(blob.shape) != tuple(p.shape):
                raise ValueError(
                    f"shape mismatch for blob {name!r}: checkpoint {tuple(blob.shape)} vs model {tuple(p.shape)}"
                )
            p.tensor.data = blob.astype(np.float32).copy()

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())


def kaiming_normal(rng: Rng, shape, fan_in: int) -> np.ndarray:
    return rng.normal(shape) * np.float32(np.sqrt(2.0 / fan_in))


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: Rng,
                 stride: int = 1, padding: int = 0, zero_init: bool = False):
        self.stride = stride
        self.padding = padding
        shape = (c_out, c_in, kernel, kernel)
        if zero_init:
            w = np.zeros(shape, dtype=np.float32)
        else:
            w = kaiming_normal(rng, shape, c_in * kernel * kernel)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight.tensor, self.bias.tensor, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, zero_init: bool = False):
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=np.float32)
        else:
            w = kaiming_normal(rng, (d_in, d_out), d_in)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight.tensor, self.bias.tensor)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5):
        if channels % groups != 0:
            raise ValueError(f"GroupNorm: channels {channels} not divisible by groups {groups}")
        self.groups = groups
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gamma.tensor, self.beta.tensor, eps=self.eps)


class Embedding(Module):
    def __init__(self, rows: int, dim: int, rng: Rng):
        self.table = Parameter(rng.normal((rows, dim)) * np.float32(1.0 / np.sqrt(dim)))

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.table.tensor, ids)
