"""Minimal tensor algebra with reverse-mode differentiation.

Row-major fp32 arrays (fp64 for verification runs), NCHW layout, no
broadcasting beyond bias addition.  Every learnable component in the repo
is built from the ops in this module; analytic gradients are validated
against central differences by :mod:`echogen.gradcheck`.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True
_DEBUG_CHECKS = os.environ.get("ECHOGEN_DEBUG", "") not in ("", "0")


def set_debug_checks(flag: bool) -> None:
    """Toggle the NaN/Inf guard applied to every op output."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(flag)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable graph construction (sampling / evaluation paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _guard(data: np.ndarray, op: str) -> None:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")


class Tensor:
    """Shaped fp32/fp64 array with optional reverse-mode gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # -- autograd ------------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse pass from a scalar output."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar output, got shape {tuple(self.shape)}")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None  # intermediate grads are fully consumed

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data: np.ndarray, parents, backward, op: str) -> Tensor:
    _guard(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


# -- elementwise ---------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        data = a.data + b

        def backward(g):
            a._accumulate(g)

        return _result(data, (a,), backward, "add")
    _same_shape(a, b, "add")
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(data, (a, b), backward, "add")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        data = a.data * b

        def backward(g):
            a._accumulate(g * b)

        return _result(data, (a,), backward, "mul")
    _same_shape(a, b, "mul")
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(data, (a, b), backward, "mul")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces via the debug guard
        data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _result(data, (a,), backward, "exp")


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - data * data))

    return _result(data, (a,), backward, "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid(a.data)

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return _result(data, (a,), backward, "sigmoid")


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(a.data)
    data = a.data * s

    def backward(g):
        a._accumulate(g * (s + a.data * s * (1.0 - s)))

    return _result(data, (a,), backward, "silu")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(a.data, lo, hi)

    def backward(g):
        a._accumulate(g * ((a.data > lo) & (a.data < hi)).astype(a.data.dtype))

    return _result(data, (a,), backward, "clamp")


# -- shape manipulation ---------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _result(data, (a,), backward, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _result(data, (a,), backward, "transpose")


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _result(data, tuple(tensors), backward, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = np.ascontiguousarray(a.data[idx])

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a._accumulate(full)

    return _result(data, (a,), backward, "narrow")


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim not in (2, 3) or a.data.ndim != b.data.ndim:
        raise ValueError(f"matmul: expected matching 2D or 3D operands, got {tuple(a.shape)} @ {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2] or (a.data.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ValueError(f"matmul: incompatible shapes {tuple(a.shape)} @ {tuple(b.shape)}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            b._accumulate(a.data.swapaxes(-1, -2) @ g)

    return _result(data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[N,D] @ weight[D,E] + bias[E]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: incompatible shapes {tuple(x.shape)} x {tuple(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias shape {tuple(bias.shape)} != ({weight.shape[1]},)")
    data = x.data @ weight.data
    if bias is not None:
        data = data + bias.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(data, parents, backward, "linear")


# -- convolution ------------------------------------------------------------------


def _conv_out_size(size: int, k: int, stride: int, padding: int, name: str) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"conv2d: {name}={size} with kernel {k}, stride {stride}, padding {padding} "
            f"gives non-integral output size"
        )
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with weight[K,C,kh,kw]."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4D input and weight, got {tuple(x.shape)}, {tuple(weight.shape)}")
    N, C, H, W = x.shape
    K, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ValueError(f"conv2d: input channels {C} != weight channels {Cw}")
    if bias is not None and bias.shape != (K,):
        raise ValueError(f"conv2d: bias shape {tuple(bias.shape)} != ({K},)")
    Ho = _conv_out_size(H, kh, stride, padding, "H")
    Wo = _conv_out_size(W, kw, stride, padding, "W")

    xp = x.data
    if padding > 0:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(N, Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(K, -1)
    out = cols @ wmat.T  # (N, Ho*Wo, K)
    if bias is not None:
        out = out + bias.data
    data = out.transpose(0, 2, 1).reshape(N, K, Ho, Wo)

    def backward(g):
        gf = g.reshape(N, K, Ho * Wo).transpose(0, 2, 1)  # (N, L, K)
        if weight.requires_grad:
            gw = np.tensordot(gf, cols, axes=([0, 1], [0, 1]))  # (K, CKK)
            weight._accumulate(gw.reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = (gf @ wmat).reshape(N, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros((N, C, H + 2 * padding, W + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, i, j]
            if padding > 0:
                gxp = gxp[:, :, padding:padding + H, padding:padding + W]
            x._accumulate(gxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(data, parents, backward, "conv2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ValueError(f"upsample_nearest2x: expected 4D input, got {tuple(x.shape)}")
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    N, C, H, W = x.shape

    def backward(g):
        x._accumulate(g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)))

    return _result(data, (x,), backward, "upsample_nearest2x")


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool: expected 4D input, got {tuple(x.shape)}")
    N, C, H, W = x.shape
    data = x.data.mean(axis=(2, 3))

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, :, None, None] / (H * W), x.data.shape).astype(g.dtype))

    return _result(data, (x,), backward, "global_avg_pool")


# -- normalization ----------------------------------------------------------------


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 4:
        raise ValueError(f"group_norm: expected 4D input, got {tuple(x.shape)}")
    N, C, H, W = x.shape
    if C % groups != 0:
        raise ValueError(f"group_norm: channels {C} not divisible by {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"group_norm: affine params must have shape ({C},)")
    M = (C // groups) * H * W
    xg = x.data.reshape(N, groups, M)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv_std).reshape(N, C, H, W)
    data = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxhat = (g * gamma.data[None, :, None, None]).reshape(N, groups, M)
            xhat_g = xhat.reshape(N, groups, M)
            m1 = gxhat.mean(axis=2, keepdims=True)
            m2 = (gxhat * xhat_g).mean(axis=2, keepdims=True)
            gx = inv_std * (gxhat - m1 - xhat_g * m2)
            x._accumulate(gx.reshape(N, C, H, W))

    return _result(data, (x, gamma, beta), backward, "group_norm")


# -- softmax / attention ------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        x._accumulate(data * (g - dot))

    return _result(data, (x,), backward, "softmax")


def attention_single_head(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(D)) v over [N,L,D] operands."""
    if not (q.shape == k.shape == v.shape) or q.data.ndim != 3:
        raise ValueError(f"attention: expected matching [N,L,D] operands, got {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    d = q.shape[-1]
    scores = mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / float(np.sqrt(d)))
    return matmul(softmax(scores, axis=-1), v)


# -- losses ----------------------------------------------------------------------


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mse_loss")
    diff = a.data - b.data
    data = np.asarray((diff * diff).mean(), dtype=a.data.dtype)
    scale = 2.0 / diff.size

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * scale * diff)
        if b.requires_grad:
            b._accumulate(g * (-scale) * diff)

    return _result(data, (a, b), backward, "mse_loss")


def kl_normal(mu: Tensor, logvar: Tensor) -> Tensor:
    """Mean KL(N(mu, e^logvar) || N(0, 1)) per element."""
    _same_shape(mu, logvar, "kl_normal")
    ev = np.exp(logvar.data)
    data = np.asarray(0.5 * (mu.data ** 2 + ev - 1.0 - logvar.data).mean(), dtype=mu.data.dtype)
    n = mu.data.size

    def backward(g):
        if mu.requires_grad:
            mu._accumulate(g * mu.data / n)
        if logvar.requires_grad:
            logvar._accumulate(g * 0.5 * (ev - 1.0) / n)

    return _result(data, (mu, logvar), backward, "kl_normal")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under row softmax."""
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy: expected [N,K] logits, got {tuple(logits.shape)}")
    labels = np.asarray(labels, dtype=np.int64)
    N = logits.shape[0]
    if labels.shape != (N,):
        raise ValueError(f"cross_entropy: labels shape {labels.shape} != ({N},)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    data = np.asarray((lse - z[np.arange(N), labels]).mean(), dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        p[np.arange(N), labels] -= 1.0
        logits._accumulate(g * p / N)

    return _result(data, (logits,), backward, "cross_entropy")


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[N,C,H,W] + b[N,C] broadcast over the spatial axes."""
    if x.data.ndim != 4 or b.data.ndim != 2 or x.shape[:2] != b.shape:
        raise ValueError(f"add_channel_bias: incompatible shapes {tuple(x.shape)} and {tuple(b.shape)}")
    data = x.data + b.data[:, :, None, None]

    def backward(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=(2, 3)))

    return _result(data, (x, b), backward, "add_channel_bias")


# -- lookup ----------------------------------------------------------------------


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup table[ids] -> [N, D]."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("embedding: ids must be 1D")
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise ValueError(f"embedding: id out of range for table with {table.shape[0]} rows")
    data = table.data[ids].copy()

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        table._accumulate(gt)

    return _result(data, (table,), backward, "embedding")
