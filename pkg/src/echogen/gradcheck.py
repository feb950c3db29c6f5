"""Finite-difference verification of analytic gradients.

The harness is intentionally independent of the autodiff implementation:
it only re-evaluates the forward closure at perturbed inputs and compares
central differences against whatever ``backward`` produced.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, no_grad


def grad_check(fn, inputs: list[Tensor], fd_eps: float = 1e-4) -> float:
    """Max relative error |analytic - central difference| / max(1, |cd|).

    ``fn`` must be a zero-argument closure producing a scalar Tensor from
    the given inputs.  Inputs must be fp64 (fp32 rounding would swamp the
    comparison) and marked ``requires_grad``.
    """
    for inp in inputs:
        if inp.dtype != np.float64:
            raise ValueError("grad_check requires fp64 inputs")
        inp.grad = None
        inp.requires_grad = True

    out = fn()
    if out.size != 1:
        raise ValueError(f"grad_check requires a scalar output, got shape {tuple(out.shape)}")
    out.backward()
    analytic = [inp.grad.copy() if inp.grad is not None else np.zeros_like(inp.data) for inp in inputs]

    max_err = 0.0
    with no_grad():
        for inp, an in zip(inputs, analytic):
            flat = inp.data.reshape(-1)
            an_flat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + fd_eps
                f_plus = fn().item()
                flat[i] = orig - fd_eps
                f_minus = fn().item()
                flat[i] = orig
                cd = (f_plus - f_minus) / (2.0 * fd_eps)
                err = abs(an_flat[i] - cd) / max(1.0, abs(cd))
                if err > max_err:
                    max_err = err
    for inp in inputs:
        inp.grad = None
    return max_err
