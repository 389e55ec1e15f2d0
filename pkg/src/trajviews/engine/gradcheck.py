"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


class NonFiniteError(ValueError):
    pass


def analytic_grads(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    tape.backward(out)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def numeric_grads(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> list[np.ndarray]:
    result = []
    for k, t in enumerate(inputs):
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(*inputs).data)
            flat[i] = orig - eps
            fm = float(fn(*inputs).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite value perturbing input {k} coordinate {i}")
            gflat[i] = (fp - fm) / (2 * eps)
        result.append(g)
    return result


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               floor: float = 1e-8) -> float:
    """Max relative error between tape and central-difference gradients.

    ``fn`` must map the inputs to a scalar Tensor and be pure. Relative error
    per coordinate is |a - n| / max(|a|, |n|, floor).
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check runs in 64-bit; cast inputs to float64")
    analytic = analytic_grads(fn, inputs)
    numeric = numeric_grads(fn, inputs, eps)
    worst = 0.0
    for k, (a, n) in enumerate(zip(analytic, numeric)):
        if not np.all(np.isfinite(a)):
            bad = int(np.flatnonzero(~np.isfinite(a))[0])
            raise NonFiniteError(f"non-finite analytic gradient for input {k} coordinate {bad}")
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
