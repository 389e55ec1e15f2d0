"""AdamW with decoupled weight decay."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import ParamStore

log = logging.getLogger(__name__)


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


def adamw_step(params: dict, grads: dict, state: AdamWState) -> bool:
    """Apply one AdamW update in place.

    ``params`` and ``grads`` map names to arrays. Returns False (and leaves
    everything untouched) when any gradient is non-finite.
    """
    if state.lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            log.warning("skipping AdamW step %d: non-finite gradient in %s", state.step + 1, name)
            return False
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        theta -= (state.lr * update + state.lr * state.weight_decay * theta).astype(theta.dtype)
    return True


class AdamW:
    """Convenience wrapper binding :func:`adamw_step` to a :class:`ParamStore`."""

    def __init__(self, store: ParamStore, lr: float = 1e-3, weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.state = AdamWState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)

    def step(self) -> bool:
        named = self.store.named_trainable()
        params = {k: t.data for k, t in named}
        grads = {k: t.grad for k, t in named}
        return adamw_step(params, grads, self.state)

    def zero_grad(self) -> None:
        self.store.zero_grad()
