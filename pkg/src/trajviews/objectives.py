"""Contrastive alignment, span masking, masked-token loss and their weighted total."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Tensor, ops as F

MODALITIES = ("r", "p|r", "g", "p|g")
ALIGN_PAIRS = (("r", "p|r"), ("g", "p|g"), ("p|r", "p|g"))


@dataclass
class LossConfig:
    tau: float = 0.07
    w1: float = 2.0
    w2: float = 1.0
    mask_prob: float = 0.2
    mask_span: int = 2
    symmetric: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.mask_prob < 1:
            raise ValueError("mask_prob must lie in [0, 1)")
        if self.mask_span < 1:
            raise ValueError("mask_span must be >= 1")


def _normalize(h: Tensor) -> Tensor:
    # sqrt(|h|^2 + 1e-24) acts as a smooth 1e-12 floor on the norm
    norm = F.sqrt(F.add(F.sum(F.mul(h, h), axis=1, keepdims=True), 1e-24))
    return F.div(h, norm)


def pair_loss(h_i: Tensor, h_j: Tensor, tau: float = 0.07) -> Tensor:
    """InfoNCE with view i as anchors and view j as keys; the positive stays in the denominator."""
    if h_i.shape != h_j.shape:
        raise ValueError(f"pair_loss: batch shapes differ {h_i.shape} vs {h_j.shape}")
    n = h_i.shape[0]
    if n < 1:
        raise ValueError("pair_loss needs at least one pair")
    sim = F.mul(F.matmul(_normalize(h_i), F.transpose(_normalize(h_j), (1, 0))), 1.0 / tau)
    return F.cross_entropy(sim, np.arange(n))


def align_loss(h_T: dict[str, Tensor], tau: float = 0.07, symmetric: bool = False) -> Tensor:
    """Sum of the pair losses over the view pairs present in ``h_T``."""
    total = None
    for a, b in ALIGN_PAIRS:
        if a not in h_T or b not in h_T:
            continue
        term = pair_loss(h_T[a], h_T[b], tau)
        if symmetric:
            term = F.mul(F.add(term, pair_loss(h_T[b], h_T[a], tau)), 0.5)
        total = term if total is None else F.add(total, term)
    if total is None:
        raise ValueError("align_loss needs at least one complete view pair")
    return total


def span_start_rate(mask_prob: float, mask_span: int) -> float:
    """Start probability giving an expected masked fraction of ``mask_prob``.

    A started span masks ``mask_span`` positions and the following position is
    left unmasked (so spans never merge), hence with start rate q the long-run
    fraction is q*s / (1 + q*s).
    """
    return mask_prob / (mask_span * (1.0 - mask_prob))


def make_mask(seq_len: int, mask_prob: float = 0.2, mask_span: int = 2, seed=0) -> np.ndarray:
    """Boolean mask over token positions 0..seq_len-1 (the fusion summary token is not included)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = np.zeros(seq_len, dtype=bool)
    if mask_prob == 0:
        return mask
    q = min(1.0, span_start_rate(mask_prob, mask_span))
    draws = rng.random(seq_len)
    i = 0
    while i < seq_len:
        if draws[i] < q:
            mask[i:i + mask_span] = True
            i += mask_span + 1
        else:
            i += 1
    return mask


def mask_runs(mask: np.ndarray) -> list[int]:
    """Lengths of maximal runs of masked positions."""
    padded = np.r_[False, np.asarray(mask, bool), False].astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return (edges[1::2] - edges[::2]).tolist()


def mlm_loss(stream_logits: dict[str, tuple[Tensor, np.ndarray]]) -> Tensor:
    """Sum over streams of the mean NLL at masked positions; empty streams add 0."""
    total = Tensor(np.zeros((), dtype=np.float32))
    for logits, targets in stream_logits.values():
        if len(targets) == 0:
            continue
        total = F.add(total, F.cross_entropy(logits, targets))
    return total


def total_loss(l_align: Tensor, l_mlm: Tensor, w1: float = 2.0, w2: float = 1.0) -> Tensor:
    if w1 < 0 or w2 < 0:
        raise ValueError("loss weights must be non-negative")
    return F.add(F.mul(l_align, w1), F.mul(l_mlm, w2))
