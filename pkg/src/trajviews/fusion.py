"""Cross-view fusion: pairwise inter-modal attention, a shared global transformer, masked-token heads.

Each modality enters fusion as [h_T, h_S...], so fused position 0 is the
trajectory-level token and position i+1 is token i of the view.
"""
from __future__ import annotations

import numpy as np

from .engine import Linear, MultiHeadAttention, ParamStore, Tensor, TransformerStack, ops as F
from .encoders import EncodedView, add_positions

PARAM_TAG = {"r": "r", "p|r": "pr", "g": "g", "p|g": "pg"}


def modality_sequence(view: EncodedView) -> tuple[Tensor, np.ndarray]:
    B = view.h_T.shape[0]
    seq = F.concat([F.reshape(view.h_T, (B, 1, -1)), view.h_S], axis=1)
    mask = np.concatenate([np.ones((B, 1), bool), view.valid], axis=1)
    return seq, mask


class InterModal:
    """One attention stream per ordered pair (a, b), a != b; outputs summed per query modality."""

    def __init__(self, store: ParamStore, name: str, d: int, heads: int, modalities):
        self.modalities = tuple(modalities)
        self.streams = {
            (a, b): MultiHeadAttention(store, f"{name}.{PARAM_TAG[a]}_to_{PARAM_TAG[b]}", d, heads)
            for a in self.modalities for b in self.modalities if a != b
        }

    def __call__(self, seqs: dict[str, Tensor], masks: dict[str, np.ndarray]) -> dict[str, Tensor]:
        out = {}
        for a in self.modalities:
            if seqs[a].shape[1] == 0:
                raise ValueError(f"modality {a} has an empty sequence")
            total = None
            for b in self.modalities:
                if b == a:
                    continue
                o = self.streams[(a, b)](seqs[a], seqs[b], masks[b])
                total = o if total is None else F.add(total, o)
            out[a] = total
        return out


class GlobalContext:
    """Shared transformer over the concatenated streams, with modality-type and position embeddings."""

    def __init__(self, store: ParamStore, name: str, d: int, heads: int, depth: int, modalities):
        self.modalities = tuple(modalities)
        self.types = store.normal(f"{name}.types", (len(self.modalities), d))
        self.stack = TransformerStack(store, f"{name}.stack", d, heads, depth)

    def __call__(self, seqs: dict[str, Tensor], masks: dict[str, np.ndarray]) -> dict[str, Tensor]:
        parts, lengths = [], []
        for i, a in enumerate(self.modalities):
            parts.append(F.add(add_positions(seqs[a]), F.getitem(self.types, i)))
            lengths.append(seqs[a].shape[1])
        x = self.stack(F.concat(parts, axis=1), np.concatenate([masks[a] for a in self.modalities], axis=1))
        out, start = {}, 0
        for a, n in zip(self.modalities, lengths):
            out[a] = F.getitem(x, (slice(None), slice(start, start + n)))
            start += n
        return out


class MLMHeads:
    """Route streams share a head over the segment vocabulary; grid streams share one over cells."""

    def __init__(self, store: ParamStore, name: str, d: int, n_segments: int, n_cells: int):
        self.segment = Linear(store, f"{name}.segment", d, n_segments)
        self.cell = Linear(store, f"{name}.cell", d, n_cells)
        self.excluded = 0

    def __call__(self, fused: dict[str, Tensor], masks: dict[str, np.ndarray],
                 targets: dict[str, np.ndarray]) -> dict[str, tuple[Tensor, np.ndarray]]:
        """Logits and targets at masked positions; masked tokens without a target are skipped and counted."""
        out = {}
        for stream, E in fused.items():
            mask = np.asarray(masks[stream], bool)
            tgt = np.asarray(targets[stream])
            keep = mask & (tgt >= 0)
            self.excluded += int((mask & (tgt < 0)).sum())
            B, L1, d = E.shape
            b, i = np.nonzero(keep)
            rows = F.gather_rows(F.reshape(E, (B * L1, d)), b * L1 + i + 1)
            head = self.segment if stream in ("r", "p|r") else self.cell
            out[stream] = (head(rows), tgt[b, i])
        return out
