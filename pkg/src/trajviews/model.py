"""The multi-view backbone: view encoders, fusion and masked-token heads over one parameter store."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .batching import Batch, Vocab
from .encoders import EncodedView, GpsEncoder, GridEncoder, RouteEncoder
from .engine import ParamStore, Tensor
from .fusion import GlobalContext, InterModal, MLMHeads, modality_sequence
from .objectives import MODALITIES


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    depth: int = 2
    fusion_depth: int = 2
    no_inter_modal: bool = False
    no_grid_view: bool = False

    @property
    def modalities(self) -> tuple[str, ...]:
        return ("r", "p|r") if self.no_grid_view else MODALITIES

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelOutput:
    views: dict[str, EncodedView]
    fused: dict[str, Tensor]   # modality -> (B, 1 + L, d)
    masks: dict[str, np.ndarray]

    def trajectory_embedding(self) -> np.ndarray:
        """Concatenated fused trajectory tokens (position 0 of every stream)."""
        return np.concatenate([self.fused[m].data[:, 0] for m in self.fused], axis=1)


class TrajViewsModel:
    def __init__(self, config: ModelConfig, vocab: Vocab, adjacency: np.ndarray, seed: int = 0,
                 dtype=np.float32):
        self.config, self.vocab = config, vocab
        self.store = ParamStore(seed, dtype)
        d, h = config.d, config.heads
        self.route = RouteEncoder(self.store, "route", d, h, config.depth, adjacency)
        self.gps = GpsEncoder(self.store, "gps", d)
        self.grid = None if config.no_grid_view else GridEncoder(
            self.store, "grid", d, h, config.depth, vocab.n_cells)
        mods = config.modalities
        self.inter = None if config.no_inter_modal else InterModal(self.store, "fusion.inter", d, h, mods)
        self.context = GlobalContext(self.store, "fusion.global", d, h, config.fusion_depth, mods)
        self.heads = MLMHeads(self.store, "mlm", d, len(vocab.segments), vocab.n_cells)

    @property
    def modalities(self) -> tuple[str, ...]:
        return self.config.modalities

    def encode(self, batch: Batch) -> dict[str, EncodedView]:
        views = {"r": self.route.encode(batch), "p|r": self.gps.encode(batch, "p|r")}
        if self.grid is not None:
            views["g"] = self.grid.encode(batch)
            views["p|g"] = self.gps.encode(batch, "p|g")
        return views

    def fuse(self, views: dict[str, EncodedView]) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
        seqs, masks = {}, {}
        for m in self.modalities:
            seqs[m], masks[m] = modality_sequence(views[m])
        if self.inter is not None:
            seqs = self.inter(seqs, masks)
        return self.context(seqs, masks), masks

    def forward(self, batch: Batch) -> ModelOutput:
        views = self.encode(batch)
        fused, masks = self.fuse(views)
        return ModelOutput(views, fused, masks)

    def mlm_logits(self, out: ModelOutput, batch: Batch) -> dict[str, tuple[Tensor, np.ndarray]]:
        targets = {"r": batch.seg_target, "p|r": batch.seg_target, "g": batch.cell, "p|g": batch.cell}
        return self.heads(out.fused, {m: batch.masks[m] for m in self.modalities},
                          {m: targets[m] for m in self.modalities})

    def trajectory_width(self) -> int:
        return len(self.modalities) * self.config.d


def finite(out: ModelOutput) -> bool:
    return all(np.isfinite(E.data).all() for E in out.fused.values())


def route_token_vectors(out: ModelOutput, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Fused route tokens and their segment ids, padding removed."""
    E = out.fused["r"].data[:, 1:]
    keep = batch.r_valid
    return E[keep], batch.seg[keep]
