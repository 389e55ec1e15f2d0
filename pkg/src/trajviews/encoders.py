"""View encoders producing a trajectory vector h_T and token vectors h_S.

All encoders work on padded batches; ``valid`` marks real tokens and h_T is
the mean of the valid rows of h_S.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .batching import Batch, SubTrajectories
from .city import N_POI_CATEGORIES
from .engine import BiGRU, GATLayer, Linear, ParamStore, Tensor, TransformerStack, ops as F, sinusoidal_positions

MINUTES_PER_DAY = 1440


@dataclass
class EncodedView:
    modality: str
    h_T: Tensor   # (B, d)
    h_S: Tensor   # (B, L, d)
    valid: np.ndarray

    @property
    def lengths(self) -> np.ndarray:
        return self.valid.sum(axis=1)


def add_positions(x: Tensor) -> Tensor:
    _, L, d = x.shape
    return F.add(x, sinusoidal_positions(L, d, x.dtype))


class TemporalEmbedding:
    """minute-of-day row + day-of-week row + projected unit travel time, or a learned unknown-time vector."""

    def __init__(self, store: ParamStore, name: str, d: int):
        self.minute = store.normal(f"{name}.minute", (MINUTES_PER_DAY, d))
        self.day = store.normal(f"{name}.day", (7, d))
        self.travel = Linear(store, f"{name}.travel", 1, d)
        self.unknown = store.normal(f"{name}.unknown", (d,))

    def __call__(self, minute, dow, travel_time, unknown=None) -> Tensor:
        minute, dow = np.asarray(minute), np.asarray(dow)
        if minute.size and (minute.min() < 0 or minute.max() >= MINUTES_PER_DAY):
            raise ValueError("minute-of-day bucket out of [0, 1440)")
        if dow.size and (dow.min() < 0 or dow.max() >= 7):
            raise ValueError("day-of-week out of [0, 7)")
        tt = np.asarray(travel_time, dtype=self.minute.dtype)[..., None]
        out = F.add(F.add(F.gather_rows(self.minute, minute), F.gather_rows(self.day, dow)),
                    self.travel(Tensor(tt)))
        if unknown is not None:
            out = F.blend(out, self.unknown, unknown)
        return out


class RouteEncoder:
    """Segment table refined by one GAT pass over the road graph, plus time, through a transformer.

    The table has one extra ``unk`` row after the network segments; it is
    not part of the graph and is used as-is.
    """

    def __init__(self, store: ParamStore, name: str, d: int, heads: int, depth: int,
                 adjacency: np.ndarray):
        self.n = adjacency.shape[0]
        self.adjacency = np.asarray(adjacency, bool)
        self.table = store.normal(f"{name}.segments", (self.n + 1, d))
        self.gat = GATLayer(store, f"{name}.gat", d, d)
        self.temporal = TemporalEmbedding(store, f"{name}.time", d)
        self.mask_vec = store.normal(f"{name}.mask", (d,))
        self.stack = TransformerStack(store, f"{name}.stack", d, heads, depth)

    def segment_vectors(self) -> Tensor:
        z = self.gat(F.getitem(self.table, slice(0, self.n)), self.adjacency)
        return F.concat([z, F.getitem(self.table, slice(self.n, self.n + 1))], axis=0)

    def __call__(self, seg, valid, minute, dow, travel_time, mask=None,
                 time_unknown: bool = False, segment_vectors: Tensor | None = None) -> EncodedView:
        seg = np.asarray(seg)
        if seg.size and seg.max() > self.n:
            raise ValueError("segment row out of range")
        z = self.segment_vectors() if segment_vectors is None else segment_vectors
        mask = np.zeros(seg.shape, bool) if mask is None else np.asarray(mask, bool)
        spatial = F.blend(F.gather_rows(z, np.where(valid, seg, -1)), self.mask_vec, mask)
        unknown = mask | time_unknown
        tokens = F.add(spatial, self.temporal(minute, dow, travel_time, unknown))
        h_S = self.stack(add_positions(tokens), valid)
        return EncodedView("r", F.masked_mean(h_S, valid), h_S, np.asarray(valid, bool))

    def encode(self, batch: Batch) -> EncodedView:
        return self(batch.seg, batch.r_valid, batch.r_minute, batch.r_dow, batch.r_tt,
                    batch.masks["r"], batch.time_unknown)


class GpsEncoder:
    """Two-level recurrence: points within each unit, then the unit summaries.

    Level one runs a BiGRU over every sub-trajectory (the points sharing one
    assignment column) and mean-pools its states; level two runs a BiGRU over
    the per-unit vectors, so |h_S| equals the number of route or grid units.
    """

    def __init__(self, store: ParamStore, name: str, d: int, n_features: int = 4):
        if d % 2:
            raise ValueError("GPS encoder needs an even model dimension")
        self.input = Linear(store, f"{name}.input", n_features, d)
        self.level1 = BiGRU(store, f"{name}.level1", d, d // 2)
        self.level2 = BiGRU(store, f"{name}.level2", d, d // 2)
        self.output = Linear(store, f"{name}.output", d, d)
        self.mask_vec = store.normal(f"{name}.mask", (d,))

    def __call__(self, sub: SubTrajectories, valid, mask=None, modality: str = "p|r") -> EncodedView:
        valid = np.asarray(valid, bool)
        if (sub.index >= 0).sum(axis=1).tolist() != valid.sum(axis=1).tolist():
            raise ValueError("sub-trajectory count does not match the unit count")
        x = self.input(Tensor(sub.feats.astype(self.input.W.dtype, copy=False)))
        _, summary = self.level1(x, sub.valid)
        units = F.gather_rows(summary, sub.index)
        if mask is not None:
            units = F.blend(units, self.mask_vec, mask)
        states, _ = self.level2(units, valid)
        h_S = self.output(states)
        return EncodedView(modality, F.masked_mean(h_S, valid), h_S, valid)

    def encode(self, batch: Batch, modality: str) -> EncodedView:
        if modality == "p|r":
            return self(batch.sub_r, batch.r_valid, batch.masks["p|r"], "p|r")
        return self(batch.sub_g, batch.g_valid, batch.masks["p|g"], "p|g")


class GridEncoder:
    """Cell embedding + POI-frequency-weighted category embeddings + time, through a transformer."""

    def __init__(self, store: ParamStore, name: str, d: int, heads: int, depth: int, n_cells: int):
        self.n_cells = n_cells
        self.cells = store.normal(f"{name}.cells", (n_cells, d))
        self.categories = store.normal(f"{name}.categories", (N_POI_CATEGORIES, d))
        self.temporal = TemporalEmbedding(store, f"{name}.time", d)
        self.mask_vec = store.normal(f"{name}.mask", (d,))
        self.stack = TransformerStack(store, f"{name}.stack", d, heads, depth)

    def tokens(self, cell, sem, valid, minute, dow, travel_time, mask=None, time_unknown=False) -> Tensor:
        cell = np.asarray(cell)
        if cell.size and cell.max() >= self.n_cells:
            raise ValueError("cell id out of range")
        mask = np.zeros(cell.shape, bool) if mask is None else np.asarray(mask, bool)
        sem = np.asarray(sem, dtype=self.cells.dtype)
        spatial = F.add(F.gather_rows(self.cells, np.where(valid, cell, -1)), F.matmul(sem, self.categories))
        spatial = F.blend(spatial, self.mask_vec, mask)
        return F.add(spatial, self.temporal(minute, dow, travel_time, mask | time_unknown))

    def __call__(self, cell, sem, valid, minute, dow, travel_time, mask=None,
                 time_unknown: bool = False) -> EncodedView:
        valid = np.asarray(valid, bool)
        tokens = self.tokens(cell, sem, valid, minute, dow, travel_time, mask, time_unknown)
        h_S = self.stack(add_positions(tokens), valid)
        return EncodedView("g", F.masked_mean(h_S, valid), h_S, valid)

    def encode(self, batch: Batch) -> EncodedView:
        return self(batch.cell, batch.sem, batch.g_valid, batch.g_minute, batch.g_dow, batch.g_tt,
                    batch.masks["g"], batch.time_unknown)
