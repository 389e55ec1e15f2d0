"""Featurization of derived samples and padded batch assembly."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .city import N_POI_CATEGORIES, to_xy
from .views import Sample

SECONDS_PER_DAY = 86400.0
STREAMS = ("r", "p|r", "g", "p|g")


def minute_of_day(t) -> np.ndarray:
    return (np.floor(np.mod(t, SECONDS_PER_DAY) / 60.0)).astype(np.int64)


def day_of_week(t) -> np.ndarray:
    return (np.floor(np.asarray(t) / SECONDS_PER_DAY).astype(np.int64)) % 7


def unit_durations(entry_times, end_time: float) -> np.ndarray:
    """Time spent in each unit: next entry time minus this one, the last one runs to ``end_time``."""
    t = np.asarray(entry_times, dtype=np.float64)
    return np.maximum(np.diff(np.r_[t, end_time]), 0.0)


def point_motion(sample: Sample) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """lat, lon, time gap to the previous point and a speed estimate (m/s) per GPS point."""
    lat, lon, t = sample.gps.arrays()
    x, y = to_xy(lat, lon)
    dt = np.r_[0.0, np.diff(t)]
    dist = np.r_[0.0, np.hypot(np.diff(x), np.diff(y))]
    speed = np.where(dt > 0, dist / np.where(dt > 0, dt, 1.0), 0.0)
    if len(speed) > 1:
        speed[0] = speed[1]
    return lat, lon, dt, speed


@dataclass
class FeatureStats:
    """Dataset-level normalisation constants (fit on the train split)."""

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    dt_mean: float
    dt_std: float
    speed_mean: float
    speed_std: float
    tt_scale: float

    @classmethod
    def fit(cls, samples: list[Sample], bbox: tuple[float, float, float, float]) -> "FeatureStats":
        dts, speeds, durs = [], [], []
        for s in samples:
            _, _, dt, speed = point_motion(s)
            dts.append(dt[1:])
            speeds.append(speed)
            end = s.gps.points[-1].t
            durs.append(unit_durations(s.route.times, end))
            durs.append(unit_durations(s.grid.times, end))
        dts, speeds, durs = np.concatenate(dts), np.concatenate(speeds), np.concatenate(durs)
        return cls(float(bbox[0]), float(bbox[2]), float(bbox[1]), float(bbox[3]),
                   float(dts.mean()), float(max(dts.std(), 1e-6)),
                   float(speeds.mean()), float(max(speeds.std(), 1e-6)),
                   float(max(durs.mean(), 1e-6)))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Vocab:
    """Id spaces for the embedding tables and the masked-token heads.

    Embedding tables cover every network segment (plus one ``unk`` row) and
    every grid cell. The segment prediction head covers ``segments`` only.
    """

    n_network_segments: int
    n_cells: int
    segments: list[int]

    def __post_init__(self):
        self.seg_index = {s: i for i, s in enumerate(self.segments)}

    @property
    def unk_segment(self) -> int:
        return self.n_network_segments

    def to_dict(self) -> dict:
        return {"n_network_segments": self.n_network_segments, "n_cells": self.n_cells,
                "segments": list(self.segments)}


@dataclass
class SampleArrays:
    id: int
    seg: np.ndarray         # embedding row per route entry (unk row for unknown ids)
    seg_target: np.ndarray  # prediction-head index per route entry, -1 if outside the vocabulary
    r_minute: np.ndarray
    r_dow: np.ndarray
    r_tt: np.ndarray
    cell: np.ndarray
    sem: np.ndarray
    g_minute: np.ndarray
    g_dow: np.ndarray
    g_tt: np.ndarray
    points: np.ndarray      # (n, 4) lat, lon, dt, speed (normalised)
    route_runs: list[tuple[int, int]]
    grid_runs: list[tuple[int, int]]

    @property
    def route_len(self) -> int:
        return len(self.seg)

    @property
    def grid_len(self) -> int:
        return len(self.cell)

    def length(self, stream: str) -> int:
        return self.route_len if stream in ("r", "p|r") else self.grid_len


def featurize(sample: Sample, stats: FeatureStats, vocab: Vocab) -> SampleArrays:
    route_runs = sample.b_route.runs()
    grid_runs = sample.b_grid.runs()
    if len(route_runs) != len(sample.route) or len(grid_runs) != len(sample.grid):
        raise ValueError(f"sample {sample.id}: assignment columns disagree with view lengths")
    segs = np.array(sample.route.segments, dtype=np.int64)
    known = (segs >= 0) & (segs < vocab.n_network_segments)
    seg = np.where(known, segs, vocab.unk_segment)
    seg_target = np.array([vocab.seg_index.get(int(s), -1) for s in segs], dtype=np.int64)
    cell = np.array(sample.grid.cells, dtype=np.int64)
    if cell.size and (cell.min() < 0 or cell.max() >= vocab.n_cells):
        raise ValueError(f"sample {sample.id}: cell id out of range")
    end = sample.gps.points[-1].t
    rt, gt = np.array(sample.route.times), np.array(sample.grid.times)
    lat, lon, dt, speed = point_motion(sample)
    pts = np.stack([
        (lat - stats.lat_min) / max(stats.lat_max - stats.lat_min, 1e-12),
        (lon - stats.lon_min) / max(stats.lon_max - stats.lon_min, 1e-12),
        (dt - stats.dt_mean) / stats.dt_std,
        (speed - stats.speed_mean) / stats.speed_std,
    ], axis=1)
    sem = (np.stack([e.sem for e in sample.grid.entries]) if len(sample.grid)
           else np.zeros((0, N_POI_CATEGORIES)))
    return SampleArrays(
        sample.id, seg, seg_target,
        minute_of_day(rt), day_of_week(rt), unit_durations(rt, end) / stats.tt_scale,
        cell, sem, minute_of_day(gt), day_of_week(gt), unit_durations(gt, end) / stats.tt_scale,
        pts, route_runs, grid_runs)


@dataclass
class SubTrajectories:
    """GPS points regrouped by assignment column for the first-level recurrence."""

    feats: np.ndarray   # (n_sub, T, 4)
    valid: np.ndarray   # (n_sub, T)
    index: np.ndarray   # (B, L) row into feats, -1 for padding


@dataclass
class Batch:
    ids: list[int]
    seg: np.ndarray
    seg_target: np.ndarray
    r_valid: np.ndarray
    r_minute: np.ndarray
    r_dow: np.ndarray
    r_tt: np.ndarray
    cell: np.ndarray
    sem: np.ndarray
    g_valid: np.ndarray
    g_minute: np.ndarray
    g_dow: np.ndarray
    g_tt: np.ndarray
    sub_r: SubTrajectories
    sub_g: SubTrajectories
    masks: dict[str, np.ndarray]  # stream -> (B, L) bool
    time_unknown: bool = False

    @property
    def size(self) -> int:
        return len(self.ids)

    def valid(self, stream: str) -> np.ndarray:
        return self.r_valid if stream in ("r", "p|r") else self.g_valid


def _pad(rows: list[np.ndarray], fill, dtype) -> np.ndarray:
    L = max((len(r) for r in rows), default=0)
    tail = rows[0].shape[1:] if rows else ()
    out = np.full((len(rows), L) + tail, fill, dtype=dtype)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def _subtrajectories(items: list[SampleArrays], which: str, time_unknown: bool, dtype) -> SubTrajectories:
    chunks, index_rows, k = [], [], 0
    for it in items:
        runs = it.route_runs if which == "r" else it.grid_runs
        pts = it.points
        if time_unknown:
            pts = pts.copy()
            pts[:, 2:] = 0.0
        chunks.extend(pts[a:b] for a, b in runs)
        index_rows.append(np.arange(k, k + len(runs)))
        k += len(runs)
    T = max(len(c) for c in chunks)
    feats = np.zeros((len(chunks), T, 4), dtype=dtype)
    valid = np.zeros((len(chunks), T), dtype=bool)
    for i, c in enumerate(chunks):
        feats[i, :len(c)] = c
        valid[i, :len(c)] = True
    return SubTrajectories(feats, valid, _pad(index_rows, -1, np.int64))


def collate(items: list[SampleArrays], masks: dict[str, list[np.ndarray]] | None = None,
            time_unknown: bool = False, dtype=np.float32) -> Batch:
    """Pad a list of featurized samples into one batch.

    ``masks`` maps a stream to one boolean vector per sample (token positions,
    not counting the fusion summary token). ``time_unknown`` blanks all
    temporal inputs, including the per-point gap and speed features.
    """
    if not items:
        raise ValueError("cannot collate an empty batch")
    r_valid = _pad([np.ones(it.route_len, bool) for it in items], False, bool)
    g_valid = _pad([np.ones(it.grid_len, bool) for it in items], False, bool)
    full = {}
    for stream in STREAMS:
        valid = r_valid if stream in ("r", "p|r") else g_valid
        if masks is None or stream not in masks:
            full[stream] = np.zeros_like(valid)
        else:
            full[stream] = _pad([np.asarray(m, bool) for m in masks[stream]], False, bool) & valid
    return Batch(
        ids=[it.id for it in items],
        seg=_pad([it.seg for it in items], -1, np.int64),
        seg_target=_pad([it.seg_target for it in items], -1, np.int64),
        r_valid=r_valid,
        r_minute=_pad([it.r_minute for it in items], 0, np.int64),
        r_dow=_pad([it.r_dow for it in items], 0, np.int64),
        r_tt=_pad([it.r_tt for it in items], 0.0, dtype),
        cell=_pad([it.cell for it in items], -1, np.int64),
        sem=_pad([it.sem for it in items], 0.0, dtype),
        g_valid=g_valid,
        g_minute=_pad([it.g_minute for it in items], 0, np.int64),
        g_dow=_pad([it.g_dow for it in items], 0, np.int64),
        g_tt=_pad([it.g_tt for it in items], 0.0, dtype),
        sub_r=_subtrajectories(items, "r", time_unknown, dtype),
        sub_g=_subtrajectories(items, "g", time_unknown, dtype),
        masks=full,
        time_unknown=time_unknown,
    )


def length_grouped_batches(items: list, batch_size: int, rng: np.random.Generator,
                           key=lambda it: it.route_len, pool: int = 4) -> list[list]:
    """Shuffle, sort within pools of ``pool`` batches by length, then shuffle the batches."""
    order = rng.permutation(len(items))
    batches = []
    span = batch_size * pool
    for start in range(0, len(order), span):
        chunk = sorted(order[start:start + span].tolist(), key=lambda i: (key(items[i]), i))
        batches.extend(chunk[k:k + batch_size] for k in range(0, len(chunk), batch_size))
    return [[items[i] for i in batches[j]] for j in rng.permutation(len(batches))]
