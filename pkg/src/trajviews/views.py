"""GPS trajectory -> route and grid views, assignment matrices, filtering, splits."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .city import N_POI_CATEGORIES, GpsTrajectory, Poi, RoadNetwork, to_xy, trajectory_from_dict, trajectory_to_dict

log = logging.getLogger(__name__)


@dataclass
class RouteEntry:
    segment: int
    t: float


@dataclass
class RouteTrajectory:
    entries: list[RouteEntry]
    low_confidence: bool = False

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def segments(self) -> list[int]:
        return [e.segment for e in self.entries]

    @property
    def times(self) -> list[float]:
        return [e.t for e in self.entries]


@dataclass
class GridEntry:
    cell: int
    sem: np.ndarray
    t: float
    empty: bool = False


@dataclass
class GridTrajectory:
    entries: list[GridEntry]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def cells(self) -> list[int]:
        return [e.cell for e in self.entries]

    @property
    def times(self) -> list[float]:
        return [e.t for e in self.entries]


@dataclass
class AssignmentMatrix:
    """Sparse binary point-to-unit matrix.

    ``point_to_col[i]`` is the column (route/grid entry position) of GPS point
    i; ``units[c]`` is the segment or cell id of column c.
    """

    point_to_col: np.ndarray
    units: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.point_to_col), len(self.units)

    def dense(self) -> np.ndarray:
        B = np.zeros(self.shape, dtype=np.int8)
        B[np.arange(len(self.point_to_col)), self.point_to_col] = 1
        return B

    def runs(self) -> list[tuple[int, int]]:
        """(start, stop) point ranges of each column, in column order.

        Raises if a column's points are not one contiguous run in order.
        """
        cols = self.point_to_col
        if len(cols) == 0:
            return []
        change = np.flatnonzero(np.diff(cols)) + 1
        starts = np.r_[0, change]
        stops = np.r_[change, len(cols)]
        if not np.array_equal(cols[starts], np.arange(len(starts))) or len(starts) != len(self.units):
            raise ValueError("assignment columns are not contiguous runs in column order")
        return list(zip(starts.tolist(), stops.tolist()))


def collapse_labels(labels: np.ndarray, times: np.ndarray) -> tuple[list[int], list[float], np.ndarray]:
    """Collapse consecutive duplicate labels; unit time is its first point's timestamp."""
    labels = np.asarray(labels)
    starts = np.r_[0, np.flatnonzero(np.diff(labels)) + 1]
    units = labels[starts].tolist()
    unit_times = np.asarray(times)[starts].tolist()
    col = np.cumsum(np.r_[0, np.diff(labels) != 0])
    return units, unit_times, col.astype(np.int64)


# --------------------------------------------------------------- map matching

def point_segment_distance(px, py, seg_xy: np.ndarray) -> np.ndarray:
    """Perpendicular (clamped) distance from each point to each segment.

    ``px``, ``py`` are (P,) and ``seg_xy`` is (S, 2, 2); returns (P, S).
    """
    a = seg_xy[:, 0]
    d = seg_xy[:, 1] - a
    len2 = np.maximum((d * d).sum(-1), 1e-12)
    rx = np.asarray(px)[:, None] - a[None, :, 0]
    ry = np.asarray(py)[:, None] - a[None, :, 1]
    u = np.clip((rx * d[None, :, 0] + ry * d[None, :, 1]) / len2[None], 0.0, 1.0)
    ex = rx - u * d[None, :, 0]
    ey = ry - u * d[None, :, 1]
    return np.hypot(ex, ey)


class SegmentIndex:
    """Uniform bucket grid over segment bounding boxes.

    ``candidates`` returns every segment within ``radius`` of a point (exact
    distances), widening to all segments when none is that close.
    """

    def __init__(self, network: RoadNetwork, radius: float = 100.0):
        self.seg_xy = network.endpoints_xy
        self.radius = radius
        lo = self.seg_xy.min(axis=1) - radius
        hi = self.seg_xy.max(axis=1) + radius
        self.origin = lo.min(axis=0)
        self.cell = max(radius, 1.0)
        self.buckets: dict[tuple[int, int], list[int]] = {}
        blo = np.floor((lo - self.origin) / self.cell).astype(int)
        bhi = np.floor((hi - self.origin) / self.cell).astype(int)
        for s in range(len(self.seg_xy)):
            for i in range(blo[s, 0], bhi[s, 0] + 1):
                for j in range(blo[s, 1], bhi[s, 1] + 1):
                    self.buckets.setdefault((i, j), []).append(s)
        self.all_ids = np.arange(len(self.seg_xy))

    def candidates(self, x: float, y: float) -> tuple[np.ndarray, np.ndarray]:
        key = tuple(np.floor((np.array([x, y]) - self.origin) / self.cell).astype(int))
        ids = np.array(sorted(self.buckets.get(key, [])), dtype=np.int64)
        if len(ids):
            dist = point_segment_distance([x], [y], self.seg_xy[ids])[0]
            near = dist <= self.radius
            if near.any():
                return ids[near], dist[near]
        dist = point_segment_distance([x], [y], self.seg_xy)[0]
        return self.all_ids, dist


def map_match(traj: GpsTrajectory, network: RoadNetwork, sigma: float = 15.0,
              transition_penalty: float = 1.0, index: SegmentIndex | None = None
              ) -> tuple[RouteTrajectory, AssignmentMatrix]:
    """Viterbi decoding of per-point segment labels.

    Emission cost d^2 / (2 sigma^2) from perpendicular distance; transition
    cost 0 to stay, ``transition_penalty`` to move to an adjacent segment and
    infinite otherwise. A zero penalty removes the adjacency constraint, so
    decoding reduces to the per-point nearest segment.
    """
    index = index or SegmentIndex(network, radius=max(100.0, 6 * sigma))
    lat, lon, t = traj.arrays()
    x, y = to_xy(lat, lon)
    cands, costs = [], []
    for px, py in zip(x, y):
        ids, dist = index.candidates(px, py)
        cands.append(ids)
        costs.append(dist * dist / (2.0 * sigma * sigma))

    low_conf = False
    if transition_penalty == 0:
        labels = np.array([ids[np.argmin(c)] for ids, c in zip(cands, costs)])
    else:
        labels = _viterbi(cands, costs, network.adjacency, transition_penalty)
        if labels is None:
            low_conf = True
            labels = np.array([ids[np.argmin(c)] for ids, c in zip(cands, costs)])
            log.debug("trajectory %s: no adjacency-feasible path, using nearest segments", traj.id)

    units, unit_times, cols = collapse_labels(labels, t)
    route = RouteTrajectory([RouteEntry(int(s), float(tt)) for s, tt in zip(units, unit_times)], low_conf)
    return route, AssignmentMatrix(cols, np.array(units, dtype=np.int64))


def _viterbi(cands, costs, A: np.ndarray, penalty: float) -> np.ndarray | None:
    score = costs[0].copy()
    back = []
    for k in range(1, len(cands)):
        prev, cur = cands[k - 1], cands[k]
        trans = np.where(A[np.ix_(prev, cur)], penalty, np.inf)
        trans[prev[:, None] == cur[None, :]] = 0.0
        total = score[:, None] + trans
        arg = np.argmin(total, axis=0)
        score = total[arg, np.arange(len(cur))] + costs[k]
        back.append(arg)
    if not np.isfinite(score.min()):
        return None
    j = int(np.argmin(score))
    path = [j]
    for arg in reversed(back):
        j = int(arg[j])
        path.append(j)
    path.reverse()
    return np.array([cands[k][j] for k, j in enumerate(path)])


# ------------------------------------------------------------------------ grid

@dataclass
class GridSpec:
    lat_min: float
    lon_min: float
    lat_max: float
    lon_max: float
    cell_size: float
    rows: int
    cols: int

    @classmethod
    def covering(cls, network: RoadNetwork, cell_size: float = 250.0) -> "GridSpec":
        lat0, lon0, lat1, lon1 = network.bbox
        x0, y0 = to_xy(lat0, lon0)
        x1, y1 = to_xy(lat1, lon1)
        rows = max(1, int(np.ceil((y1 - y0) / cell_size)))
        cols = max(1, int(np.ceil((x1 - x0) / cell_size)))
        return cls(lat0, lon0, lat1, lon1, cell_size, rows, cols)

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def cell_of(self, lat, lon) -> np.ndarray:
        """Row-major cell index; rows follow latitude, columns longitude.

        Points on or beyond the max edge (or outside the box) clamp to the
        nearest cell.
        """
        x, y = to_xy(lat, lon)
        x0, y0 = to_xy(self.lat_min, self.lon_min)
        c = np.clip(np.floor((np.asarray(x) - x0) / self.cell_size), 0, self.cols - 1).astype(np.int64)
        r = np.clip(np.floor((np.asarray(y) - y0) / self.cell_size), 0, self.rows - 1).astype(np.int64)
        return r * self.cols + c

    def cell_center(self, cell: int) -> tuple[float, float]:
        from .city import to_latlon
        r, c = divmod(int(cell), self.cols)
        x0, y0 = to_xy(self.lat_min, self.lon_min)
        lat, lon = to_latlon(x0 + (c + 0.5) * self.cell_size, y0 + (r + 0.5) * self.cell_size)
        return float(lat), float(lon)


def poi_cell_counts(pois: list[Poi], spec: GridSpec) -> np.ndarray:
    """(n_cells, 13) POI category counts."""
    counts = np.zeros((spec.n_cells, N_POI_CATEGORIES))
    if pois:
        cells = spec.cell_of([p.lat for p in pois], [p.lon for p in pois])
        np.add.at(counts, (cells, [p.category for p in pois]), 1)
    return counts


def grid_semantics(cell_id: int, pois: list[Poi] | None, spec: GridSpec,
                   counts: np.ndarray | None = None) -> tuple[np.ndarray, bool]:
    """Category frequency vector of one cell and whether the cell is empty."""
    if counts is None:
        counts = poi_cell_counts(pois or [], spec)
    row = counts[cell_id]
    total = row.sum()
    if total == 0:
        return np.zeros(N_POI_CATEGORIES), True
    return row / total, False


def derive_grid_trajectory(traj: GpsTrajectory, spec: GridSpec, pois: list[Poi] | None = None,
                           counts: np.ndarray | None = None) -> tuple[GridTrajectory, AssignmentMatrix]:
    if counts is None:
        counts = poi_cell_counts(pois or [], spec)
    lat, lon, t = traj.arrays()
    cells = spec.cell_of(lat, lon)
    units, unit_times, cols = collapse_labels(cells, t)
    entries = []
    for cell, tt in zip(units, unit_times):
        sem, empty = grid_semantics(cell, None, spec, counts)
        entries.append(GridEntry(int(cell), sem, float(tt), empty))
    return GridTrajectory(entries), AssignmentMatrix(cols, np.array(units, dtype=np.int64))


# ----------------------------------------------------------------- samples

@dataclass
class Sample:
    id: int
    gps: GpsTrajectory
    route: RouteTrajectory
    grid: GridTrajectory
    b_route: AssignmentMatrix
    b_grid: AssignmentMatrix

    @property
    def low_confidence(self) -> bool:
        return self.route.low_confidence


def derive_views(trajs: list[GpsTrajectory], network: RoadNetwork, pois: list[Poi], spec: GridSpec,
                 sigma: float = 15.0, transition_penalty: float = 1.0) -> list[Sample]:
    index = SegmentIndex(network, radius=max(100.0, 6 * sigma))
    counts = poi_cell_counts(pois, spec)
    samples = []
    for traj in trajs:
        route, b_r = map_match(traj, network, sigma, transition_penalty, index)
        grid, b_g = derive_grid_trajectory(traj, spec, counts=counts)
        samples.append(Sample(traj.id, traj, route, grid, b_r, b_g))
    return samples


ROUTE_BOUNDS = (10, 100)
GRID_BOUNDS = (10, 100)
GPS_BOUNDS = (10, 256)


@dataclass
class FilterReport:
    kept: int
    dropped: dict[str, int] = field(default_factory=dict)
    segment_vocab: list[int] = field(default_factory=list)


def filter_dataset(samples: list[Sample]) -> tuple[list[Sample], FilterReport]:
    """Drop samples outside the route/grid/GPS length bounds.

    The returned report lists drop counts per rule and the vocabulary of
    segments covered by at least one kept trajectory.
    """
    rules = {
        "route_length": lambda s: ROUTE_BOUNDS[0] <= len(s.route) <= ROUTE_BOUNDS[1],
        "grid_length": lambda s: GRID_BOUNDS[0] <= len(s.grid) <= GRID_BOUNDS[1],
        "gps_length": lambda s: GPS_BOUNDS[0] <= len(s.gps) <= GPS_BOUNDS[1],
    }
    dropped = {name: 0 for name in rules}
    kept = []
    for s in samples:
        ok = True
        for name, rule in rules.items():
            if not rule(s):
                dropped[name] += 1
                ok = False
        if ok:
            kept.append(s)
    if not kept:
        raise ValueError(f"filtering removed every sample; violations per rule: {dropped}")
    vocab = sorted({seg for s in kept for seg in s.route.segments})
    return kept, FilterReport(len(kept), dropped, vocab)


def split_dataset(samples: list, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[list, list, list]:
    fractions = np.asarray(fractions, dtype=float)
    if fractions.shape != (3,) or (fractions < 0).any():
        raise ValueError("fractions must be three non-negative numbers")
    if abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(fractions[0] * len(samples)))
    n_val = int(round(fractions[1] * len(samples)))
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train:n_train + n_val]]
    test = [samples[i] for i in order[n_train + n_val:]]
    return train, val, test


# ------------------------------------------------------------------------ I/O

def sample_to_dict(s: Sample) -> dict:
    return {
        "id": s.id,
        "trajectory": trajectory_to_dict(s.gps),
        "route": [[e.segment, e.t] for e in s.route.entries],
        "grid": [[e.cell, e.t, e.empty, e.sem.tolist()] for e in s.grid.entries],
        "b_route": s.b_route.point_to_col.tolist(),
        "b_grid": s.b_grid.point_to_col.tolist(),
        "flags": {"low_confidence": s.route.low_confidence},
    }


def sample_from_dict(doc: dict) -> Sample:
    route = RouteTrajectory([RouteEntry(int(a), float(b)) for a, b in doc["route"]],
                            doc["flags"]["low_confidence"])
    grid = GridTrajectory([GridEntry(int(c), np.array(sem), float(t), bool(e)) for c, t, e, sem in doc["grid"]])
    b_r = AssignmentMatrix(np.array(doc["b_route"], dtype=np.int64), np.array(route.segments, dtype=np.int64))
    b_g = AssignmentMatrix(np.array(doc["b_grid"], dtype=np.int64), np.array(grid.cells, dtype=np.int64))
    return Sample(doc["id"], trajectory_from_dict(doc["trajectory"]), route, grid, b_r, b_g)


def write_views(samples: list[Sample], path) -> None:
    """``views.jsonl``: one sample per line; B matrices as per-point column indices."""
    with open(path, "w") as f:
        for s in samples:
            f.write(json.dumps(sample_to_dict(s)) + "\n")


def read_views(path) -> list[Sample]:
    with open(Path(path)) as f:
        return [sample_from_dict(json.loads(line)) for line in f if line.strip()]


def truncate_for_destination(s: Sample) -> tuple[Sample, int] | None:
    """Drop the destination cell and everything at or after its first entry.

    Returns ``(truncated_sample, label_cell)``, or None if a view would be
    empty. Cutting at the first visit (not just the final entry) keeps the
    label cell out of every input view even if the trip passed it earlier.
    """
    label = s.grid.entries[-1].cell
    first = next(i for i, e in enumerate(s.grid.entries) if e.cell == label)
    cut_t = s.grid.entries[first].t
    lat, lon, t = s.gps.arrays()
    keep_pts = int(np.searchsorted(t, cut_t, side="left"))
    n_route = sum(1 for e in s.route.entries if e.t < cut_t)
    if first == 0 or keep_pts == 0 or n_route == 0:
        return None
    gps = GpsTrajectory(s.gps.id, s.gps.points[:keep_pts], s.gps.truth)
    route = RouteTrajectory(s.route.entries[:n_route], s.route.low_confidence)
    grid = GridTrajectory(s.grid.entries[:first])
    b_r = AssignmentMatrix(s.b_route.point_to_col[:keep_pts], s.b_route.units[:n_route])
    b_g = AssignmentMatrix(s.b_grid.point_to_col[:keep_pts], s.b_grid.units[:first])
    return replace(s, gps=gps, route=route, grid=grid, b_route=b_r, b_grid=b_g), label
