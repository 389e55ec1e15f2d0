"""Deterministic synthetic city: lattice road network, POIs, simulated GPS trips.

Coordinates are stored as latitude/longitude degrees and converted to local
metres with a flat-earth approximation around a fixed reference latitude.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

ROAD_TYPES = ("primary", "secondary", "tertiary", "residential")
FREE_SPEED = {"primary": 16.0, "secondary": 12.0, "tertiary": 9.0, "residential": 6.0}
SPEED_NOISE_SIGMA = 0.1
N_POI_CATEGORIES = 13

REF_LAT = 34.25
REF_LON = 108.94
M_PER_DEG_LAT = 6_371_000.0 * np.pi / 180.0
M_PER_DEG_LON = M_PER_DEG_LAT * np.cos(np.radians(REF_LAT))


def to_xy(lat, lon) -> tuple[np.ndarray, np.ndarray]:
    """Degrees to local metres (x east, y north) around the reference point."""
    return ((np.asarray(lon) - REF_LON) * M_PER_DEG_LON, (np.asarray(lat) - REF_LAT) * M_PER_DEG_LAT)


def to_latlon(x, y) -> tuple[np.ndarray, np.ndarray]:
    return (REF_LAT + np.asarray(y) / M_PER_DEG_LAT, REF_LON + np.asarray(x) / M_PER_DEG_LON)


@dataclass
class Segment:
    id: int
    start: tuple[float, float]  # (lat, lon)
    end: tuple[float, float]
    road_type: str
    length: float
    free_speed: float
    nodes: tuple[int, int] = (0, 0)


@dataclass
class RoadNetwork:
    segments: list[Segment]
    adjacency: np.ndarray
    node_positions: np.ndarray  # (n_nodes, 2) lat/lon
    neighbors: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.neighbors:
            self.neighbors = [np.flatnonzero(row) for row in self.adjacency]

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def endpoints_xy(self) -> np.ndarray:
        """(n, 2, 2) array of segment endpoints in metres: [segment, end, (x, y)]."""
        lat = np.array([[s.start[0], s.end[0]] for s in self.segments])
        lon = np.array([[s.start[1], s.end[1]] for s in self.segments])
        x, y = to_xy(lat, lon)
        return np.stack([x, y], axis=-1)

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        """(lat_min, lon_min, lat_max, lon_max) of all intersections."""
        lat, lon = self.node_positions[:, 0], self.node_positions[:, 1]
        return float(lat.min()), float(lon.min()), float(lat.max()), float(lon.max())

    def graph(self) -> nx.Graph:
        """Intersection graph with one edge per segment, weighted by free-flow time."""
        g = nx.Graph()
        g.add_nodes_from(range(len(self.node_positions)))
        for s in self.segments:
            g.add_edge(*s.nodes, segment=s.id, time=s.length / s.free_speed)
        return g


@dataclass
class Poi:
    lat: float
    lon: float
    category: int


@dataclass
class GpsPoint:
    lat: float
    lon: float
    t: float


@dataclass
class GroundTruth:
    segments: list[int]
    speeds: list[float]
    travel_time: float
    destination: tuple[float, float]


@dataclass
class GpsTrajectory:
    id: int
    points: list[GpsPoint]
    truth: GroundTruth | None = None

    def __len__(self) -> int:
        return len(self.points)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        lat = np.array([p.lat for p in self.points])
        lon = np.array([p.lon for p in self.points])
        t = np.array([p.t for p in self.points])
        return lat, lon, t


# --------------------------------------------------------------------- network

def _lattice_edges(rows: int, cols: int) -> list[tuple[int, int]]:
    node = lambda r, c: r * cols + c  # noqa: E731
    edges = [(node(r, c), node(r, c + 1)) for r in range(rows) for c in range(cols - 1)]
    edges += [(node(r, c), node(r + 1, c)) for r in range(rows - 1) for c in range(cols)]
    return edges


def _band_types(rings: np.ndarray) -> list[str]:
    """Map ring depth (0 = outer ring) to road types, outermost band primary.

    Each ring goes to the quartile containing the midpoint of its share of
    segments, so classes stay roughly balanced and monotone in depth.
    """
    levels, counts = np.unique(rings, return_counts=True)
    mid = (np.cumsum(counts) - counts / 2) / counts.sum()
    cls = np.minimum((4 * mid).astype(int), 3)
    level_type = {lvl: ROAD_TYPES[c] for lvl, c in zip(levels, cls)}
    return [level_type[r] for r in rings]


def generate_road_network(seed: int, rows: int, cols: int, drop_rate: float = 0.0,
                          spacing: float = 220.0, jitter: float = 0.12) -> RoadNetwork:
    """Lattice of ``rows`` x ``cols`` intersections, one segment per lattice edge.

    A ``drop_rate`` fraction of segments is removed without disconnecting the
    graph (fewer are dropped if too many edges are bridges).
    """
    if rows < 2 or cols < 2:
        raise ValueError("rows and cols must both be >= 2")
    if not 0 <= drop_rate < 0.5:
        raise ValueError("drop_rate must lie in [0, 0.5)")
    rng = np.random.default_rng(seed)
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    x = cc.ravel() * spacing + rng.uniform(-jitter, jitter, rows * cols) * spacing
    y = rr.ravel() * spacing + rng.uniform(-jitter, jitter, rows * cols) * spacing
    edges = _lattice_edges(rows, cols)

    n_drop = int(round(drop_rate * len(edges)))
    if n_drop:
        g = nx.Graph(edges)
        dropped = set()
        for k in rng.permutation(len(edges)):
            if len(dropped) >= n_drop:
                break
            u, v = edges[k]
            g.remove_edge(u, v)
            if nx.has_path(g, u, v):
                dropped.add(int(k))
            else:
                g.add_edge(u, v)
        edges = [e for k, e in enumerate(edges) if k not in dropped]

    ring_of_node = np.minimum.reduce([rr.ravel(), cc.ravel(), rows - 1 - rr.ravel(), cols - 1 - cc.ravel()])
    rings = np.array([min(ring_of_node[u], ring_of_node[v]) for u, v in edges])
    types = _band_types(rings)
    lat, lon = to_latlon(x, y)
    segments = []
    for sid, ((u, v), rt) in enumerate(zip(edges, types)):
        length = float(np.hypot(x[u] - x[v], y[u] - y[v]))
        segments.append(Segment(sid, (float(lat[u]), float(lon[u])), (float(lat[v]), float(lon[v])),
                                rt, length, FREE_SPEED[rt], (u, v)))

    n = len(segments)
    incident: dict[int, list[int]] = {}
    for s in segments:
        for node in s.nodes:
            incident.setdefault(node, []).append(s.id)
    A = np.zeros((n, n), dtype=bool)
    for ids in incident.values():
        for a in ids:
            for b in ids:
                if a != b:
                    A[a, b] = True
    return RoadNetwork(segments, A, np.stack([lat, lon], axis=1))


# ------------------------------------------------------------------------ POIs

def zone_distributions(zone_count: int, rng: np.random.Generator, concentration: float = 0.7) -> np.ndarray:
    """One category distribution per zone, each concentrated on a distinct dominant category."""
    dominant = rng.permutation(N_POI_CATEGORIES)
    dists = np.zeros((zone_count, N_POI_CATEGORIES))
    for k in range(zone_count):
        main = dominant[k % N_POI_CATEGORIES]
        rest = rng.dirichlet(np.ones(N_POI_CATEGORIES - 1)) * (1.0 - concentration)
        dists[k, np.arange(N_POI_CATEGORIES) != main] = rest
        dists[k, main] = concentration
    return dists


def generate_pois(network: RoadNetwork, seed: int, zone_count: int = 8, pois_per_zone: int = 200,
                  concentration: float = 0.7) -> list[Poi]:
    """POIs in ``zone_count`` Voronoi zones, each with its own category mix."""
    if zone_count < 1:
        raise ValueError("zone_count must be >= 1")
    rng = np.random.default_rng(seed)
    lat0, lon0, lat1, lon1 = network.bbox
    x0, y0 = to_xy(lat0, lon0)
    x1, y1 = to_xy(lat1, lon1)
    centers = np.column_stack([rng.uniform(x0, x1, zone_count), rng.uniform(y0, y1, zone_count)])
    dists = zone_distributions(zone_count, rng, concentration)
    pois = []
    for k in range(zone_count):
        kept: list[tuple[float, float]] = []
        for _ in range(200):
            cand = np.column_stack([rng.uniform(x0, x1, 4 * pois_per_zone), rng.uniform(y0, y1, 4 * pois_per_zone)])
            owner = np.argmin(((cand[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
            kept.extend(map(tuple, cand[owner == k]))
            if len(kept) >= pois_per_zone:
                break
        if not kept:
            kept = [tuple(centers[k])]
        kept = kept[:pois_per_zone]
        cats = rng.choice(N_POI_CATEGORIES, size=len(kept), p=dists[k])
        for (px, py), c in zip(kept, cats):
            plat, plon = to_latlon(px, py)
            pois.append(Poi(float(plat), float(plon), int(c)))
    return pois


# ---------------------------------------------------------------- trajectories

def simulate_trajectories(network: RoadNetwork, seed: int, n: int, sample_period: float = 5.0,
                          noise_sigma: float = 0.0, min_trip_m: float = 0.0,
                          speed_sigma: float = SPEED_NOISE_SIGMA) -> list[GpsTrajectory]:
    """Shortest-time trips between random intersections, sampled every ``sample_period`` s.

    Each traversed segment gets a realised speed free_speed * exp(speed_sigma * N(0,1)).
    ``min_trip_m`` rejects origin/destination pairs closer than that straight-line distance.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if sample_period <= 0:
        raise ValueError("sample_period must be positive")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    g = network.graph()
    nx_, ny_ = to_xy(network.node_positions[:, 0], network.node_positions[:, 1])
    n_nodes = len(nx_)
    out: list[GpsTrajectory] = []
    while len(out) < n:
        o, d = (int(v) for v in rng.integers(0, n_nodes, size=2))
        if o == d or np.hypot(nx_[o] - nx_[d], ny_[o] - ny_[d]) < min_trip_m:
            continue
        path = nx.shortest_path(g, o, d, weight="time")
        seg_ids = [g.edges[a, b]["segment"] for a, b in zip(path[:-1], path[1:])]
        segs = [network.segments[s] for s in seg_ids]
        speeds = np.array([s.free_speed for s in segs]) * np.exp(speed_sigma * rng.normal(size=len(segs)))
        lengths = np.array([s.length for s in segs])
        durations = lengths / speeds
        total = float(durations.sum())
        if total < sample_period:
            continue
        dow = int(rng.integers(0, 7))
        t0 = dow * 86400.0 + float(rng.uniform(0, 86400.0))
        times = np.arange(int(np.floor(total / sample_period)) + 1) * sample_period
        bounds = np.r_[0.0, np.cumsum(durations)]
        k = np.clip(np.searchsorted(bounds, times, side="right") - 1, 0, len(segs) - 1)
        frac = np.clip((times - bounds[k]) / durations[k], 0.0, 1.0)
        px = np.empty_like(times)
        py = np.empty_like(times)
        for i, (ki, fi) in enumerate(zip(k, frac)):
            a, b = path[ki], path[ki + 1]
            px[i] = nx_[a] + fi * (nx_[b] - nx_[a])
            py[i] = ny_[a] + fi * (ny_[b] - ny_[a])
        if noise_sigma > 0:
            px = px + rng.normal(0, noise_sigma, size=px.shape)
            py = py + rng.normal(0, noise_sigma, size=py.shape)
        lat, lon = to_latlon(px, py)
        points = [GpsPoint(float(a), float(b), t0 + float(t)) for a, b, t in zip(lat, lon, times)]
        dlat, dlon = network.node_positions[d]
        truth = GroundTruth([int(s) for s in seg_ids], [float(v) for v in speeds], total,
                            (float(dlat), float(dlon)))
        out.append(GpsTrajectory(len(out), points, truth))
    return out


# -------------------------------------------------------------------------- I/O

def write_network(network: RoadNetwork, path) -> None:
    """``network.json``: segments (lat/lon degrees, metres, m/s) and adjacency lists."""
    doc = {
        "units": {"position": "degrees", "length": "m", "free_speed": "m/s"},
        "nodes": network.node_positions.tolist(),
        "segments": [
            {"id": s.id, "start": list(s.start), "end": list(s.end), "nodes": list(s.nodes),
             "road_type": s.road_type, "length": s.length, "free_speed": s.free_speed}
            for s in network.segments
        ],
        "adjacency": [nb.tolist() for nb in network.neighbors],
    }
    Path(path).write_text(json.dumps(doc))


def read_network(path) -> RoadNetwork:
    doc = json.loads(Path(path).read_text())
    segs = [Segment(s["id"], tuple(s["start"]), tuple(s["end"]), s["road_type"], s["length"],
                    s["free_speed"], tuple(s["nodes"])) for s in doc["segments"]]
    n = len(segs)
    A = np.zeros((n, n), dtype=bool)
    for i, nb in enumerate(doc["adjacency"]):
        A[i, nb] = True
    return RoadNetwork(segs, A, np.array(doc["nodes"], dtype=float))


def write_pois(pois: list[Poi], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["lat", "lon", "category"])
        for p in pois:
            w.writerow([repr(p.lat), repr(p.lon), p.category])


def read_pois(path) -> list[Poi]:
    with open(path, newline="") as f:
        return [Poi(float(r["lat"]), float(r["lon"]), int(r["category"])) for r in csv.DictReader(f)]


def trajectory_to_dict(traj: GpsTrajectory) -> dict:
    doc = {"id": traj.id, "points": [[p.lat, p.lon, p.t] for p in traj.points]}
    if traj.truth is not None:
        tr = traj.truth
        doc["truth"] = {"segments": tr.segments, "speeds": tr.speeds, "travel_time": tr.travel_time,
                        "destination": list(tr.destination)}
    return doc


def trajectory_from_dict(doc: dict) -> GpsTrajectory:
    truth = None
    if "truth" in doc:
        tr = doc["truth"]
        truth = GroundTruth(tr["segments"], tr["speeds"], tr["travel_time"], tuple(tr["destination"]))
    return GpsTrajectory(doc["id"], [GpsPoint(*p) for p in doc["points"]], truth)


def write_trajectories(trajs: list[GpsTrajectory], path) -> None:
    """``traj.jsonl``: one trajectory per line, points as [lat, lon, t_seconds]."""
    with open(path, "w") as f:
        for t in trajs:
            f.write(json.dumps(trajectory_to_dict(t)) + "\n")


def read_trajectories(path) -> list[GpsTrajectory]:
    with open(path) as f:
        return [trajectory_from_dict(json.loads(line)) for line in f if line.strip()]
