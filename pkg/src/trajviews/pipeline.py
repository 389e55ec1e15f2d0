"""Dataset preparation, pretraining, checkpoints and embedding export."""
from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .batching import STREAMS, FeatureStats, SampleArrays, Vocab, collate, featurize, length_grouped_batches
from .city import GpsTrajectory, Poi, RoadNetwork, read_network, read_pois, read_trajectories
from .engine import AdamW, Tape, load_checkpoint, no_grad, save_checkpoint
from .model import ModelConfig, ModelOutput, TrajViewsModel, route_token_vectors
from .objectives import ALIGN_PAIRS, LossConfig, align_loss, make_mask, mlm_loss, total_loss
from .views import (
    FilterReport,
    GridSpec,
    Sample,
    derive_views,
    filter_dataset,
    read_views,
    split_dataset,
    truncate_for_destination,
    write_views,
)

log = logging.getLogger(__name__)

EXPORT_MODES = ("full", "time_masked", "destination_truncated")


# ------------------------------------------------------------------ config

@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    d: int = 64
    heads: int = 4
    depth: int = 2
    fusion_depth: int = 2
    tau: float = 0.07
    w1: float = 2.0
    w2: float = 1.0
    mask_prob: float = 0.2
    mask_span: int = 2
    symmetric_pair: bool = False
    no_inter_modal: bool = False
    no_grid_view: bool = False
    no_align_loss: bool = False
    no_mlm_loss: bool = False
    pretrain: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.d, self.heads, self.depth, self.fusion_depth,
                           self.no_inter_modal, self.no_grid_view)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.tau, 0.0 if self.no_align_loss else self.w1,
                          0.0 if self.no_mlm_loss else self.w2,
                          self.mask_prob, self.mask_span, self.symmetric_pair)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def replace(self, **overrides) -> "TrainConfig":
        doc = self.to_dict()
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig.from_dict(doc)


def _coerce(value: str, kind):
    if kind is bool or kind == "bool":
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind is int or kind == "int":
        return int(value)
    if kind is float or kind == "float":
        return float(value)
    return value


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Values are typed by TrainConfig."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise KeyError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(value, types[key])
    return out


def config_to_text(config: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config.to_dict().items())


def load_config(path=None, **overrides) -> TrainConfig:
    """Defaults, then the config file, then explicit overrides (``None`` means unset)."""
    doc = TrainConfig().to_dict()
    if path is not None:
        doc.update(parse_config_text(Path(path).read_text()))
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(doc)


# ------------------------------------------------------------------ dataset

@dataclass
class PreparedData:
    network: RoadNetwork
    spec: GridSpec
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    vocab: Vocab
    stats: FeatureStats
    report: FilterReport
    _items: dict = field(default_factory=dict, repr=False)

    @property
    def samples(self) -> list[Sample]:
        return self.train + self.val + self.test

    def split(self, name: str) -> list[Sample]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def items(self, name: str) -> list[SampleArrays]:
        if name not in self._items:
            self._items[name] = [featurize(s, self.stats, self.vocab) for s in self.split(name)]
        return self._items[name]

    def featurize(self, samples: list[Sample]) -> list[SampleArrays]:
        return [featurize(s, self.stats, self.vocab) for s in samples]


def assemble(network: RoadNetwork, spec: GridSpec, samples: list[Sample], seed: int = 0,
             fractions=(0.8, 0.1, 0.1), split_ids: dict | None = None) -> PreparedData:
    """Filter, split and fit normalisation statistics on the train split."""
    kept, report = filter_dataset(samples)
    if split_ids is None:
        train, val, test = split_dataset(kept, fractions, seed)
    else:
        by_id = {s.id: s for s in kept}
        train, val, test = ([by_id[i] for i in split_ids[k]] for k in ("train", "val", "test"))
    vocab = Vocab(len(network), spec.n_cells, report.segment_vocab)
    stats = FeatureStats.fit(train, network.bbox)
    return PreparedData(network, spec, train, val, test, vocab, stats, report)


def prepare(network: RoadNetwork, pois: list[Poi], trajs: list[GpsTrajectory], seed: int = 0,
            cell_size: float = 250.0, fractions=(0.8, 0.1, 0.1), sigma: float = 15.0,
            transition_penalty: float = 1.0) -> PreparedData:
    spec = GridSpec.covering(network, cell_size)
    samples = derive_views(trajs, network, pois, spec, sigma, transition_penalty)
    return assemble(network, spec, samples, seed, fractions)


def save_prepared(data: PreparedData, out_dir) -> None:
    """``views.jsonl`` holds every kept sample; ``prep.json`` the grid, split ids and filter report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_views(data.samples, out / "views.jsonl")
    doc = {
        "grid": asdict(data.spec),
        "splits": {k: [s.id for s in data.split(k)] for k in ("train", "val", "test")},
        "filter": {"kept": data.report.kept, "dropped": data.report.dropped},
        "segment_vocab": data.vocab.segments,
    }
    (out / "prep.json").write_text(json.dumps(doc, indent=1))


def load_prepared(data_dir) -> PreparedData:
    d = Path(data_dir)
    network = read_network(d / "network.json")
    doc = json.loads((d / "prep.json").read_text())
    spec = GridSpec(**doc["grid"])
    return assemble(network, spec, read_views(d / "views.jsonl"), split_ids=doc["splits"])


def prepare_dir(data_dir, seed: int = 0, **kwargs) -> PreparedData:
    d = Path(data_dir)
    data = prepare(read_network(d / "network.json"), read_pois(d / "pois.csv"),
                   read_trajectories(d / "traj.jsonl"), seed=seed, **kwargs)
    save_prepared(data, d)
    return data


# ------------------------------------------------------------------ training

class NonFiniteLoss(RuntimeError):
    pass


def sample_masks(items: list[SampleArrays], config: TrainConfig, epoch: int) -> dict[str, list[np.ndarray]]:
    """Span masks seeded by (seed, epoch, sample id, stream) so they do not depend on batching."""
    out = {}
    for k, stream in enumerate(STREAMS):
        out[stream] = [make_mask(it.length(stream), config.mask_prob, config.mask_span,
                                 np.random.default_rng([config.seed, epoch, it.id, k])) for it in items]
    return out


@dataclass
class LossParts:
    align: object
    mlm: object
    total: object
    output: ModelOutput


def compute_losses(model: TrajViewsModel, batch, loss_cfg: LossConfig) -> LossParts:
    """One masked forward pass feeding both objectives.

    A zero-weighted objective is still evaluated for logging, but outside
    the tape so it contributes no gradient at all.
    """
    out = model.forward(batch)
    h_T = {m: out.views[m].h_T for m in model.modalities}
    if loss_cfg.w1 == 0:
        with no_grad():
            la = align_loss(h_T, loss_cfg.tau, loss_cfg.symmetric)
    else:
        la = align_loss(h_T, loss_cfg.tau, loss_cfg.symmetric)
    if loss_cfg.w2 == 0:
        with no_grad():
            lm = mlm_loss(model.mlm_logits(out, batch))
    else:
        lm = mlm_loss(model.mlm_logits(out, batch))
    return LossParts(la, lm, total_loss(la, lm, loss_cfg.w1, loss_cfg.w2), out)


def build_model(config: TrainConfig, data: PreparedData) -> TrajViewsModel:
    return TrajViewsModel(config.model_config(), data.vocab, data.network.adjacency, seed=config.seed)


def validation_loss(model: TrajViewsModel, items: list[SampleArrays], config: TrainConfig,
                    batch_size: int = 64) -> float:
    """Mean total loss over ``items`` with masks drawn for a fixed pseudo-epoch (0)."""
    loss_cfg = config.loss_config()
    total, n = 0.0, 0
    for k in range(0, len(items), batch_size):
        chunk = items[k:k + batch_size]
        parts = compute_losses(model, collate(chunk, sample_masks(chunk, config, 0)), loss_cfg)
        total += float(parts.total.data) * len(chunk)
        n += len(chunk)
    return total / max(n, 1)


METRIC_FIELDS = ("kind", "step", "epoch", "L_align", "L_MLM", "L", "val_L")


@dataclass
class TrainResult:
    model: TrajViewsModel
    optimizer: AdamW
    config: TrainConfig
    best_epoch: int
    best_val: float
    metrics: list[dict]
    steps: int

    def epoch_means(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for row in self.metrics:
            if row["kind"] == "step":
                by_epoch.setdefault(row["epoch"], []).append(row["L"])
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]


def write_metrics(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def pretrain(config: TrainConfig, data: PreparedData, metrics_path=None) -> TrainResult:
    """Self-supervised pretraining; the parameters of the best validation epoch are restored at the end."""
    model = build_model(config, data)
    opt = AdamW(model.store, lr=config.lr, weight_decay=config.weight_decay)
    loss_cfg = config.loss_config()
    rng = np.random.default_rng(config.seed)
    train_items, val_items = data.items("train"), data.items("val") or data.items("train")
    rows: list[dict] = []
    best = (np.inf, 0, None, None)
    step = 0
    for epoch in range(1, config.epochs + 1):
        started = time.time()
        for chunk in length_grouped_batches(train_items, config.batch_size, rng):
            batch = collate(chunk, sample_masks(chunk, config, epoch))
            with Tape() as tape:
                parts = compute_losses(model, batch, loss_cfg)
            values = float(parts.align.data), float(parts.mlm.data), float(parts.total.data)
            if not np.isfinite(values).all():
                raise NonFiniteLoss(f"non-finite loss at step {step + 1}, batch ids {batch.ids}")
            opt.zero_grad()
            if parts.total.requires_grad:
                tape.backward(parts.total)
            opt.step()
            step += 1
            rows.append({"kind": "step", "step": step, "epoch": epoch, "L_align": values[0],
                         "L_MLM": values[1], "L": values[2], "val_L": ""})
        val = validation_loss(model, val_items, config)
        rows.append({"kind": "epoch", "step": step, "epoch": epoch, "L_align": "", "L_MLM": "",
                     "L": float(np.mean([r["L"] for r in rows if r["kind"] == "step" and r["epoch"] == epoch])),
                     "val_L": val})
        log.info("epoch %d: train %.4f val %.4f (%.1fs)", epoch, rows[-1]["L"], val, time.time() - started)
        if val < best[0]:
            best = (val, epoch, model.store.state(), copy.deepcopy(opt.state))
    model.store.load_state(best[2])
    opt.state = best[3]
    if metrics_path is not None:
        write_metrics(rows, metrics_path)
    return TrainResult(model, opt, config, best[1], float(best[0]), rows, step)


# ------------------------------------------------------------------ checkpoints

def save_model(path, result: TrainResult, data: PreparedData) -> None:
    state = result.optimizer.state
    meta = {
        "config": result.config.to_dict(),
        "epoch": result.best_epoch,
        "best_val": result.best_val,
        "vocab": data.vocab.to_dict(),
        "stats": data.stats.to_dict(),
        "optimizer": {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
                      "weight_decay": state.weight_decay, "step": state.step},
    }
    save_checkpoint(path, result.model.store.state(), meta, (state.m, state.v))


def load_model(path, network: RoadNetwork) -> tuple[TrajViewsModel, dict]:
    params, meta, (m1, m2) = load_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])
    vocab = Vocab(**meta["vocab"])
    model = TrajViewsModel(config.model_config(), vocab, network.adjacency, seed=config.seed)
    model.store.load_state(params)
    meta["moments"] = (m1, m2)
    return model, meta


# ------------------------------------------------------------------ exports

def forward_items(model: TrajViewsModel, items: list[SampleArrays], time_unknown: bool = False,
                  batch_size: int = 64):
    """Unmasked forward passes in fixed chunks; yields (batch, output)."""
    for k in range(0, len(items), batch_size):
        batch = collate(items[k:k + batch_size], time_unknown=time_unknown)
        yield batch, model.forward(batch)


def cosine_gap(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Mean cosine of matching rows and mean cosine of all non-matching row pairs."""
    a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    S = a.astype(np.float64) @ b.T.astype(np.float64)
    n = len(S)
    pos = float(np.trace(S) / n)
    neg = float((S.sum() - np.trace(S)) / (n * n - n)) if n > 1 else float("nan")
    return pos, neg


def alignment_gap(model: TrajViewsModel, items: list[SampleArrays], batch_size: int = 64) -> dict:
    """Positive minus negative cross-view cosine of view-level embeddings, negatives drawn within chunks."""
    pos, neg = [], []
    for _, out in forward_items(model, items, batch_size=batch_size):
        for a, b in ALIGN_PAIRS:
            if a in out.views and b in out.views and len(out.views[a].h_T.data) > 1:
                p, n = cosine_gap(out.views[a].h_T.data, out.views[b].h_T.data)
                pos.append(p)
                neg.append(n)
    return {"positive": float(np.mean(pos)), "negative": float(np.mean(neg)),
            "gap": float(np.mean(pos) - np.mean(neg))}


def export_static_segment_embeddings(model: TrajViewsModel, items: list[SampleArrays],
                                     batch_size: int = 64) -> dict[int, np.ndarray]:
    """Per segment, the mean fused route token over every occurrence in ``items``."""
    d = model.config.d
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    unk = model.vocab.unk_segment
    for batch, out in forward_items(model, items, batch_size=batch_size):
        vecs, segs = route_token_vectors(out, batch)
        for v, s in zip(vecs.astype(np.float64), segs.tolist()):
            if s == unk:
                continue
            if s not in sums:
                sums[s] = np.zeros(d)
                counts[s] = 0
            sums[s] += v
            counts[s] += 1
    return {s: sums[s] / counts[s] for s in sorted(sums)}


@dataclass
class TrajectoryTable:
    ids: list[int]
    vectors: np.ndarray
    labels: list[int] = field(default_factory=list)  # destination cells in truncated mode
    skipped: int = 0


def export_trajectory_embeddings(model: TrajViewsModel, data: PreparedData, samples: list[Sample],
                                 mode: str = "full", batch_size: int = 64) -> TrajectoryTable:
    """Concatenated fused trajectory tokens per sample, with the input prepared per ``mode``."""
    if mode not in EXPORT_MODES:
        raise ValueError(f"unknown export mode {mode!r}; expected one of {EXPORT_MODES}")
    labels, skipped = [], 0
    if mode == "destination_truncated":
        cut = []
        for s in samples:
            res = truncate_for_destination(s)
            if res is None:
                skipped += 1
                continue
            cut.append(res[0])
            labels.append(res[1])
        samples = cut
    items = data.featurize(samples)
    vecs = [out.trajectory_embedding() for _, out in
            forward_items(model, items, time_unknown=(mode == "time_masked"), batch_size=batch_size)]
    width = model.trajectory_width()
    matrix = np.concatenate(vecs, axis=0) if vecs else np.zeros((0, width), np.float32)
    return TrajectoryTable([s.id for s in samples], matrix, labels, skipped)
