"""Frozen-feature probes, metrics, the random-feature control and the pretrain-vs-scratch harness."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .batching import collate, length_grouped_batches
from .city import ROAD_TYPES
from .engine import MLP, AdamW, ParamStore, Tape, Tensor, ops as F
from .pipeline import (
    PreparedData,
    TrainConfig,
    build_model,
    export_static_segment_embeddings,
    export_trajectory_embeddings,
    pretrain,
)

log = logging.getLogger(__name__)

TASKS = ("road_label", "road_speed", "travel_time", "destination_grid")


# ------------------------------------------------------------------ metrics

def _check(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if len(y_true) == 0:
        raise ValueError("metrics need at least one sample")
    if y_true.shape[0] != y_pred.shape[0]:
        raise ValueError(f"length mismatch: {len(y_true)} truths vs {len(y_pred)} predictions")
    return y_true, y_pred


def _confusion_counts(y_true, y_pred, classes):
    tp = np.array([np.sum((y_pred == c) & (y_true == c)) for c in classes], dtype=float)
    fp = np.array([np.sum((y_pred == c) & (y_true != c)) for c in classes], dtype=float)
    fn = np.array([np.sum((y_pred != c) & (y_true == c)) for c in classes], dtype=float)
    return tp, fp, fn


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros_like(tp, dtype=float), where=denom > 0)


def micro_f1(y_true, y_pred) -> float:
    y_true, y_pred = _check(y_true, y_pred)
    classes = np.union1d(y_true, y_pred)
    tp, fp, fn = _confusion_counts(y_true, y_pred, classes)
    return float(_f1(tp.sum(), fp.sum(), fn.sum()))


def macro_f1(y_true, y_pred, classes=None) -> float:
    """Unweighted mean of per-class F1; by default over classes seen in truth or predictions."""
    y_true, y_pred = _check(y_true, y_pred)
    classes = np.union1d(y_true, y_pred) if classes is None else np.asarray(classes)
    return float(_f1(*_confusion_counts(y_true, y_pred, classes)).mean())


def mae(y_true, y_pred) -> float:
    y_true, y_pred = _check(y_true, y_pred)
    return float(np.mean(np.abs(y_true.astype(float) - y_pred)))


def rmse(y_true, y_pred) -> float:
    y_true, y_pred = _check(y_true, y_pred)
    return float(np.sqrt(np.mean((y_true.astype(float) - y_pred) ** 2)))


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest scores per row, best first (ties broken by lower index)."""
    scores = np.asarray(scores)
    if k > scores.shape[1]:
        raise ValueError(f"k={k} exceeds the {scores.shape[1]} candidates")
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def acc_at_k(y_true, ranked, k: int) -> float:
    """Fraction of rows whose truth appears among the first k ranked candidates."""
    y_true, ranked = _check(y_true, ranked)
    if k > ranked.shape[1]:
        raise ValueError(f"k={k} exceeds the {ranked.shape[1]} ranked candidates")
    return float(np.mean([t in row[:k] for t, row in zip(y_true, ranked)]))


# ------------------------------------------------------------------ probe heads

@dataclass
class ProbeConfig:
    hidden: int = 64
    epochs: int = 50
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 64


class Probe:
    """Two-layer MLP trained on fixed feature vectors (standardised with train statistics)."""

    def __init__(self, d_in: int, d_out: int, seed: int, config: ProbeConfig | None = None):
        self.config = config or ProbeConfig()
        self.store = ParamStore(seed, np.float32)
        self.mlp = MLP(self.store, "probe", d_in, self.config.hidden, d_out)
        self.seed = seed
        self.steps = 0

    def _scale(self, X: np.ndarray) -> np.ndarray:
        return ((X - self.mu) / self.sigma).astype(np.float32)

    def fit(self, X: np.ndarray, y: np.ndarray, kind: str) -> "Probe":
        X = np.asarray(X, dtype=np.float64)
        self.mu, self.sigma = X.mean(axis=0), X.std(axis=0) + 1e-8
        self.kind = kind
        if kind == "regression":
            y = np.asarray(y, dtype=np.float64)
            self.y_mu, self.y_sigma = y.mean(), y.std() + 1e-8
            target = ((y - self.y_mu) / self.y_sigma).astype(np.float32)[:, None]
        else:
            target = np.asarray(y, dtype=np.int64)
        Xs = self._scale(X)
        opt = AdamW(self.store, lr=self.config.lr, weight_decay=self.config.weight_decay)
        rng = np.random.default_rng(self.seed)
        bs = self.config.batch_size
        for _ in range(self.config.epochs):
            order = rng.permutation(len(Xs))
            for k in range(0, len(order), bs):
                idx = order[k:k + bs]
                with Tape() as tape:
                    out = self.mlp(Tensor(Xs[idx]))
                    loss = F.mse(out, target[idx]) if kind == "regression" else F.cross_entropy(out, target[idx])
                opt.zero_grad()
                tape.backward(loss)
                opt.step()
                self.steps += 1
        return self

    def decision(self, X: np.ndarray) -> np.ndarray:
        return self.mlp(Tensor(self._scale(np.asarray(X, dtype=np.float64)))).data

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = self.decision(X)
        if self.kind == "regression":
            return out[:, 0].astype(np.float64) * self.y_sigma + self.y_mu
        return np.argmax(out, axis=1)


# ------------------------------------------------------------------ tasks

@dataclass
class TaskResult:
    metrics: dict
    ids: list
    truth: list
    prediction: list
    notes: dict = field(default_factory=dict)


def segment_split(keys: list[int], seed: int, train_fraction: float = 0.8) -> tuple[list[int], list[int]]:
    order = np.random.default_rng(seed).permutation(len(keys))
    n = int(round(train_fraction * len(keys)))
    return [keys[i] for i in order[:n]], [keys[i] for i in order[n:]]


def probe_road_label(static: dict[int, np.ndarray], network, seed: int,
                     config: ProbeConfig | None = None) -> TaskResult:
    labels = {s.id: ROAD_TYPES.index(s.road_type) for s in network.segments}
    train, test = segment_split(sorted(static), seed)
    missing = sorted(set(range(len(ROAD_TYPES))) - {labels[s] for s in train})
    if missing:
        log.warning("road classes %s absent from the probe train split", missing)
    probe = Probe(len(next(iter(static.values()))), len(ROAD_TYPES), seed, config)
    probe.fit(np.stack([static[s] for s in train]), np.array([labels[s] for s in train]), "classification")
    y = np.array([labels[s] for s in test])
    pred = probe.predict(np.stack([static[s] for s in test]))
    return TaskResult({"micro_f1": micro_f1(y, pred), "macro_f1": macro_f1(y, pred),
                       "n_train": len(train), "n_test": len(test)},
                      test, y.tolist(), pred.tolist(), {"absent_train_classes": missing})


def segment_mean_speeds(samples) -> dict[int, float]:
    """Ground-truth mean realised speed per segment over the simulator's traversals."""
    acc: dict[int, list[float]] = {}
    for s in samples:
        if s.gps.truth is None:
            continue
        for seg, v in zip(s.gps.truth.segments, s.gps.truth.speeds):
            acc.setdefault(seg, []).append(v)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def probe_road_speed(static: dict[int, np.ndarray], speeds: dict[int, float], seed: int,
                     config: ProbeConfig | None = None) -> TaskResult:
    keys = sorted(set(static) & set(speeds))
    train, test = segment_split(keys, seed)
    probe = Probe(len(static[keys[0]]), 1, seed, config)
    probe.fit(np.stack([static[s] for s in train]), np.array([speeds[s] for s in train]), "regression")
    y = np.array([speeds[s] for s in test])
    pred = probe.predict(np.stack([static[s] for s in test]))
    return TaskResult({"mae": mae(y, pred), "rmse": rmse(y, pred), "n_train": len(train), "n_test": len(test)},
                      test, y.tolist(), pred.tolist())


def probe_travel_time(X_train, y_train, X_test, y_test, ids_test, seed: int,
                      config: ProbeConfig | None = None) -> TaskResult:
    probe = Probe(X_train.shape[1], 1, seed, config).fit(X_train, y_train, "regression")
    pred = probe.predict(X_test)
    y = np.asarray(y_test, dtype=float)
    return TaskResult({"mae": mae(y, pred), "rmse": rmse(y, pred), "n_train": len(y_train), "n_test": len(y)},
                      list(ids_test), y.tolist(), pred.tolist(), {"probe_steps": probe.steps})


def probe_destination(X_train, y_train, X_test, y_test, ids_test, n_cells: int, seed: int,
                      config: ProbeConfig | None = None) -> TaskResult:
    y_train, y_test = np.asarray(y_train), np.asarray(y_test)
    ok_tr, ok_te = (y_train >= 0) & (y_train < n_cells), (y_test >= 0) & (y_test < n_cells)
    excluded = int((~ok_tr).sum() + (~ok_te).sum())
    probe = Probe(X_train.shape[1], n_cells, seed, config).fit(X_train[ok_tr], y_train[ok_tr], "classification")
    ranked = top_k(probe.decision(X_test[ok_te]), 5)
    y = y_test[ok_te]
    majority = int(np.bincount(y_train[ok_tr], minlength=n_cells).argmax())
    return TaskResult({"acc@1": acc_at_k(y, ranked, 1), "acc@5": acc_at_k(y, ranked, 5),
                       "majority_acc@1": float(np.mean(y == majority)),
                       "n_train": int(ok_tr.sum()), "n_test": int(ok_te.sum()), "excluded": excluded},
                      [i for i, k in zip(ids_test, ok_te) if k], y.tolist(), ranked[:, 0].tolist())


# ------------------------------------------------------------------ feature tables

@dataclass
class FeatureTables:
    """Everything the probes read: static segment vectors and trajectory vectors per split/mode."""

    static: dict[int, np.ndarray]
    time_train: np.ndarray
    time_eval: np.ndarray
    dest_train: np.ndarray
    dest_eval: np.ndarray
    dest_train_labels: list[int]
    dest_eval_labels: list[int]
    time_eval_ids: list[int]
    dest_eval_ids: list[int]
    skipped: int = 0


def export_tables(model, data: PreparedData, eval_split: str = "test") -> FeatureTables:
    static = export_static_segment_embeddings(model, data.items("train"))
    tt_tr = export_trajectory_embeddings(model, data, data.train, "time_masked")
    tt_ev = export_trajectory_embeddings(model, data, data.split(eval_split), "time_masked")
    de_tr = export_trajectory_embeddings(model, data, data.train, "destination_truncated")
    de_ev = export_trajectory_embeddings(model, data, data.split(eval_split), "destination_truncated")
    return FeatureTables(static, tt_tr.vectors, tt_ev.vectors, de_tr.vectors, de_ev.vectors,
                         de_tr.labels, de_ev.labels, tt_ev.ids, de_ev.ids, de_tr.skipped + de_ev.skipped)


def random_control(tables: FeatureTables, seed: int) -> FeatureTables:
    """Seeded Gaussian features with the same keys and widths as ``tables``."""
    rng = np.random.default_rng(seed)
    width = len(next(iter(tables.static.values())))
    static = {k: rng.standard_normal(width) for k in sorted(tables.static)}
    g = lambda a: rng.standard_normal(a.shape).astype(np.float32)  # noqa: E731
    return FeatureTables(static, g(tables.time_train), g(tables.time_eval), g(tables.dest_train),
                         g(tables.dest_eval), tables.dest_train_labels, tables.dest_eval_labels,
                         tables.time_eval_ids, tables.dest_eval_ids, tables.skipped)


def travel_times(samples) -> np.ndarray:
    return np.array([s.gps.truth.travel_time for s in samples], dtype=float)


def run_probes(tables: FeatureTables, data: PreparedData, seed: int, config: ProbeConfig | None = None,
               eval_split: str = "test", tasks=TASKS) -> dict[str, TaskResult]:
    out = {}
    if "road_label" in tasks:
        out["road_label"] = probe_road_label(tables.static, data.network, seed, config)
    if "road_speed" in tasks:
        out["road_speed"] = probe_road_speed(tables.static, segment_mean_speeds(data.samples), seed, config)
    if "travel_time" in tasks:
        out["travel_time"] = probe_travel_time(
            tables.time_train, travel_times(data.train), tables.time_eval,
            travel_times(data.split(eval_split)), tables.time_eval_ids, seed, config)
    if "destination_grid" in tasks:
        out["destination_grid"] = probe_destination(
            tables.dest_train, tables.dest_train_labels, tables.dest_eval, tables.dest_eval_labels,
            tables.dest_eval_ids, data.vocab.n_cells, seed, config)
    return out


def metric_table(results: dict[str, TaskResult]) -> dict[str, dict]:
    return {task: dict(r.metrics) for task, r in results.items()}


def evaluate(model, data: PreparedData, seed: int, config: ProbeConfig | None = None,
             eval_split: str = "test", tasks=TASKS) -> dict:
    """Probe the model's frozen features and the random control with identical probe seeds."""
    tables = export_tables(model, data, eval_split)
    learned = run_probes(tables, data, seed, config, eval_split, tasks)
    control = run_probes(random_control(tables, seed), data, seed, config, eval_split, tasks)
    return {"learned": learned, "control": control, "skipped_truncations": tables.skipped}


def build_report(evaluation: dict, seed: int) -> dict:
    learned, control = metric_table(evaluation["learned"]), metric_table(evaluation["control"])
    delta = {task: {k: learned[task][k] - control[task][k] for k in learned[task] if not k.startswith("n_")
                    and k != "excluded"} for task in learned}
    return {"seed": seed, "tasks": learned, "random_control": control, "delta_vs_control": delta,
            "skipped_truncations": evaluation["skipped_truncations"]}


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))


def write_predictions(results: dict[str, TaskResult], path, source: str = "learned") -> None:
    new = not Path(path).exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(["source", "task", "id", "truth", "prediction"])
        for task, r in results.items():
            for i, t, p in zip(r.ids, r.truth, r.prediction):
                w.writerow([source, task, i, t, p])


# ------------------------------------------------------------------ pretrain vs scratch

def scratch_travel_time(config: TrainConfig, data: PreparedData, steps: int, eval_split: str = "val",
                        hidden: int = 64) -> dict:
    """Backbone and regression head trained jointly from initialisation on time-masked inputs."""
    model = build_model(config, data)
    head = MLP(model.store, "scratch.head", model.trajectory_width(), hidden, 1)
    opt = AdamW(model.store, lr=config.lr, weight_decay=config.weight_decay)
    items = data.items("train")
    y = travel_times(data.train)
    mu, sigma = y.mean(), y.std() + 1e-8
    target = {it.id: (t - mu) / sigma for it, t in zip(items, y)}
    rng = np.random.default_rng(config.seed)
    done = 0
    while done < steps:
        for chunk in length_grouped_batches(items, config.batch_size, rng):
            if done >= steps:
                break
            batch = collate(chunk, time_unknown=True)
            with Tape() as tape:
                out = model.forward(batch)
                feats = F.concat([F.getitem(out.fused[m], (slice(None), 0)) for m in model.modalities], axis=1)
                loss = F.mse(head(feats), np.array([[target[i]] for i in batch.ids], dtype=np.float32))
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            done += 1
    preds = []
    ev = data.items(eval_split)
    for k in range(0, len(ev), 64):
        batch = collate(ev[k:k + 64], time_unknown=True)
        out = model.forward(batch)
        feats = np.concatenate([out.fused[m].data[:, 0] for m in model.modalities], axis=1)
        preds.append(head(Tensor(feats)).data[:, 0] * sigma + mu)
    truth = travel_times(data.split(eval_split))
    pred = np.concatenate(preds)
    return {"mae": mae(truth, pred), "rmse": rmse(truth, pred), "steps": done}


def pretrain_vs_scratch(config: TrainConfig, data: PreparedData, probe: ProbeConfig | None = None,
                        pretrained=None) -> dict:
    """Validation travel-time MAE of pretrain-then-frozen-probe vs end-to-end from scratch at equal steps."""
    result = pretrained if pretrained is not None else pretrain(config, data)
    model = result.model
    tt_tr = export_trajectory_embeddings(model, data, data.train, "time_masked")
    tt_va = export_trajectory_embeddings(model, data, data.val, "time_masked")
    frozen = probe_travel_time(tt_tr.vectors, travel_times(data.train), tt_va.vectors,
                               travel_times(data.val), tt_va.ids, config.seed, probe)
    total = result.steps + frozen.notes["probe_steps"]
    scratch = scratch_travel_time(config.replace(pretrain=False), data, total)
    return {"pretrained_mae": frozen.metrics["mae"], "scratch_mae": scratch["mae"],
            "pretrain_steps": result.steps, "probe_steps": frozen.notes["probe_steps"],
            "scratch_steps": scratch["steps"]}
