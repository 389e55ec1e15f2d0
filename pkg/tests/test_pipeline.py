import numpy as np
import pytest

from trajviews.batching import collate
from trajviews.engine import Tape
from trajviews.pipeline import (
    TrainConfig,
    alignment_gap,
    build_model,
    compute_losses,
    config_to_text,
    cosine_gap,
    export_static_segment_embeddings,
    export_trajectory_embeddings,
    load_config,
    load_model,
    load_prepared,
    parse_config_text,
    pretrain,
    sample_masks,
    save_model,
    save_prepared,
    write_metrics,
)
from trajviews.views import truncate_for_destination


# ------------------------------------------------------------------ config

def test_config_text_round_trip():
    cfg = TrainConfig(epochs=3, lr=5e-4, no_mlm_loss=True)
    assert TrainConfig.from_dict(parse_config_text(config_to_text(cfg))) == cfg


def test_config_file_then_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# desk profile\nepochs = 4\nbatch_size=8\nno_grid_view = yes\n")
    cfg = load_config(p, epochs=9, lr=None)
    assert (cfg.epochs, cfg.batch_size, cfg.no_grid_view, cfg.lr) == (9, 8, True, 1e-3)


@pytest.mark.parametrize("text", ["epochs 3", "colour = red", "no_grid_view = maybe"])
def test_config_rejects_bad_lines(text):
    with pytest.raises((ValueError, KeyError)):
        parse_config_text(text)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_ablation_flags_zero_weights():
    lc = TrainConfig(no_align_loss=True, no_mlm_loss=True).loss_config()
    assert (lc.w1, lc.w2) == (0.0, 0.0)
    assert TrainConfig().loss_config().w1 == 2.0


# ------------------------------------------------------------------ training

def test_masks_independent_of_batching(tiny_config, tiny_data):
    items = tiny_data.items("train")
    a = sample_masks(items[:6], tiny_config, epoch=3)
    b = sample_masks(items[4:6], tiny_config, epoch=3)
    for stream in a:
        assert all(np.array_equal(x, y) for x, y in zip(a[stream][4:6], b[stream]))


def test_zero_learning_rate_keeps_parameters(tiny_config, tiny_data):
    cfg = tiny_config.replace(lr=0.0, epochs=1)
    res = pretrain(cfg, tiny_data)
    fresh = build_model(cfg, tiny_data)
    for name, t in fresh.store.tensors.items():
        assert np.array_equal(t.data, res.model.store[name].data), name


def test_no_align_loss_cuts_alignment_gradient(tiny_config, tiny_data):
    items = tiny_data.items("train")[:8]
    batch = collate(items, sample_masks(items, tiny_config, 1))
    model = build_model(tiny_config, tiny_data)

    def grads(cfg):
        model.store.zero_grad()
        with Tape() as tape:
            parts = compute_losses(model, batch, cfg.loss_config())
        tape.backward(parts.total)
        return parts, {k: (None if t.grad is None else t.grad.copy()) for k, t in model.store.tensors.items()}

    parts, g_no_align = grads(tiny_config.replace(no_align_loss=True, w2=1.0))
    assert float(parts.align.data) > 0  # still computed for logging
    model.store.zero_grad()
    with Tape() as tape:
        p2 = compute_losses(model, batch, tiny_config.replace(w1=0.0, w2=1.0).loss_config())
    tape.backward(p2.total)
    mlm_only = {k: t.grad for k, t in model.store.tensors.items()}
    for k in g_no_align:
        a, b = g_no_align[k], mlm_only[k]
        assert (a is None and b is None) or np.array_equal(a, b), k


def test_no_mlm_loss_gives_heads_no_gradient(tiny_config, tiny_data):
    items = tiny_data.items("train")[:8]
    batch = collate(items, sample_masks(items, tiny_config, 1))
    model = build_model(tiny_config, tiny_data)
    with Tape() as tape:
        parts = compute_losses(model, batch, tiny_config.replace(no_mlm_loss=True).loss_config())
    tape.backward(parts.total)
    for name in ("mlm.segment.W", "mlm.cell.W"):
        g = model.store[name].grad
        assert g is None or not g.any()
    assert model.store["route.segments"].grad is not None


def test_loss_decreases_and_logs(tiny_run, tmp_path):
    means = tiny_run.epoch_means()
    assert len(means) == 2 and means[1] < means[0]
    kinds = [r["kind"] for r in tiny_run.metrics]
    assert kinds.count("epoch") == 2 and kinds.count("step") == tiny_run.steps
    write_metrics(tiny_run.metrics, tmp_path / "m.csv")
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == "kind,step,epoch,L_align,L_MLM,L,val_L"


def test_training_is_reproducible(tiny_config, tiny_data, tiny_run, tmp_path):
    again = pretrain(tiny_config, tiny_data)
    write_metrics(tiny_run.metrics, tmp_path / "a.csv")
    write_metrics(again.metrics, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_checkpoint_round_trip_bit_exact(tiny_run, tiny_data, tmp_path):
    save_model(tmp_path / "m.ckpt", tiny_run, tiny_data)
    model, meta = load_model(tmp_path / "m.ckpt", tiny_data.network)
    batch = collate(tiny_data.items("val"))
    a = tiny_run.model.forward(batch).trajectory_embedding()
    b = model.forward(batch).trajectory_embedding()
    assert a.dtype == np.float32 and np.array_equal(a, b)
    assert meta["epoch"] == tiny_run.best_epoch
    assert meta["vocab"]["segments"] == tiny_data.vocab.segments
    m1, m2 = meta["moments"]
    assert set(m1) == set(tiny_run.optimizer.state.m)


def test_prepared_data_round_trip(tiny_data, tmp_path):
    from trajviews.city import write_network

    write_network(tiny_data.network, tmp_path / "network.json")
    save_prepared(tiny_data, tmp_path)
    back = load_prepared(tmp_path)
    assert [s.id for s in back.train] == [s.id for s in tiny_data.train]
    assert back.vocab.segments == tiny_data.vocab.segments
    assert back.stats == tiny_data.stats


# ------------------------------------------------------------------ export

def test_static_table_keys_and_single_occurrence(tiny_run, tiny_data):
    model = tiny_run.model
    items = tiny_data.items("train")
    table = export_static_segment_embeddings(model, items)
    assert set(table) == {s for it in items for s in it.seg.tolist()}
    counts = {}
    for it in items:
        for s in it.seg.tolist():
            counts[s] = counts.get(s, 0) + 1
    once = next(s for s, c in counts.items() if c == 1)
    owner = next(it for it in items if once in it.seg.tolist())
    out = model.forward(collate([owner]))
    pos = owner.seg.tolist().index(once)
    np.testing.assert_allclose(table[once], out.fused["r"].data[0, 1 + pos], atol=1e-6)


def test_static_table_order_independent(tiny_run, tiny_data):
    items = tiny_data.items("train")
    a = export_static_segment_embeddings(tiny_run.model, items)
    shuffled = [items[i] for i in np.random.default_rng(0).permutation(len(items))]
    b = export_static_segment_embeddings(tiny_run.model, shuffled, batch_size=7)
    assert set(a) == set(b)
    for k in a:
        np.testing.assert_allclose(a[k], b[k], atol=1e-6)


def test_trajectory_width(tiny_run, tiny_data):
    tab = export_trajectory_embeddings(tiny_run.model, tiny_data, tiny_data.val, "full")
    assert tab.vectors.shape == (len(tiny_data.val), 4 * 16)


def test_time_masked_invariant_to_time_shift(tiny_run, tiny_data):
    from dataclasses import replace

    from trajviews.city import GpsPoint, GpsTrajectory
    from trajviews.views import GridEntry, GridTrajectory, RouteEntry, RouteTrajectory

    def shift(s, dt):
        gps = GpsTrajectory(s.gps.id, [GpsPoint(p.lat, p.lon, p.t + dt) for p in s.gps.points], s.gps.truth)
        route = RouteTrajectory([RouteEntry(e.segment, e.t + dt) for e in s.route.entries], s.route.low_confidence)
        grid = GridTrajectory([GridEntry(e.cell, e.sem, e.t + dt, e.empty) for e in s.grid.entries])
        return replace(s, gps=gps, route=route, grid=grid)

    samples = tiny_data.val
    a = export_trajectory_embeddings(tiny_run.model, tiny_data, samples, "time_masked").vectors
    b = export_trajectory_embeddings(tiny_run.model, tiny_data, [shift(s, 3 * 3600 + 17) for s in samples],
                                     "time_masked").vectors
    np.testing.assert_array_equal(a, b)


def test_destination_truncated_labels(tiny_run, tiny_data):
    samples = tiny_data.test
    tab = export_trajectory_embeddings(tiny_run.model, tiny_data, samples, "destination_truncated")
    expected = [r for r in map(truncate_for_destination, samples) if r is not None]
    assert tab.labels == [lab for _, lab in expected]
    assert tab.skipped == len(samples) - len(expected)
    assert tab.vectors.shape[0] == len(expected)


def test_unknown_export_mode(tiny_run, tiny_data):
    with pytest.raises(ValueError):
        export_trajectory_embeddings(tiny_run.model, tiny_data, tiny_data.val, "sideways")


def test_cosine_gap_oracle():
    a = np.array([[1.0, 0.0], [0.0, 2.0]])
    b = np.array([[3.0, 0.0], [1.0, 1.0]])
    pos, neg = cosine_gap(a, b)
    assert pos == pytest.approx((1.0 + 1 / np.sqrt(2)) / 2)
    assert neg == pytest.approx((1 / np.sqrt(2) + 0.0) / 2)


def test_alignment_gap_of_trained_model_is_finite(tiny_run, tiny_data):
    gap = alignment_gap(tiny_run.model, tiny_data.items("val"))
    assert np.isfinite(gap["gap"]) and gap["gap"] == pytest.approx(gap["positive"] - gap["negative"])
