import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajviews.engine import Tape, Tensor, grad_check
from trajviews.objectives import (
    LossConfig,
    align_loss,
    make_mask,
    mask_runs,
    mlm_loss,
    pair_loss,
    span_start_rate,
    total_loss,
)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def pair_oracle(hi, hj, tau):
    """Coordinate-wise cosines, exponentials and log ratio."""
    n = len(hi)
    total = 0.0
    for a in range(n):
        def cos(u, v):
            return sum(x * y for x, y in zip(u, v)) / (math.sqrt(sum(x * x for x in u)) * math.sqrt(sum(y * y for y in v)))
        num = math.exp(cos(hi[a], hj[a]) / tau)
        den = sum(math.exp(cos(hi[a], hj[b]) / tau) for b in range(n))
        total += -math.log(num / den)
    return total / n


# ------------------------------------------------------------------ pair/align

def test_pair_loss_uniform_is_log_batch():
    h = t64(np.ones((64, 8)))
    assert abs(float(pair_loss(h, h).data) - 4.158883083359672) < 1e-9


def test_pair_loss_single_pair_is_zero():
    h = t64(np.random.default_rng(0).normal(size=(1, 5)))
    assert abs(float(pair_loss(h, h).data)) < 1e-12


def test_pair_loss_two_pairs_matches_oracle():
    hi = [[1.0, 0.5, -0.2], [0.3, -1.0, 0.8]]
    hj = [[0.9, 0.1, 0.0], [-0.4, -0.7, 1.1]]
    got = float(pair_loss(t64(hi), t64(hj), 0.07).data)
    assert abs(got - pair_oracle(hi, hj, 0.07)) < 1e-9


def test_pair_loss_rejects_mismatched_batches():
    with pytest.raises(ValueError):
        pair_loss(t64(np.ones((3, 2))), t64(np.ones((2, 2))))


def test_align_identical_views_is_three_log_batch():
    h = t64(np.ones((16, 4)))
    views = {m: h for m in ("r", "p|r", "g", "p|g")}
    assert abs(float(align_loss(views).data) - 3 * math.log(16)) < 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_align_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    views = {m: rng.normal(size=(6, 5)) for m in ("r", "p|r", "g", "p|g")}
    a = float(align_loss({m: t64(v) for m, v in views.items()}).data)
    b = float(align_loss({m: t64(v * scale) for m, v in views.items()}).data)
    assert abs(a - b) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_pair_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    assert float(pair_loss(t64(rng.normal(size=(5, 3))), t64(rng.normal(size=(5, 3)))).data) >= 0


def test_pair_loss_decreases_as_positive_similarity_rises():
    # anchor 0's positive rotates towards it; every other similarity only shrinks
    losses = []
    for theta in np.linspace(np.pi / 2, 0.0, 7):
        hi = [[1.0, 0.0], [0.0, 1.0]]
        hj = [[np.cos(theta), np.sin(theta)], [0.0, 1.0]]
        losses.append(float(pair_loss(t64(hi), t64(hj)).data))
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_only_the_three_pairs_contribute():
    # r and g each appear in exactly one pair, so their gradient equals that single term's
    rng = np.random.default_rng(2)
    raw = {m: rng.normal(size=(4, 3)) for m in ("r", "p|r", "g", "p|g")}

    def grad_of(build, wrt):
        views = {m: t64(v, grad=True) for m, v in raw.items()}
        with Tape() as tape:
            loss = build(views)
        tape.backward(loss)
        return views[wrt].grad

    full_r = grad_of(align_loss, "r")
    only_r = grad_of(lambda v: pair_loss(v["r"], v["p|r"]), "r")
    full_g = grad_of(align_loss, "g")
    only_g = grad_of(lambda v: pair_loss(v["g"], v["p|g"]), "g")
    np.testing.assert_allclose(full_r, only_r, atol=1e-14)
    np.testing.assert_allclose(full_g, only_g, atol=1e-14)


def test_align_loss_gradient_check():
    rng = np.random.default_rng(3)
    inputs = [t64(rng.normal(size=(3, 4)), grad=True) for _ in range(4)]
    fn = lambda a, b, c, d: align_loss({"r": a, "p|r": b, "g": c, "p|g": d}, tau=0.5)  # noqa: E731
    assert grad_check(fn, inputs) < 1e-4


def test_symmetric_variant_averages_directions():
    rng = np.random.default_rng(4)
    a, b = t64(rng.normal(size=(5, 3))), t64(rng.normal(size=(5, 3)))
    sym = float(align_loss({"r": a, "p|r": b}, symmetric=True).data)
    expected = 0.5 * (float(pair_loss(a, b).data) + float(pair_loss(b, a).data))
    assert abs(sym - expected) < 1e-12


# ------------------------------------------------------------------ masking

def test_zero_probability_masks_nothing():
    assert not make_mask(30, 0.0, 2, seed=1).any()


def test_length_one_span_clips():
    hits = [make_mask(1, 0.9, 2, seed=s) for s in range(50)]
    assert all(m.shape == (1,) for m in hits) and any(m[0] for m in hits)


def test_mask_deterministic_in_seed():
    assert np.array_equal(make_mask(40, 0.2, 2, seed=7), make_mask(40, 0.2, 2, seed=7))


def test_masked_fraction_monte_carlo():
    rng = np.random.default_rng(0)
    frac = np.mean([make_mask(50, 0.2, 2, rng).mean() for _ in range(10_000)])
    assert 0.18 <= frac <= 0.22


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 80), st.floats(0.0, 0.45), st.integers(1, 4), st.integers(0, 2**31))
def test_masked_runs_never_exceed_span(n, p, span, seed):
    m = make_mask(n, p, span, seed)
    assert m.shape == (n,)
    assert all(r <= span for r in mask_runs(m))


def test_start_rate_targets_fraction():
    q = span_start_rate(0.2, 2)
    s = 2
    assert abs(q * s / (1 + q * s) - 0.2) < 1e-12


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(tau=0)
    with pytest.raises(ValueError):
        LossConfig(mask_prob=1.0)
    with pytest.raises(ValueError):
        LossConfig(w1=-1)


# ------------------------------------------------------------------ mlm / total

def test_mlm_confident_logits_near_zero():
    logits = np.zeros((3, 5))
    targets = np.array([1, 4, 0])
    logits[np.arange(3), targets] = 50.0
    assert float(mlm_loss({"r": (t64(logits), targets)}).data) < 1e-6


def test_mlm_uniform_logits_is_log_vocab():
    out = mlm_loss({"g": (t64(np.zeros((4, 7))), np.array([0, 1, 2, 6]))})
    assert abs(float(out.data) - math.log(7)) < 1e-9


def test_mlm_hand_built_case():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
    targets = np.array([0, 2])
    expected = np.mean([-(logits[i, t] - np.log(np.exp(logits[i]).sum())) for i, t in enumerate(targets)])
    assert abs(float(mlm_loss({"r": (t64(logits), targets)}).data) - expected) < 1e-12


def test_mlm_sums_streams_and_skips_empty():
    a = (t64(np.zeros((2, 3))), np.array([0, 1]))
    empty = (t64(np.zeros((0, 3))), np.array([], dtype=int))
    got = float(mlm_loss({"r": a, "p|r": a, "g": empty}).data)
    assert abs(got - 2 * math.log(3)) < 1e-6


def test_total_loss_arithmetic():
    assert float(total_loss(t64(1.5), t64(0.5), 2, 1).data) == 3.5


def test_total_loss_gradient_is_linear():
    rng = np.random.default_rng(5)
    x = t64(rng.normal(size=(4, 3)), grad=True)
    y = t64(rng.normal(size=(4, 3)))
    logits_w = t64(rng.normal(size=(3, 5)), grad=True)
    targets = np.array([0, 1, 4, 2])

    def grads(w1, w2):
        x.grad = logits_w.grad = None
        with Tape() as tape:
            la = align_loss({"r": x, "p|r": y})
            lm = mlm_loss({"r": (x @ logits_w, targets)})
            loss = total_loss(la, lm, w1, w2)
        tape.backward(loss)
        return x.grad.copy(), logits_w.grad.copy()

    ga, _ = grads(1.0, 0.0)
    gm, gmw = grads(0.0, 1.0)
    gt, gtw = grads(2.0, 1.0)
    np.testing.assert_allclose(gt, 2 * ga + gm, atol=1e-12)
    np.testing.assert_allclose(gtw, gmw, atol=1e-12)
