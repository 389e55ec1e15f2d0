import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trajviews.engine import (
    AdamW,
    AdamWState,
    BiGRU,
    GATLayer,
    MultiHeadAttention,
    ParamStore,
    Tape,
    Tensor,
    TransformerStack,
    adamw_step,
    grad_check,
    load_checkpoint,
    ops as F,
    save_checkpoint,
)

TOL = 1e-4


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def readout(rng, shape):
    """Random linear readout so that no gradient coordinate is structurally tiny."""
    R = rng.normal(size=shape)
    return lambda y: F.sum(F.mul(y, R))


# ------------------------------------------------------------------- forward identities

def test_softmax_constant_vector_is_uniform():
    p = F.softmax(t64(np.full(7, 3.3))).data
    np.testing.assert_allclose(p, np.full(7, 1 / 7), rtol=0, atol=1e-15)


def test_softmax_rows_sum_to_one(rng):
    p = F.softmax(t64(rng.normal(size=(5, 9)) * 10), axis=1).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_masked_softmax_zeroes_masked_entries(rng):
    mask = np.array([[True, False, True, True]])
    p = F.softmax(t64(rng.normal(size=(1, 4))), mask=mask).data
    assert p[0, 1] == 0.0
    assert abs(p.sum() - 1.0) < 1e-12


def test_embedding_lookup_returns_exact_row(rng):
    table = t64(rng.normal(size=(6, 4)))
    np.testing.assert_array_equal(F.embedding_lookup(table, [4]).data[0], table.data[4])


def test_gather_rows_pad_index_gives_zero_row(rng):
    table = t64(rng.normal(size=(3, 2)))
    out = F.gather_rows(table, [[0, -1]]).data
    np.testing.assert_array_equal(out[0, 1], [0.0, 0.0])


def test_layer_norm_standardises_rows(rng):
    x = t64(rng.normal(3.0, 5.0, size=(4, 16)))
    y = F.layer_norm(x, t64(np.ones(16)), t64(np.zeros(16)), eps=0.0).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-12)


def test_linear_shape_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        F.linear(t64(np.zeros((2, 3))), t64(np.zeros((4, 5))))


def test_no_tape_means_no_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    y = F.mul(x, 2.0)
    assert not y.requires_grad


# ----------------------------------------------------------------------- grad checks

def test_grad_check_square_at_three():
    x = t64([3.0])
    with Tape() as tape:
        x.requires_grad = True
        y = F.sum(F.mul(x, x))
    tape.backward(y)
    assert abs(x.grad[0] - 6.0) < 1e-12
    from trajviews.engine.gradcheck import numeric_grads
    assert abs(numeric_grads(lambda v: F.sum(F.mul(v, v)), [t64([3.0])])[0][0] - 6.0) < 1e-6


def test_grad_check_affine_is_near_exact(rng):
    W = rng.normal(size=(4, 3))
    err = grad_check(lambda x: F.sum(F.matmul(x, W)), [t64(rng.normal(size=(2, 4)))])
    assert err < 1e-9


def test_grad_linear(rng):
    r = readout(rng, (5, 3))
    err = grad_check(lambda x, W, b: r(F.linear(x, W, b)),
                     [t64(rng.normal(size=(5, 4))), t64(rng.normal(size=(4, 3))), t64(rng.normal(size=3))])
    assert err < TOL


def test_grad_embedding(rng):
    r = readout(rng, (4, 3))
    err = grad_check(lambda tab: r(F.embedding_lookup(tab, [2, 0, 2, -1])), [t64(rng.normal(size=(3, 3)))])
    assert err < TOL


def test_grad_softmax_nll(rng):
    targets = np.array([1, 0, 3, 3])
    err = grad_check(lambda z: F.cross_entropy(z, targets), [t64(rng.normal(size=(4, 5)))])
    assert err < TOL


def test_grad_masked_softmax(rng):
    mask = rng.random((3, 6)) < 0.7
    mask[:, 0] = True
    r = readout(rng, (3, 6))
    err = grad_check(lambda z: r(F.softmax(z, axis=1, mask=mask)), [t64(rng.normal(size=(3, 6)))])
    assert err < TOL


def test_grad_layer_norm(rng):
    r = readout(rng, (3, 5))
    err = grad_check(lambda x, g, b: r(F.layer_norm(x, g, b)),
                     [t64(rng.normal(size=(3, 5))), t64(rng.normal(size=5)), t64(rng.normal(size=5))])
    assert err < TOL


@pytest.mark.parametrize("fn", [F.tanh, F.sigmoid, F.elu, F.gelu, F.exp])
def test_grad_elementwise(rng, fn):
    r = readout(rng, (4, 3))
    x = rng.normal(size=(4, 3))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the ELU kink
    assert grad_check(lambda v: r(fn(v)), [t64(x)]) < TOL


def test_grad_broadcast_arithmetic(rng):
    r = readout(rng, (2, 3, 4))
    err = grad_check(lambda a, b, c: r(F.div(F.mul(F.add(a, b), c), F.add(F.exp(b), 1.0))),
                     [t64(rng.normal(size=(2, 3, 4))), t64(rng.normal(size=(4,))), t64(rng.normal(size=(3, 1)))])
    assert err < TOL


def test_grad_masked_mean_and_concat(rng):
    mask = np.array([[1, 1, 0], [1, 0, 0]], bool)
    r = readout(rng, (2, 6))
    err = grad_check(lambda x, y: r(F.concat([F.masked_mean(x, mask), F.masked_mean(y, mask)], axis=-1)),
                     [t64(rng.normal(size=(2, 3, 3))), t64(rng.normal(size=(2, 3, 3)))])
    assert err < TOL


def test_grad_gru_length_five(rng):
    store = ParamStore(seed=3, dtype=np.float64)
    gru = BiGRU(store, "g", 3, 4)
    params = [t for _, t in store]
    x = t64(rng.normal(size=(2, 5, 3)))
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], bool)
    r = readout(rng, (2, 5, 8))

    def f(x, *ps):
        return r(gru(x, mask)[0])

    assert grad_check(f, [x, *params]) < TOL


def test_grad_gat_layer(rng):
    store = ParamStore(seed=4, dtype=np.float64)
    gat = GATLayer(store, "gat", 3, 4)
    A = np.array([[0, 1, 0, 0], [1, 0, 1, 1], [0, 1, 0, 0], [0, 1, 0, 0]], bool)
    r = readout(rng, (4, 4))
    g = t64(rng.normal(size=(4, 3)))
    assert grad_check(lambda g, W, a1, a2: r(gat(g, A)), [g, gat.W, gat.a_src, gat.a_dst]) < TOL


def test_grad_multi_head_attention(rng):
    store = ParamStore(seed=5, dtype=np.float64)
    mha = MultiHeadAttention(store, "mha", 8, 2)
    q = t64(rng.normal(size=(2, 3, 8)))
    kv = t64(rng.normal(size=(2, 4, 8)))
    key_mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], bool)
    r = readout(rng, (2, 3, 8))
    params = [t for _, t in store]
    assert grad_check(lambda q, kv, *ps: r(mha(q, kv, key_mask)), [q, kv, *params]) < TOL


def test_grad_transformer_depth_two(rng):
    store = ParamStore(seed=6, dtype=np.float64)
    stack = TransformerStack(store, "tf", 8, 2, depth=2)
    x = t64(rng.normal(size=(1, 3, 8)))
    r = readout(rng, (1, 3, 8))
    params = [t for _, t in store]
    assert grad_check(lambda x, *ps: r(stack(x)), [x, *params]) < TOL


# ------------------------------------------------------------------- layer semantics

def test_gat_single_neighbour_no_self_loop():
    store = ParamStore(seed=1, dtype=np.float64)
    gat = GATLayer(store, "gat", 2, 3, self_loops=False)
    A = np.array([[0, 1], [1, 0]], bool)
    g = t64([[0.3, -1.0], [2.0, 0.5]])
    z = gat(g, A).data
    expected = F.elu(t64(g.data[1] @ gat.W.data)).data
    np.testing.assert_allclose(z[0], expected, atol=1e-12)
    np.testing.assert_allclose(gat.last_attention[0], [0.0, 1.0])


def test_gat_equal_neighbours_split_attention():
    store = ParamStore(seed=2, dtype=np.float64)
    gat = GATLayer(store, "gat", 2, 3, self_loops=False)
    A = np.array([[0, 1, 1], [1, 0, 0], [1, 0, 0]], bool)
    g = t64([[1.0, 2.0], [0.5, 0.5], [0.5, 0.5]])
    gat(g, A)
    np.testing.assert_allclose(gat.last_attention[0, 1:], [0.5, 0.5], atol=1e-15)


def test_gat_isolated_node_without_self_loop_raises():
    store = ParamStore(seed=2, dtype=np.float64)
    gat = GATLayer(store, "gat", 2, 2, self_loops=False)
    with pytest.raises(ValueError, match="no neighbours"):
        gat(t64(np.ones((2, 2))), np.zeros((2, 2), bool))


def test_gat_isolated_node_uses_self_loop():
    store = ParamStore(seed=2, dtype=np.float64)
    gat = GATLayer(store, "gat", 2, 2)
    g = t64([[1.0, -2.0], [0.0, 1.0]])
    z = gat(g, np.zeros((2, 2), bool)).data
    np.testing.assert_allclose(z, F.elu(t64(g.data @ gat.W.data)).data, atol=1e-12)


def test_attention_identical_keys_is_uniform(rng):
    store = ParamStore(seed=1, dtype=np.float64)
    mha = MultiHeadAttention(store, "m", 4, 2)
    kv_row = rng.normal(size=4)
    kv = t64(np.tile(kv_row, (1, 5, 1)))
    q = t64(rng.normal(size=(1, 3, 4)))
    out = mha(q, kv).data
    np.testing.assert_allclose(mha.last_attention, 0.2, atol=1e-14)
    v = kv_row @ mha.v.W.data + mha.v.b.data
    expected = v @ mha.o.W.data + mha.o.b.data
    np.testing.assert_allclose(out[0], np.tile(expected, (3, 1)), atol=1e-12)


def test_attention_single_key(rng):
    store = ParamStore(seed=1, dtype=np.float64)
    mha = MultiHeadAttention(store, "m", 4, 4)
    kv = t64(rng.normal(size=(1, 1, 4)))
    out = mha(t64(rng.normal(size=(1, 2, 4))), kv).data
    v = kv.data[0, 0] @ mha.v.W.data + mha.v.b.data
    np.testing.assert_allclose(out[0], np.tile(v @ mha.o.W.data + mha.o.b.data, (2, 1)), atol=1e-12)


def test_attention_empty_kv_raises():
    store = ParamStore(seed=1, dtype=np.float64)
    mha = MultiHeadAttention(store, "m", 4, 2)
    with pytest.raises(ValueError):
        mha(t64(np.ones((1, 2, 4))), t64(np.ones((1, 0, 4))))


def test_attention_heads_must_divide_dimension():
    with pytest.raises(ValueError, match="divisible"):
        MultiHeadAttention(ParamStore(), "m", 6, 4)


def test_transformer_zero_output_projections_is_identity(rng):
    store = ParamStore(seed=1, dtype=np.float64)
    stack = TransformerStack(store, "tf", 8, 2, depth=2)
    for name, t in store:
        if name.endswith("attn.o.W") or name.endswith("ffn.fc2.W"):
            t.data[:] = 0
    x = rng.normal(size=(1, 5, 8))
    np.testing.assert_array_equal(stack(t64(x)).data, x)


@pytest.mark.parametrize("length", [1, 2, 7])
def test_transformer_preserves_shape(rng, length):
    store = ParamStore(seed=1, dtype=np.float64)
    stack = TransformerStack(store, "tf", 8, 4, depth=2)
    assert stack(t64(rng.normal(size=(2, length, 8)))).shape == (2, length, 8)


def test_bigru_length_one_summary_equals_state(rng):
    store = ParamStore(seed=9, dtype=np.float64)
    gru = BiGRU(store, "g", 3, 4)
    states, summary = gru(t64(rng.normal(size=(1, 1, 3))))
    np.testing.assert_allclose(summary.data, states.data[:, 0], atol=1e-15)


def test_bigru_is_deterministic(rng):
    store = ParamStore(seed=9, dtype=np.float64)
    gru = BiGRU(store, "g", 3, 4)
    x = t64(rng.normal(size=(2, 6, 3)))
    a, _ = gru(x)
    b, _ = gru(x)
    np.testing.assert_array_equal(a.data, b.data)


def test_bigru_padding_does_not_change_valid_states(rng):
    store = ParamStore(seed=9, dtype=np.float64)
    gru = BiGRU(store, "g", 3, 4)
    x = rng.normal(size=(1, 4, 3))
    short, _ = gru(t64(x[:, :3]))
    padded, _ = gru(t64(x), np.array([[1, 1, 1, 0]], bool))
    np.testing.assert_allclose(padded.data[:, :3], short.data, atol=1e-14)
    np.testing.assert_array_equal(padded.data[:, 3], 0.0)


# ----------------------------------------------------------------------------- AdamW

def test_adamw_first_step_moves_by_lr():
    theta = {"x": np.array([0.0])}
    state = AdamWState(lr=0.1, weight_decay=0.0, eps=1e-8)
    adamw_step(theta, {"x": np.array([2.0])}, state)
    assert abs(theta["x"][0] + 0.1) < 1e-8


def test_adamw_zero_gradient_no_decay_is_noop():
    theta = {"x": np.array([1.5, -2.0])}
    state = AdamWState(lr=0.1, weight_decay=0.0)
    adamw_step(theta, {"x": np.zeros(2)}, state)
    np.testing.assert_array_equal(theta["x"], [1.5, -2.0])


def test_adamw_decoupled_decay():
    theta = {"x": np.array([1.0])}
    adamw_step(theta, {"x": np.zeros(1)}, AdamWState(lr=0.1, weight_decay=0.01))
    assert abs(theta["x"][0] - 0.999) < 1e-15


def test_adamw_skips_non_finite_gradient():
    theta = {"x": np.array([1.0])}
    state = AdamWState(lr=0.1)
    assert adamw_step(theta, {"x": np.array([np.nan])}, state) is False
    assert theta["x"][0] == 1.0 and state.step == 0 and state.skipped == 1


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-10, 10)), arrays(np.float64, 5, elements=st.floats(-1e3, 1e3)))
def test_adamw_first_step_is_bounded_by_lr(theta0, g):
    theta = {"x": theta0.copy()}
    adamw_step(theta, {"x": g}, AdamWState(lr=0.05, weight_decay=0.0))
    assert np.all(np.abs(theta["x"] - theta0) <= 0.05 + 1e-12)


def test_adamw_wrapper_minimises_quadratic():
    store = ParamStore(seed=0, dtype=np.float64)
    w = store.normal("w", (3,), std=1.0)
    opt = AdamW(store, lr=0.05, weight_decay=0.0)
    for _ in range(400):
        opt.zero_grad()
        with Tape() as tape:
            loss = F.sum(F.mul(F.sub(w, 3.0), F.sub(w, 3.0)))
        tape.backward(loss)
        opt.step()
    np.testing.assert_allclose(w.data, 3.0, atol=1e-2)


# -------------------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(tmp_path, rng):
    params = {"a.W": rng.normal(size=(3, 4)).astype(np.float32), "b": np.float32(rng.normal(size=2))}
    m1 = {k: v * 2 for k, v in params.items()}
    m2 = {k: v * 3 for k, v in params.items()}
    path = tmp_path / "ck.bin"
    save_checkpoint(path, params, {"epoch": 3, "vocab": [5, 7]}, (m1, m2))
    p, meta, (l1, l2) = load_checkpoint(path)
    assert meta == {"epoch": 3, "vocab": [5, 7]}
    for k in params:
        np.testing.assert_array_equal(p[k], params[k])
        np.testing.assert_array_equal(l1[k], m1[k])
        np.testing.assert_array_equal(l2[k], m2[k])


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"nope" * 10)
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)


def test_param_store_rejects_duplicate_names():
    store = ParamStore()
    store.zeros("a", (2,))
    with pytest.raises(KeyError):
        store.zeros("a", (2,))
