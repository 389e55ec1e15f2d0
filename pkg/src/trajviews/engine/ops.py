"""Differentiable operations.

Every function takes :class:`Tensor` (or array-like constants) and returns a
Tensor. Backward closures return one gradient per parent, ``None`` where the
parent is a constant.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, make_result

MASK_FILL = -1e30


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = Tensor(np.asarray(a)), Tensor(np.asarray(b))
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data).astype(x.dtype)
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return make_result(out, (x,), lambda g: (g * scale,))


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    pos = x.data > 0
    neg_part = alpha * np.expm1(np.minimum(x.data, 0))
    out = np.where(pos, x.data, neg_part).astype(x.dtype)
    deriv = np.where(pos, 1.0, neg_part + alpha).astype(x.dtype)
    return make_result(out, (x,), lambda g: (g * deriv,))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU (smooth, so finite differences behave)."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * (v * v * v))
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return make_result(out, (x,), backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ------------------------------------------------------------------ reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def masked_mean(x: Tensor, mask: np.ndarray, axis: int = 1) -> Tensor:
    """Mean of ``x`` over ``axis`` counting only positions where ``mask`` is set.

    ``mask`` has the shape of ``x`` without its trailing feature axis.
    """
    m = np.asarray(mask, dtype=x.dtype)
    counts = np.maximum(m.sum(axis=axis, keepdims=True), 1.0)
    w = (m / counts)[..., None]
    return sum(mul(x, w), axis=axis)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            bt = np.swapaxes(b.data, -1, -2) if b.ndim > 1 else b.data
            ga = _unbroadcast(g @ bt, a.shape) if b.ndim > 1 else np.multiply.outer(g, b.data)
        if b.requires_grad:
            if a.ndim >= 2 and b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input shape {x.shape} incompatible with weight shape {W.shape}")
    y = matmul(x, W)
    if b is not None:
        if b.shape != (W.shape[1],):
            raise ValueError(f"linear: bias shape {b.shape} does not match weight shape {W.shape}")
        y = add(y, b)
    return y


# ------------------------------------------------------------------- shaping

def reshape(x: Tensor, shape) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs, axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([t.data for t in xs], axis=axis), xs, backward)


def getitem(x: Tensor, index) -> Tensor:
    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return make_result(np.asarray(x.data[index]), (x,), backward)


def gather_rows(table: Tensor, idx) -> Tensor:
    """``table[idx]`` along the first axis; index -1 yields a zero row."""
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim < 1:
        raise ValueError("gather_rows needs a table with at least one axis")
    n = table.shape[0]
    if idx.size and (idx.max() >= n or idx.min() < -1):
        raise IndexError(f"row index out of range for table with {n} rows")
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    out = table.data[safe]
    if not valid.all():
        out = out * valid[..., None].astype(table.dtype) if table.ndim > 1 else out * valid

    def backward(g):
        grad = np.zeros_like(table.data)
        flat_idx = safe[valid]
        flat_g = g[valid]
        np.add.at(grad, flat_idx, flat_g)
        return (grad,)

    return make_result(out, (table,), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    return gather_rows(table, ids)


def blend(x: Tensor, replacement: Tensor, mask) -> Tensor:
    """Rows of ``x`` where ``mask`` is true are replaced by the vector ``replacement``."""
    m = np.asarray(mask, dtype=x.dtype)[..., None]
    if not m.any():
        return x
    return add(mul(x, 1.0 - m), mul(replacement, m))


# --------------------------------------------------------------- normalisers

def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; entries with ``mask`` false get probability 0."""
    v = x.data
    if mask is not None:
        mask = np.asarray(mask, bool)
        # additive fill on the (small, broadcastable) mask shape instead of the scores
        v = v + np.where(mask, 0.0, MASK_FILL).astype(x.dtype)
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    if mask is not None and not mask.any(axis=axis).all():
        e = e * np.broadcast_to(mask, e.shape)
    p = e / np.maximum(e.sum(axis=axis, keepdims=True), np.finfo(x.dtype).tiny)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result(p, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    v = x.data
    shifted = v - v.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-softmax of ``logits``."""
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if n == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    if targets.shape != (n,):
        raise ValueError(f"cross_entropy: targets shape {targets.shape} vs logits {logits.shape}")
    v = logits.data
    shifted = v - v.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    logp = shifted - np.log(z)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def backward(g):
        grad = e / z
        grad[rows, targets] -= 1.0
        return (grad * (g / n),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def mse(pred: Tensor, target) -> Tensor:
    diff = sub(pred, np.asarray(target, dtype=pred.dtype))
    return mean(mul(diff, diff))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ValueError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return make_result(out, (x, gain, bias), backward)


# ------------------------------------------------------------------- GRU kernel

def gru_sequence(x: Tensor, mask, Wx: Tensor, Wh: Tensor, bx: Tensor, bh: Tensor,
                 reverse: bool = False) -> Tensor:
    """Run a GRU over padded sequences in one recorded op.

    ``x`` is (N, T, I), ``mask`` (N, T) marks valid steps (a prefix of each
    row). Gate layout in the weight columns is [reset, update, candidate].
    Padded steps keep the carried state and emit zeros. With ``reverse`` the
    recurrence runs from the last valid step to the first.
    """
    N, T, _ = x.shape
    H = Wh.shape[0]
    if Wx.shape != (x.shape[2], 3 * H) or Wh.shape != (H, 3 * H):
        raise ValueError(f"gru: input {x.shape}, Wx {Wx.shape}, Wh {Wh.shape} inconsistent")
    dtype = x.dtype
    m = np.asarray(mask, dtype=dtype)
    XG = x.data @ Wx.data + bx.data
    out = np.zeros((N, T, H), dtype=dtype)
    h = np.zeros((N, H), dtype=dtype)
    order = range(T - 1, -1, -1) if reverse else range(T)
    cache = []
    whd, bhd = Wh.data, bh.data
    for t in order:
        hg = h @ whd + bhd
        xg = XG[:, t]
        r = _sigmoid(xg[:, :H] + hg[:, :H])
        z = _sigmoid(xg[:, H:2 * H] + hg[:, H:2 * H])
        n = np.tanh(xg[:, 2 * H:] + r * hg[:, 2 * H:])
        h_new = (1.0 - z) * n + z * h
        mt = m[:, t:t + 1]
        cache.append((t, h, r, z, n, hg[:, 2 * H:], mt))
        h = mt * h_new + (1.0 - mt) * h
        out[:, t] = mt * h

    def backward(gout):
        dXG = np.zeros_like(XG)
        dWh = np.zeros_like(whd)
        dbh = np.zeros_like(bhd)
        dh = np.zeros((N, H), dtype=dtype)
        for t, h_prev, r, z, n, hgn, mt in reversed(cache):
            dh_tot = dh + mt * gout[:, t]
            dh_new = mt * dh_tot
            dh_prev = (1.0 - mt) * dh_tot + dh_new * z
            dn = dh_new * (1.0 - z)
            dz = dh_new * (h_prev - n)
            dan = dn * (1.0 - n * n)
            dr = dan * hgn
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            dhg = np.concatenate([dar, daz, dan * r], axis=1)
            dWh += h_prev.T @ dhg
            dbh += dhg.sum(axis=0)
            dh_prev += dhg @ whd.T
            dXG[:, t, :H] = dar
            dXG[:, t, H:2 * H] = daz
            dXG[:, t, 2 * H:] = dan
            dh = dh_prev
        flat = dXG.reshape(-1, 3 * H)
        dWx = x.data.reshape(-1, x.shape[2]).T @ flat
        dbx = flat.sum(axis=0)
        dx = (flat @ Wx.data.T).reshape(x.shape) if x.requires_grad else None
        return dx, dWx, dWh, dbx, dbh

    return make_result(out, (x, Wx, Wh, bx, bh), backward)
