"""Parameter store and the layer zoo built on :mod:`ops`."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import ops as F
from .tensor import Tensor


class ParamStore:
    """Named, ordered table of trainable tensors with seeded initialisation.

    Glorot-uniform for matrices, zeros for biases, N(0, 0.02) for
    embedding tables.
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        self.trainable: dict[str, bool] = {}

    def _add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value.astype(self.dtype), requires_grad=trainable, name=name)
        self.tensors[name] = t
        self.trainable[name] = trainable
        return t

    def glorot(self, name: str, shape: tuple) -> Tensor:
        fan_in, fan_out = shape[0], shape[-1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self._add(name, self.rng.uniform(-limit, limit, size=shape))

    def zeros(self, name: str, shape: tuple) -> Tensor:
        return self._add(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple) -> Tensor:
        return self._add(name, np.ones(shape))

    def normal(self, name: str, shape: tuple, std: float = 0.02) -> Tensor:
        return self._add(name, self.rng.normal(0.0, std, size=shape))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    def named_trainable(self):
        return [(k, t) for k, t in self.tensors.items() if self.trainable[k]]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def freeze(self) -> None:
        for name, t in self.tensors.items():
            t.requires_grad = False
            self.trainable[name] = False

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.tensors) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for k, t in self.tensors.items():
            v = np.asarray(state[k])
            if v.shape != t.shape:
                raise ValueError(f"{k}: stored shape {v.shape} != parameter shape {t.shape}")
            t.data = v.astype(t.dtype, copy=True)


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, bias: bool = True):
        self.W = store.glorot(f"{name}.W", (d_in, d_out))
        self.b = store.zeros(f"{name}.b", (d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.W, self.b)


class Embedding:
    def __init__(self, store: ParamStore, name: str, n: int, d: int):
        self.table = store.normal(f"{name}.table", (n, d))

    def __call__(self, ids) -> Tensor:
        return F.embedding_lookup(self.table, ids)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int):
        self.gain = store.ones(f"{name}.gain", (d,))
        self.bias = store.zeros(f"{name}.bias", (d,))

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias)


class MLP:
    """Two-layer perceptron used for probe heads and the transformer feed-forward."""

    def __init__(self, store: ParamStore, name: str, d_in: int, hidden: int, d_out: int,
                 activation=F.gelu):
        self.fc1 = Linear(store, f"{name}.fc1", d_in, hidden)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, d_out)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.activation(self.fc1(x)))


class MultiHeadAttention:
    """Scaled dot-product attention with separate Q/K/V/output projections."""

    def __init__(self, store: ParamStore, name: str, d: int, heads: int):
        if d % heads:
            raise ValueError(f"model dimension {d} is not divisible by {heads} heads")
        self.d, self.heads, self.dk = d, heads, d // heads
        self.q = Linear(store, f"{name}.q", d, d)
        # a key bias shifts every logit of a query equally, so it is omitted
        self.k = Linear(store, f"{name}.k", d, d, bias=False)
        self.v = Linear(store, f"{name}.v", d, d)
        self.o = Linear(store, f"{name}.o", d, d)
        self.last_attention: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        return F.transpose(F.reshape(x, (B, L, self.heads, self.dk)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, kv: Tensor, key_mask=None) -> Tensor:
        """``query`` (B, Lq, d), ``kv`` (B, Lk, d); ``key_mask`` (B, Lk) marks real keys."""
        if kv.shape[1] == 0:
            raise ValueError("multi-head attention needs at least one key/value token")
        B, Lq, _ = query.shape
        Q = self._split(self.q(query))
        K = self._split(self.k(kv))
        V = self._split(self.v(kv))
        scores = F.mul(F.matmul(Q, F.transpose(K, (0, 1, 3, 2))), 1.0 / np.sqrt(self.dk))
        mask = None if key_mask is None else np.asarray(key_mask, bool)[:, None, None, :]
        attn = F.softmax(scores, axis=-1, mask=mask)
        self.last_attention = attn.data
        ctx = F.matmul(attn, V)
        ctx = F.reshape(F.transpose(ctx, (0, 2, 1, 3)), (B, Lq, self.d))
        return self.o(ctx)


class TransformerBlock:
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, store: ParamStore, name: str, d: int, heads: int, ff_mult: int = 2):
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.attn = MultiHeadAttention(store, f"{name}.attn", d, heads)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.ffn = MLP(store, f"{name}.ffn", d, ff_mult * d, d)

    def __call__(self, x: Tensor, key_mask=None) -> Tensor:
        h = self.ln1(x)
        x = F.add(x, self.attn(h, h, key_mask))
        return F.add(x, self.ffn(self.ln2(x)))


class TransformerStack:
    def __init__(self, store: ParamStore, name: str, d: int, heads: int, depth: int):
        self.blocks = [TransformerBlock(store, f"{name}.{i}", d, heads) for i in range(depth)]

    def __call__(self, x: Tensor, key_mask=None) -> Tensor:
        for block in self.blocks:
            x = block(x, key_mask)
        return x


class GRU:
    """Single-direction GRU over padded batches; see :func:`ops.gru_sequence`."""

    def __init__(self, store: ParamStore, name: str, d_in: int, hidden: int, reverse: bool = False):
        self.Wx = store.glorot(f"{name}.Wx", (d_in, 3 * hidden))
        self.Wh = store.glorot(f"{name}.Wh", (hidden, 3 * hidden))
        self.bx = store.zeros(f"{name}.bx", (3 * hidden,))
        self.bh = store.zeros(f"{name}.bh", (3 * hidden,))
        self.reverse = reverse

    def __call__(self, x: Tensor, mask) -> Tensor:
        return F.gru_sequence(x, mask, self.Wx, self.Wh, self.bx, self.bh, reverse=self.reverse)


class BiGRU:
    """Bidirectional GRU. Returns per-step states (forward ‖ backward) and their mean."""

    def __init__(self, store: ParamStore, name: str, d_in: int, hidden: int):
        self.fwd = GRU(store, f"{name}.fwd", d_in, hidden)
        self.bwd = GRU(store, f"{name}.bwd", d_in, hidden, reverse=True)

    def __call__(self, x: Tensor, mask=None) -> tuple[Tensor, Tensor]:
        if x.shape[1] < 1:
            raise ValueError("bigru needs sequences of length >= 1")
        if mask is None:
            mask = np.ones(x.shape[:2], dtype=bool)
        states = F.concat([self.fwd(x, mask), self.bwd(x, mask)], axis=-1)
        return states, F.masked_mean(states, mask, axis=1)


class GATLayer:
    """Single-head graph attention over a dense adjacency matrix.

    Scores e_vu = LeakyReLU(a_src . (g_v W) + a_dst . (g_u W)), softmax over
    N(v) (plus v itself when self-loops are on), output ELU(sum_u alpha_vu g_u W).
    """

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 self_loops: bool = True, negative_slope: float = 0.2):
        self.W = store.glorot(f"{name}.W", (d_in, d_out))
        self.a_src = store.glorot(f"{name}.a_src", (d_out, 1))
        self.a_dst = store.glorot(f"{name}.a_dst", (d_out, 1))
        self.self_loops = self_loops
        self.negative_slope = negative_slope
        self.last_attention: np.ndarray | None = None

    def attention_mask(self, adjacency: np.ndarray) -> np.ndarray:
        A = np.asarray(adjacency, dtype=bool)
        if A.shape[0] != A.shape[1] or not np.array_equal(A, A.T):
            raise ValueError("GAT adjacency must be a symmetric square matrix")
        if self.self_loops:
            return A | np.eye(A.shape[0], dtype=bool)
        if not A.any(axis=1).all():
            empty = int(np.flatnonzero(~A.any(axis=1))[0])
            raise ValueError(f"node {empty} has no neighbours and self-loops are disabled")
        return A

    def __call__(self, feats: Tensor, adjacency: np.ndarray) -> Tensor:
        mask = self.attention_mask(adjacency)
        if feats.shape[0] != mask.shape[0]:
            raise ValueError(f"{feats.shape[0]} node features for {mask.shape[0]} nodes")
        h = F.matmul(feats, self.W)
        s_src = F.matmul(h, self.a_src)                      # (n, 1)
        s_dst = F.reshape(F.matmul(h, self.a_dst), (1, -1))  # (1, n)
        scores = F.leaky_relu(F.add(s_src, s_dst), self.negative_slope)
        alpha = F.softmax(scores, axis=1, mask=mask)
        self.last_attention = alpha.data
        return F.elu(F.matmul(alpha, h))


def sinusoidal_positions(length: int, d: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    out = np.zeros((length, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : d // 2])
    return out.astype(dtype)
