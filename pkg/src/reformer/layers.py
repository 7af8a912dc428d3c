"""Transformer building blocks: linear/embedding layers, multi-head
attention, feed-forward, and pre-norm encoder/decoder layers.

Layers hold Parameters; a forward pass takes an explicit tape (None means
evaluation: values flow through the same ops untracked).
"""
from __future__ import annotations

import numpy as np

from .tensor import (
    Tensor,
    dropout,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    softmax,
)

ATTENTION_MASK_BIAS = -1e9


class Parameter:
    """Named trainable array. Updates rebind .data, never mutate in place."""

    __slots__ = ("name", "data", "trainable")

    def __init__(self, name, data, trainable=True):
        self.name = name
        self.data = np.asarray(data, dtype=np.float64)
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Module:
    """Minimal parameter container with dotted-name walks."""

    def __init__(self):
        self._params = {}
        self._children = {}

    def register(self, name, data):
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameter_count(self):
        return sum(p.data.size for _, p in self.named_parameters())

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(
                f"parameter names do not match: missing={missing} extra={extra}"
            )
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} "
                    f"vs model {p.data.shape}"
                )
            p.data = arr


def _wrap(tape, param):
    return tape.watch(param) if tape is not None else Tensor(param.data)


def xavier_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.w = self.register("w", xavier_uniform(rng, d_in, d_out))
        self.b = self.register("b", np.zeros(d_out)) if bias else None

    def forward(self, tape, x):
        out = matmul(x, _wrap(tape, self.w))
        if self.b is not None:
            out = out + _wrap(tape, self.b)
        return out


class Embedding(Module):
    def __init__(self, n_rows, dim, rng):
        super().__init__()
        self.n_rows, self.dim = n_rows, dim
        self.table = self.register("table", rng.normal(0.0, 0.02, size=(n_rows, dim)))

    def forward(self, tape, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_rows):
            raise IndexError(
                f"embedding id out of range [0, {self.n_rows}): "
                f"{int(ids.min())}..{int(ids.max())}"
            )
        return gather_rows(_wrap(tape, self.table), ids)


class Norm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = self.register("gamma", np.ones(dim))
        self.beta = self.register("beta", np.zeros(dim))

    def forward(self, tape, x):
        return layer_norm(x, _wrap(tape, self.gamma), _wrap(tape, self.beta), self.eps)


def multi_head_split(x, h):
    """(n, d) -> (h, n, d/h)."""
    n, d = x.shape
    return x.reshape((n, h, d // h)).transpose((1, 0, 2))


def multi_head_merge(x):
    """(h, n, dk) -> (n, h*dk)."""
    h, n, dk = x.shape
    return x.transpose((1, 0, 2)).reshape((n, h * dk))


class MultiHeadAttention(Module):
    """Scaled dot-product attention over h heads with a boolean allow-mask."""

    def __init__(self, d, h, rng):
        super().__init__()
        if d % h != 0:
            raise ValueError(f"model width {d} is not divisible by {h} heads")
        self.d, self.h = d, h
        self.wq = self.add_child("wq", Linear(d, d, rng))
        # softmax is shift-invariant in the key bias, so that bias could
        # never receive gradient; omit it
        self.wk = self.add_child("wk", Linear(d, d, rng, bias=False))
        self.wv = self.add_child("wv", Linear(d, d, rng))
        self.wo = self.add_child("wo", Linear(d, d, rng))

    def forward(self, tape, q, k, v, mask=None):
        """mask: optional bool (n_q, n_k), True = may attend."""
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if not mask.any(axis=-1).all():
                rows = np.where(~mask.any(axis=-1))[0].tolist()
                raise ValueError(
                    f"attention mask blocks every key for query rows {rows}"
                )
        dk = self.d // self.h
        qh = multi_head_split(self.wq.forward(tape, q), self.h)
        kh = multi_head_split(self.wk.forward(tape, k), self.h)
        vh = multi_head_split(self.wv.forward(tape, v), self.h)
        scores = matmul(qh, kh.transpose((0, 2, 1))) * (1.0 / np.sqrt(dk))
        if mask is not None:
            scores = scores + np.where(mask, 0.0, ATTENTION_MASK_BIAS)
        weights = softmax(scores, axis=-1)
        ctx = multi_head_merge(matmul(weights, vh))
        return self.wo.forward(tape, ctx)

    def attention_weights(self, q, k, mask=None):
        """Eval-only attention map (h, n_q, n_k), for inspection and tests."""
        dk = self.d // self.h
        qh = multi_head_split(self.wq.forward(None, q), self.h)
        kh = multi_head_split(self.wk.forward(None, k), self.h)
        scores = matmul(qh, kh.transpose((0, 2, 1))) * (1.0 / np.sqrt(dk))
        if mask is not None:
            scores = scores + np.where(np.asarray(mask, bool), 0.0, ATTENTION_MASK_BIAS)
        return softmax(scores, axis=-1).data


class FeedForward(Module):
    def __init__(self, d, mult, rng):
        super().__init__()
        self.fc1 = self.add_child("fc1", Linear(d, mult * d, rng))
        self.fc2 = self.add_child("fc2", Linear(mult * d, d, rng))

    def forward(self, tape, x):
        return self.fc2.forward(tape, gelu(self.fc1.forward(tape, x)))


def _maybe_dropout(x, p, rng, training):
    if training and p > 0.0:
        return dropout(x, p, rng)
    return x


def pad_to_attention_mask(pad_mask, n_q):
    """bool (n_k,) keep-mask -> (n_q, n_k) allow-mask, or None."""
    if pad_mask is None:
        return None
    pad_mask = np.asarray(pad_mask, dtype=bool)
    return np.broadcast_to(pad_mask, (n_q, pad_mask.shape[0]))


class EncoderLayer(Module):
    """Pre-norm self-attention + feed-forward, dropout on each sublayer output."""

    def __init__(self, d, h, ffn_mult, dropout_p, rng):
        super().__init__()
        self.dropout_p = dropout_p
        self.norm1 = self.add_child("norm1", Norm(d))
        self.attn = self.add_child("attn", MultiHeadAttention(d, h, rng))
        self.norm2 = self.add_child("norm2", Norm(d))
        self.ffn = self.add_child("ffn", FeedForward(d, ffn_mult, rng))

    def forward(self, tape, x, pad_mask=None, rng=None, training=False):
        n = x.shape[0]
        h1 = self.norm1.forward(tape, x)
        a = self.attn.forward(tape, h1, h1, h1, pad_to_attention_mask(pad_mask, n))
        x = x + _maybe_dropout(a, self.dropout_p, rng, training)
        f = self.ffn.forward(tape, self.norm2.forward(tape, x))
        return x + _maybe_dropout(f, self.dropout_p, rng, training)


class DecoderLayer(Module):
    """Pre-norm masked self-attention, cross-attention, feed-forward."""

    def __init__(self, d, h, ffn_mult, dropout_p, rng):
        super().__init__()
        self.dropout_p = dropout_p
        self.norm1 = self.add_child("norm1", Norm(d))
        self.self_attn = self.add_child("self_attn", MultiHeadAttention(d, h, rng))
        self.norm2 = self.add_child("norm2", Norm(d))
        self.cross_attn = self.add_child("cross_attn", MultiHeadAttention(d, h, rng))
        self.norm3 = self.add_child("norm3", Norm(d))
        self.ffn = self.add_child("ffn", FeedForward(d, ffn_mult, rng))

    def forward(self, tape, y, enc, enc_pad_mask=None, rng=None, training=False):
        m = y.shape[0]
        h1 = self.norm1.forward(tape, y)
        a = self.self_attn.forward(tape, h1, h1, h1, causal_mask(m))
        y = y + _maybe_dropout(a, self.dropout_p, rng, training)
        h2 = self.norm2.forward(tape, y)
        c = self.cross_attn.forward(
            tape, h2, enc, enc, pad_to_attention_mask(enc_pad_mask, m)
        )
        y = y + _maybe_dropout(c, self.dropout_p, rng, training)
        f = self.ffn.forward(tape, self.norm3.forward(tape, y))
        return y + _maybe_dropout(f, self.dropout_p, rng, training)


def causal_mask(m):
    """Lower-triangular allow-mask: position t sees positions <= t."""
    return np.tril(np.ones((m, m), dtype=bool))


def positional_encoding(length, d):
    """Sinusoidal position table, pos / 10000^(2i/d) form. Deterministic."""
    if length < 1:
        raise ValueError("positional_encoding needs length >= 1")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, i / d)
    table = np.zeros((length, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : (d // 2)])
    return table
