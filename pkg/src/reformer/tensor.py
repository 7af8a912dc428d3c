"""Dense float64 tensors with a reverse-mode gradient tape.

All model arithmetic runs through the ops in this module. Values are numpy
float64 arrays in row-major order. Gradients are recorded on an explicit
Tape: a training step owns exactly one tape, parameters are watched on it,
and backward() fills one gradient slot per recorded node.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class TapeError(RuntimeError):
    """Tape misuse: mixed tapes, non-scalar backward, double backward."""


class EmptyLossError(ValueError):
    """A loss reduction ended up with zero contributing rows."""


class NondeterministicFunctionError(RuntimeError):
    """grad_check was given a function whose two forward passes disagree."""


class _Node:
    __slots__ = ("parents", "backward", "shape")

    def __init__(self, parents, backward, shape):
        self.parents = parents
        self.backward = backward
        self.shape = shape


class Tape:
    """Append-only op record. Parents of node k always have handles < k."""

    def __init__(self):
        self.nodes = []
        self.grads = None
        self._watched = {}

    def _append(self, parents, backward, shape):
        handle = len(self.nodes)
        self.nodes.append(_Node(parents, backward, shape))
        return handle

    def leaf(self, data):
        """Track a raw array as a gradient leaf."""
        arr = np.asarray(data, dtype=np.float64)
        return Tensor(arr, self, self._append((), None, arr.shape))

    def watch(self, param):
        """Track a parameter-like object (anything with .data).

        Watching the same object twice returns the same leaf, so gradients
        from multiple uses accumulate into one slot.
        """
        entry = self._watched.get(id(param))
        if entry is None:
            handle = self._append((), None, np.shape(param.data))
            self._watched[id(param)] = (handle, param)
        else:
            handle = entry[0]
        return Tensor(np.asarray(param.data, dtype=np.float64), self, handle)

    def backward(self, loss):
        """Reverse sweep from a tracked scalar; fills self.grads.

        Returns the list of per-node gradients (indexed by handle). Calling
        backward twice without reset_gradients() is an error.
        """
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise TapeError("loss is not tracked on this tape")
        if loss.data.ndim != 0:
            raise TapeError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if self.grads is not None:
            raise TapeError(
                "backward already ran on this tape; call reset_gradients() first"
            )
        grads = [None] * len(self.nodes)
        grads[loss.node] = np.ones((), dtype=np.float64)
        for handle in range(loss.node, -1, -1):
            g = grads[handle]
            if g is None:
                continue
            node = self.nodes[handle]
            if node.backward is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                if pg.shape != self.nodes[parent].shape:
                    raise TapeError(
                        f"gradient shape {pg.shape} does not match node shape "
                        f"{self.nodes[parent].shape}"
                    )
                if grads[parent] is None:
                    grads[parent] = pg
                else:
                    grads[parent] = grads[parent] + pg
        self.grads = grads
        return grads

    def reset_gradients(self):
        self.grads = None

    def grad(self, x):
        """Gradient for a tracked Tensor or a watched parameter, or None."""
        if self.grads is None:
            raise TapeError("backward has not run on this tape")
        if isinstance(x, Tensor):
            if x.tape is not self:
                raise TapeError("tensor is not tracked on this tape")
            return self.grads[x.node]
        entry = self._watched.get(id(x))
        if entry is None:
            return None
        return self.grads[entry[0]]


class Tensor:
    """Value plus optional (tape, node) handle when gradients are tracked."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape=None, node=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def tracked(self):
        return self.tape is not None

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return elementwise(self, other, "add")

    __radd__ = __add__

    def __sub__(self, other):
        return elementwise(self, other, "sub")

    def __rsub__(self, other):
        return elementwise(other, self, "sub")

    def __mul__(self, other):
        return elementwise(self, other, "mul")

    __rmul__ = __mul__

    def __neg__(self):
        return elementwise(self, -1.0, "mul")

    def __truediv__(self, const):
        return elementwise(self, 1.0 / float(const), "mul")

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _coerce(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _result_tape(*tensors):
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is not None and tape is not t.tape:
            raise TapeError("operands are recorded on different tapes")
        tape = t.tape
    return tape


def _record(tape, out, tracked, backward):
    """Emit a result tensor; tracked is [(position, parent_handle), ...]."""
    if tape is None or not tracked:
        return Tensor(out)
    handles = tuple(h for _, h in tracked)
    return Tensor(out, tape, tape._append(handles, backward, out.shape))


def _unbroadcast(g, shape):
    """Sum g down to shape after trailing-axis broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def elementwise(a, b, kind):
    """Binary add/sub/mul with trailing-dimension broadcasting."""
    a, b = _coerce(a), _coerce(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"cannot broadcast shapes {a.shape} and {b.shape} for {kind}"
        ) from None
    if kind == "add":
        out = a.data + b.data
    elif kind == "sub":
        out = a.data - b.data
    elif kind == "mul":
        out = a.data * b.data
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    tape = _result_tape(a, b)
    ad, bd = a.data, b.data
    a_shape, b_shape = a.shape, b.shape

    def backward(g):
        grads = []
        if a.tracked:
            ga = g if kind != "mul" else g * bd
            grads.append(_unbroadcast(ga, a_shape))
        if b.tracked:
            if kind == "add":
                gb = g
            elif kind == "sub":
                gb = -g
            else:
                gb = g * ad
            grads.append(_unbroadcast(gb, b_shape))
        return grads

    tracked = [(i, t.node) for i, t in enumerate((a, b)) if t.tracked]
    return _record(tape, out, tracked, backward)


def matmul(a, b):
    """Matrix product; leading batch dims broadcast, inner dims must agree."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} vs {b.shape}"
        )
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(
            f"matmul batch dimensions disagree: {a.shape} vs {b.shape}"
        ) from None
    tape = _result_tape(a, b)
    ad, bd = a.data, b.data
    a_shape, b_shape = a.shape, b.shape

    def backward(g):
        grads = []
        if a.tracked:
            ga = g @ np.swapaxes(bd, -1, -2)
            grads.append(_unbroadcast(ga, a_shape))
        if b.tracked:
            gb = np.swapaxes(ad, -1, -2) @ g
            grads.append(_unbroadcast(gb, b_shape))
        return grads

    tracked = [(i, t.node) for i, t in enumerate((a, b)) if t.tracked]
    return _record(tape, out, tracked, backward)


def reshape(x, shape):
    x = _coerce(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    out = x.data.reshape(shape)
    in_shape = x.shape

    def backward(g):
        return [g.reshape(in_shape)]

    return _record(x.tape, out, [(0, x.node)] if x.tracked else [], backward)


def transpose(x, axes=None):
    x = _coerce(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(int(a) for a in axes)
    out = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return [g.transpose(inverse)]

    return _record(x.tape, out, [(0, x.node)] if x.tracked else [], backward)


def concat(tensors, axis=0):
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    tape = _result_tape(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    tracked = [(i, t.node) for i, t in enumerate(tensors) if t.tracked]
    idx_tracked = [i for i, t in enumerate(tensors) if t.tracked]

    def backward(g):
        pieces = []
        for i in idx_tracked:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(sl)]))
        return pieces

    return _record(tape, out, tracked, backward)


def gather_rows(x, indices):
    """Select rows along axis 0; backward scatter-adds (embedding lookup)."""
    x = _coerce(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(
            f"row index out of range for first dimension {x.shape[0]}"
        )
    out = x.data[idx]
    in_shape = x.shape

    def backward(g):
        gx = np.zeros(in_shape, dtype=np.float64)
        np.add.at(gx, idx, g)
        return [gx]

    return _record(x.tape, out, [(0, x.node)] if x.tracked else [], backward)


def reduce_sum(x, axis=None, keepdims=False):
    x = _coerce(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    in_shape = x.shape

    def backward(g):
        if axis is None:
            return [np.broadcast_to(g, in_shape).copy()]
        g2 = g if keepdims else np.expand_dims(g, axis)
        return [np.broadcast_to(g2, in_shape).copy()]

    return _record(x.tape, np.asarray(out), [(0, x.node)] if x.tracked else [], backward)


def reduce_mean(x, axis=None, keepdims=False):
    x = _coerce(x)
    count = x.data.size if axis is None else x.shape[axis]
    return reduce_sum(x, axis, keepdims) * (1.0 / count)


def softmax(x, axis=-1):
    """Max-shifted softmax; every slice sums to 1 and is strictly positive."""
    x = _coerce(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return [out * (g - dot)]

    return _record(x.tape, out, [(0, x.node)] if x.tracked else [], backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    tape = _result_tape(x, gamma, beta)
    lead_axes = tuple(range(out.ndim - 1))
    gamma_data = gamma.data

    def backward(g):
        grads = []
        if x.tracked:
            gy = g * gamma_data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            grads.append(inv * (gy - m1 - xhat * m2))
        if gamma.tracked:
            grads.append((g * xhat).sum(axis=lead_axes))
        if beta.tracked:
            grads.append(g.sum(axis=lead_axes))
        return grads

    tracked = [(i, t.node) for i, t in enumerate((x, gamma, beta)) if t.tracked]
    return _record(tape, out, tracked, backward)


def gelu(x):
    """GELU, tanh form."""
    x = _coerce(x)
    c = np.sqrt(2.0 / np.pi)
    xd = x.data
    inner = c * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        d_inner = c * (1.0 + 3 * 0.044715 * xd**2)
        return [g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * d_inner)]

    return _record(x.tape, out, [(0, x.node)] if x.tracked else [], backward)


def dropout(x, p, rng):
    """Inverted dropout. Callers skip this entirely outside training."""
    x = _coerce(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    out = x.data * keep

    def backward(g):
        return [g * keep]

    return _record(x.tape, out, [(0, x.node)] if x.tracked else [], backward)


def cross_entropy(logits, targets, ignore_index=None, reduction="mean"):
    """Mean negative log-likelihood over non-ignored rows, fused log-sum-exp.

    logits: (n, c); targets: n class indices, rows equal to ignore_index are
    dropped from the reduction. reduction "none" returns per-row losses with
    zeros at ignored rows.
    """
    logits = _coerce(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (n, c) logits, got {logits.shape}")
    n, c = logits.shape
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (n,):
        raise ShapeError(f"targets length {t.shape} does not match {n} rows")
    valid = np.ones(n, dtype=bool) if ignore_index is None else (t != ignore_index)
    bad = valid & ((t < 0) | (t >= c))
    if bad.any():
        row = int(np.argmax(bad))
        raise IndexError(f"target {t[row]} out of range [0, {c}) at row {row}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptyLossError("cross_entropy: every row is ignored")
    ld = logits.data
    m = ld.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(ld - m).sum(axis=1))
    rows = np.arange(n)
    picked = np.where(valid, ld[rows, np.where(valid, t, 0)], 0.0)
    per_row = np.where(valid, lse - picked, 0.0)
    if reduction == "mean":
        out = np.asarray(per_row[valid].mean())
    elif reduction == "sum":
        out = np.asarray(per_row[valid].sum())
    elif reduction == "none":
        out = per_row
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        p = np.exp(ld - m)
        p /= p.sum(axis=1, keepdims=True)
        p[rows[valid], t[valid]] -= 1.0
        p[~valid] = 0.0
        if reduction == "mean":
            return [p * (g / n_valid)]
        if reduction == "sum":
            return [p * g]
        return [p * g[:, None]]

    return _record(
        logits.tape, out, [(0, logits.node)] if logits.tracked else [], backward
    )


def backward(loss):
    """Run the reverse sweep for a tracked scalar loss; returns the tape grads."""
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise TapeError("backward needs a loss tracked on a tape")
    return loss.tape.backward(loss)


def grad_check(f, x, eps=1e-5, max_coords=None, seed=0):
    """Max relative error between tape gradients and central differences.

    f maps a tracked Tensor to a scalar Tensor and must be deterministic;
    two forward passes that disagree raise NondeterministicFunctionError.
    max_coords limits the check to a seeded random coordinate subset.
    """
    x0 = np.asarray(x, dtype=np.float64)

    def value(arr):
        out = f(Tape().leaf(arr))
        if out.data.ndim != 0:
            raise TapeError("grad_check requires a scalar-valued function")
        return float(out.data)

    v1, v2 = value(x0), value(x0)
    if v1 != v2:
        raise NondeterministicFunctionError(
            f"two forward passes disagree: {v1!r} vs {v2!r}"
        )

    tape = Tape()
    xt = tape.leaf(x0)
    loss = f(xt)
    tape.backward(loss)
    g_ad = tape.grad(xt)
    if g_ad is None:
        g_ad = np.zeros_like(x0)

    coords = list(np.ndindex(x0.shape)) if x0.shape else [()]
    if max_coords is not None and len(coords) > max_coords:
        picks = np.random.default_rng(seed).choice(
            len(coords), size=max_coords, replace=False
        )
        coords = [coords[i] for i in picks]
    worst = 0.0
    for idx in coords:
        xp = x0.copy()
        xp[idx] += eps
        xm = x0.copy()
        xm[idx] -= eps
        g_fd = (value(xp) - value(xm)) / (2 * eps)
        ga = float(g_ad[idx]) if x0.shape else float(g_ad)
        err = abs(ga - g_fd) / max(abs(ga), abs(g_fd), 1e-8)
        worst = max(worst, err)
    return worst


def grad_check_params(loss_fn, params, eps=1e-5, max_coords=None, seed=0):
    """grad_check over named parameters of a model.

    loss_fn(tape) -> scalar Tensor; params is an iterable of (name, param)
    where each param exposes .data. Checks a seeded coordinate subset per
    parameter and returns the max relative error across all of them.
    """
    params = list(params)

    def value():
        out = loss_fn(Tape())
        return float(out.data)

    v1, v2 = value(), value()
    if v1 != v2:
        raise NondeterministicFunctionError(
            f"two forward passes disagree: {v1!r} vs {v2!r}"
        )

    tape = Tape()
    loss = loss_fn(tape)
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _, param in params:
        g = tape.grad(param)
        if g is None:
            g = np.zeros_like(param.data)
        coords = list(np.ndindex(param.data.shape)) if param.data.shape else [()]
        if max_coords is not None and len(coords) > max_coords:
            picks = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in picks]
        base = param.data
        for idx in coords:
            try:
                param.data = base.copy()
                param.data[idx] += eps
                vp = value()
                param.data = base.copy()
                param.data[idx] -= eps
                vm = value()
            finally:
                param.data = base
            g_fd = (vp - vm) / (2 * eps)
            ga = float(g[idx]) if param.data.shape else float(g)
            err = abs(ga - g_fd) / max(abs(ga), abs(g_fd), 1e-8)
            worst = max(worst, err)
    return worst
