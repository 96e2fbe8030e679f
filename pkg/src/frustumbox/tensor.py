"""Minimal reverse-mode autodiff over float64 numpy arrays.

A Tensor wraps an ndarray plus an optional backpropagation record. Graphs
are built eagerly by the op functions below; ``backward`` walks the graph
once per call and accumulates into ``.grad`` until the caller clears it.

Reductions along an axis that may be permuted between runs (the cross-object
attention path) use ``sorted_sum``: summands are sorted before summation, so
the result is a function of the summand multiset only. That is what makes
batch-permutation equivariance bit-exact rather than merely approximate.
"""

from __future__ import annotations

import math

import numpy as np


class TensorError(Exception):
    """Base class for engine failures."""


class ShapeMismatch(TensorError):
    pass


class RankMismatch(TensorError):
    pass


class HeadDivisibility(TensorError):
    pass


class NonScalarLoss(TensorError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method spellings of common ops -------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def cos(self):
        return cos(self)

    def sin(self):
        return sin(self)


class Parameter(Tensor):
    """A named trainable tensor; the unit the optimizer and checkpoints see."""

    __slots__ = ("name",)

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, inputs, grad_fn):
    """Internal: graph node over the `inputs` that require gradients."""
    out = Tensor(data)
    parents = tuple(t for t in inputs if t.requires_grad)
    if parents:
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g, a.data.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g, b.data.shape)))
        return out

    return _node(a.data + b.data, (a, b), grad_fn)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g * b.data, a.data.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g * a.data, b.data.shape)))
        return out

    return _node(a.data * b.data, (a, b), grad_fn)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g / b.data, a.data.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))
        return out

    return _node(a.data / b.data, (a, b), grad_fn)


def power(a, exponent):
    a = as_tensor(a)
    e = float(exponent)
    out_data = a.data**e

    def grad_fn(g):
        return [(a, g * e * a.data ** (e - 1.0))]

    return _node(out_data, (a,), grad_fn)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def grad_fn(g):
        return [(a, g * out_data)]

    return _node(out_data, (a,), grad_fn)


def log(a):
    a = as_tensor(a)

    def grad_fn(g):
        return [(a, g / a.data)]

    return _node(np.log(a.data), (a,), grad_fn)


def cos(a):
    a = as_tensor(a)

    def grad_fn(g):
        return [(a, -g * np.sin(a.data))]

    return _node(np.cos(a.data), (a,), grad_fn)


def sin(a):
    a = as_tensor(a)

    def grad_fn(g):
        return [(a, g * np.cos(a.data))]

    return _node(np.sin(a.data), (a,), grad_fn)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def grad_fn(g):
        return [(a, g * (1.0 - out_data * out_data))]

    return _node(out_data, (a,), grad_fn)


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data

    def grad_fn(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g * take_a, a.data.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g * ~take_a, b.data.shape)))
        return out

    return _node(np.maximum(a.data, b.data), (a, b), grad_fn)


def minimum(a, b):
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data

    def grad_fn(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g * take_a, a.data.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g * ~take_a, b.data.shape)))
        return out

    return _node(np.minimum(a.data, b.data), (a, b), grad_fn)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def grad_fn(g):
        return [(a, g * mask)]

    return _node(a.data * mask, (a,), grad_fn)


def leaky_relu(a, slope=0.01):
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)

    def grad_fn(g):
        return [(a, g * factor)]

    return _node(a.data * factor, (a,), grad_fn)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    orig = a.data.shape

    def grad_fn(g):
        return [(a, g.reshape(orig))]

    return _node(a.data.reshape(shape), (a,), grad_fn)


def swapaxes(a, ax0, ax1):
    a = as_tensor(a)

    def grad_fn(g):
        return [(a, g.swapaxes(ax0, ax1))]

    return _node(a.data.swapaxes(ax0, ax1).copy(), (a,), grad_fn)


def transpose_batch_seq(x):
    """Swap the leading batch and sequence axes of a rank-3 tensor."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise RankMismatch(f"transpose_batch_seq expects rank 3, got shape {x.shape}")
    return swapaxes(x, 0, 1)


def broadcast_to(a, shape):
    a = as_tensor(a)
    orig = a.data.shape

    def grad_fn(g):
        return [(a, _unbroadcast(g, orig))]

    return _node(np.broadcast_to(a.data, shape).copy(), (a,), grad_fn)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        out = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                out.append((t, g[tuple(sl)]))
        return out

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.data.shape

    def grad_fn(g):
        buf = np.zeros(shape)
        np.add.at(buf, idx, g)
        return [(a, buf)]

    return _node(a.data[idx].copy() if isinstance(a.data[idx], np.ndarray) else a.data[idx],
                 (a,), grad_fn)


# ---------------------------------------------------------------------------
# Reductions and contractions
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.data.shape

    def grad_fn(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return [(a, np.broadcast_to(gg, shape))]

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), grad_fn)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def sorted_sum(a, axis, keepdims=False):
    """Sum whose value depends only on the summand multiset along `axis`.

    Sorting before summation makes the reduction invariant to permutations
    of the inputs along the reduced axis, bit for bit. The gradient is the
    plain broadcast, identical to an ordinary sum.
    """
    a = as_tensor(a)
    shape = a.data.shape
    out_data = np.sort(a.data, axis=axis).sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(gg, shape))]

    return _node(out_data, (a,), grad_fn)


def matmul(a, b):
    """Batched matrix product with broadcasting over leading axes.

    1-D operands follow the usual promotion rules (vector dotted on the
    matching side). Raises ShapeMismatch with both shapes on inner or batch
    disagreement.
    """
    a, b = as_tensor(a), as_tensor(b)
    a_vec, b_vec = a.data.ndim == 1, b.data.ndim == 1
    a2 = a.data.reshape(1, -1) if a_vec else a.data
    b2 = b.data.reshape(-1, 1) if b_vec else b.data
    if a2.ndim < 2 or b2.ndim < 2 or a2.shape[-1] != b2.shape[-2]:
        raise ShapeMismatch(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a2.shape[:-2], b2.shape[:-2])
    except ValueError as err:
        raise ShapeMismatch(f"matmul batch extents disagree: {a.shape} x {b.shape}") from err

    out2 = a2 @ b2
    out_data = out2
    if a_vec:
        out_data = out_data[..., 0, :]
    if b_vec:
        out_data = out_data[..., 0] if a_vec else out_data[..., :, 0]

    def grad_fn(g):
        g2 = g.reshape(out2.shape)
        out = []
        if a.requires_grad:
            ga = _unbroadcast(g2 @ b2.swapaxes(-1, -2), a2.shape)
            out.append((a, ga.reshape(a.data.shape)))
        if b.requires_grad:
            if b2.ndim == 2 and g2.ndim > 2:
                # stacked x, plain weight: fold the batch into one product
                k = a2.shape[-1]
                gb = a2.reshape(-1, k).T @ g2.reshape(-1, g2.shape[-1])
            else:
                gb = _unbroadcast(a2.swapaxes(-1, -2) @ g2, b2.shape)
            out.append((b, gb.reshape(b.data.shape)))
        return out

    return _node(out_data, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# Normalization and attention building blocks
# ---------------------------------------------------------------------------


def softmax(a, axis=-1):
    """Numerically stabilized softmax along `axis`."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return [(a, out_data * (g - dot))]

    return _node(out_data, (a,), grad_fn)


def softmax_orderinv(a, axis=-1):
    """Softmax whose denominator is order-invariant along `axis`.

    The max subtraction is treated as a constant, which is exact for the
    softmax value and gradient.
    """
    a = as_tensor(a)
    m = Tensor(a.data.max(axis=axis, keepdims=True))
    e = exp(a - m)
    return div(e, sorted_sum(e, axis=axis, keepdims=True))


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def grad_fn(g):
        return [(a, g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))]

    return _node(out_data, (a,), grad_fn)


def linear(x, weight, bias=None):
    """Affine map along the last axis: x @ weight (+ bias)."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def layer_norm(x, gain, bias, eps=1e-12):
    """Zero-mean unit-variance normalization over the last axis, then affine.

    The epsilon only guards exact zero variance; float64 keeps the
    normalized variance within ~1e-12 of 1 for any non-degenerate input.
    """
    x = as_tensor(x)
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


def multi_head_attention(q, k, v, heads, params, order_invariant=False):
    """Scaled dot-product attention with per-head projections.

    q: (B, Lq, d), k and v: (B, Lk, d). `params` maps wq, bq, wk, bk, wv,
    bv, wo, bo to tensors. Returns (output (B, Lq, d), weights
    (B, heads, Lq, Lk)); the weights are always materialized so callers can
    export attention maps without a second pass.

    order_invariant=True computes every reduction over the key axis in a
    key-permutation-invariant way (see sorted_sum); used when the key axis
    is a batch of peer objects whose order must not matter.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise RankMismatch(
            f"attention expects rank-3 q/k/v, got {q.shape}, {k.shape}, {v.shape}"
        )
    B, Lq, d = q.shape
    if k.shape[0] != B or v.shape[0] != B or k.shape[2] != d or v.shape[2] != d:
        raise ShapeMismatch(f"attention operands disagree: {q.shape}, {k.shape}, {v.shape}")
    if k.shape[1] != v.shape[1]:
        raise ShapeMismatch(f"key/value lengths disagree: {k.shape} vs {v.shape}")
    if d % heads != 0:
        raise HeadDivisibility(f"width {d} not divisible by {heads} heads")
    Lk = k.shape[1]
    dh = d // heads

    def split(x, L):
        return swapaxes(reshape(x, (B, L, heads, dh)), 1, 2)

    Q = split(linear(q, params["wq"], params["bq"]), Lq)
    K = split(linear(k, params["wk"], params["bk"]), Lk)
    V = split(linear(v, params["wv"], params["bv"]), Lk)

    scores = mul(matmul(Q, swapaxes(K, -1, -2)), 1.0 / math.sqrt(dh))
    if order_invariant:
        weights = softmax_orderinv(scores, axis=-1)
        ctx = _attend_orderinv(weights, V)
    else:
        weights = softmax(scores, axis=-1)
        ctx = matmul(weights, V)

    merged = reshape(swapaxes(ctx, 1, 2), (B, Lq, d))
    return linear(merged, params["wo"], params["bo"]), weights


# Cap on the expanded (B, H, Lq, Lk, dh) product used by the order-invariant
# contraction; larger inputs are processed in chunks along the batch axis.
_ATTEND_CHUNK_ELEMS = 8_000_000


def _attend_orderinv(weights, values):
    """weights (B,H,Lq,Lk) x values (B,H,Lk,dh) with sorted-sum contraction."""
    B, H, Lq, Lk = weights.shape
    dh = values.shape[-1]
    per_batch = H * Lq * Lk * dh
    chunk = max(1, _ATTEND_CHUNK_ELEMS // max(per_batch, 1))

    def contract(w, v):
        prod = mul(reshape(w, w.shape + (1,)), reshape(v, (v.shape[0], H, 1, Lk, dh)))
        return sorted_sum(prod, axis=3)

    if chunk >= B:
        return contract(weights, values)
    pieces = []
    for lo in range(0, B, chunk):
        sl = slice(lo, min(lo + chunk, B))
        pieces.append(contract(getitem(weights, sl), getitem(values, sl)))
    return concat(pieces, axis=0)


def cross_entropy(logits, labels):
    """Mean cross-entropy of integer labels under the final-axis softmax."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    ls = log_softmax(logits, axis=-1)
    return mul(tsum(mul(ls, onehot)), -1.0 / n)


# ---------------------------------------------------------------------------
# Backpropagation
# ---------------------------------------------------------------------------


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on everything reachable from a scalar loss.

    Gradients accumulate across calls; clear with ``zero_grads`` between
    optimization steps.
    """
    loss = as_tensor(loss)
    if loss.data.size != 1:
        raise NonScalarLoss(f"backward needs a scalar, got shape {loss.shape}")
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        # grads are never mutated in place, so sharing buffers is safe
        node.grad = g if node.grad is None else node.grad + g
        if node._grad_fn is None:
            continue
        for parent, pg in node._grad_fn(g):
            pg = np.asarray(pg, dtype=np.float64)
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def zero_grads(params):
    """Clear gradients on an iterable (or name mapping) of tensors."""
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None
