"""Small reverse-mode autodiff over dense float64 matrices.

Each operation records its parents and a closure that maps the output
gradient to parent gradients. ``Tensor.backward`` walks the recorded graph
in reverse topological order. Nodes whose inputs need no gradient are not
recorded, so constants and detached values cost nothing on the way back.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from boxprior.errors import ShapeError
from boxprior.numerics import ops


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if p.requires_grad)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: mul(self, -1.0)

    def __truediv__(self, other: float):
        return mul(self, 1.0 / other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _node(data, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), vjp)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def total(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.sum(), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean_of(scalars: Sequence[Tensor]) -> Tensor:
    scalars = [as_tensor(s) for s in scalars]
    n = len(scalars)
    value = sum(float(s.data) for s in scalars) / n
    return _node(np.float64(value), scalars, lambda g: tuple(np.float64(g / n) for _ in scalars))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = ops.sigmoid(a.data)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def concat_cols(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if len({p.shape[0] for p in parts}) != 1:
        raise ShapeError("concat_cols needs equal row counts")
    edges = np.cumsum([0] + [p.shape[1] for p in parts])
    return _node(
        np.concatenate([p.data for p in parts], axis=1),
        parts,
        lambda g: tuple(g[:, lo:hi] for lo, hi in zip(edges[:-1], edges[1:])),
    )


def take_rows(a, index) -> Tensor:
    """Gather rows; repeated indices accumulate their gradients."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(a.data)
        if index.size:
            order = np.argsort(index, kind="stable")
            ids, starts = np.unique(index[order], return_index=True)
            out[ids] = np.add.reduceat(g[order], starts, axis=0)
        return (out,)

    return _node(a.data[index], (a,), vjp)


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    y = ops.softmax_rows(a.data)
    return _node(y, (a,), lambda g: (ops.softmax_rows_vjp(y, g),))


def cosine_similarity(a, b, epsilon: float = 1e-8) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    y = ops.cosine_similarity(a.data, b.data, epsilon)
    return _node(y, (a, b), lambda g: ops.cosine_similarity_vjp(a.data, b.data, epsilon, g))


def cross_entropy(logits, labels) -> Tensor:
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    value = ops.cross_entropy(logits.data, labels)
    return _node(np.float64(value), (logits,), lambda g: (ops.cross_entropy_vjp(logits.data, labels, float(g)),))


def kl_divergence(p, q) -> Tensor:
    """KL(p || q) with ``p`` held constant; gradients reach ``q`` only."""
    p = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    q = as_tensor(q)
    value = ops.kl_divergence(p, q.data)
    return _node(np.float64(value), (q,), lambda g: (ops.kl_divergence_vjp_q(p, q.data, float(g)),))


def lovasz_softmax(probs, labels) -> Tensor:
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    value = ops.lovasz_softmax(probs.data, labels)
    return _node(np.float64(value), (probs,), lambda g: (ops.lovasz_softmax_vjp(probs.data, labels, float(g)),))


def concat_rows(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if len({p.shape[1:] for p in parts}) != 1:
        raise ShapeError("concat_rows needs equal column counts")
    edges = np.cumsum([0] + [p.shape[0] for p in parts])
    return _node(
        np.concatenate([p.data for p in parts], axis=0),
        parts,
        lambda g: tuple(g[lo:hi] for lo, hi in zip(edges[:-1], edges[1:])),
    )


def _segment_row_weights(bounds, n: int) -> np.ndarray:
    """Row weights that turn a weighted row sum into a mean of per-segment means."""
    bounds = np.asarray(bounds, dtype=np.int64)
    sizes = np.diff(bounds)
    if bounds[0] != 0 or bounds[-1] != n or sizes.size == 0 or (sizes <= 0).any():
        raise ShapeError("segment bounds must split the rows into non-empty contiguous runs")
    return np.repeat(1.0 / (sizes.size * sizes), sizes)


def cross_entropy_segments(logits, labels, bounds) -> Tensor:
    """Mean over row segments of the per-segment mean cross-entropy."""
    logits = as_tensor(logits)
    n, c = logits.shape
    labels = ops._check_labels(labels, n, c)
    w = _segment_row_weights(bounds, n)
    rows = np.arange(n)
    nll = -ops.log_softmax_rows(logits.data)[rows, labels]

    def vjp(g):
        grad = ops.softmax_rows(logits.data)
        grad[rows, labels] -= 1.0
        return (grad * (w * float(g))[:, None],)

    return _node(np.float64(w @ nll), (logits,), vjp)


def kl_divergence_segments(p, q, bounds) -> Tensor:
    """Mean over row segments of KL(p || q); ``p`` is held constant."""
    p = ops._check_stochastic(p.data if isinstance(p, Tensor) else p, "p")
    q = as_tensor(q)
    qd = ops._check_stochastic(q.data, "q")
    if p.shape != qd.shape:
        raise ShapeError(f"kl shapes differ: {p.shape} vs {qd.shape}")
    w = _segment_row_weights(bounds, p.shape[0])
    floor = ops.PROB_FLOOR
    rows = (p * (np.log(np.maximum(p, floor)) - np.log(np.maximum(qd, floor)))).sum(axis=1)

    def vjp(g):
        grad = np.where(qd > floor, -p / np.maximum(qd, floor), 0.0)
        return (grad * (w * float(g))[:, None],)

    return _node(np.float64(w @ rows), (q,), vjp)


def lovasz_softmax_segments(probs, labels, bounds) -> Tensor:
    """Mean over row segments of the per-segment Lovasz-softmax loss."""
    probs = as_tensor(probs)
    n, c = probs.shape
    labels = ops._check_labels(labels, n, c)
    bounds = np.asarray(bounds, dtype=np.int64)
    _segment_row_weights(bounds, n)
    spans = list(zip(bounds[:-1], bounds[1:]))
    value = np.mean([ops.lovasz_softmax(probs.data[lo:hi], labels[lo:hi]) for lo, hi in spans])

    def vjp(g):
        share = float(g) / len(spans)
        grad = np.empty_like(probs.data)
        for lo, hi in spans:
            grad[lo:hi] = ops.lovasz_softmax_vjp(probs.data[lo:hi], labels[lo:hi], share)
        return (grad,)

    return _node(np.float64(value), (probs,), vjp)
