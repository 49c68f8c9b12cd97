"""Dense float64 forward kernels and their vector-Jacobian products.

Everything here works on plain ``numpy`` arrays. The differentiable
wrappers in :mod:`boxprior.numerics.tensor` call these functions.
"""

from __future__ import annotations

import numpy as np

from boxprior.errors import LabelError, NormalizationError, ShapeError

PROB_FLOOR = 1e-12


def _matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def softmax_rows(m) -> np.ndarray:
    m = _matrix(m)
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_vjp(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def log_softmax_rows(m) -> np.ndarray:
    m = _matrix(m)
    shifted = m - m.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def sigmoid(m) -> np.ndarray:
    """Entrywise logistic function, stable for large |x|."""
    x = np.asarray(m, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(m) -> np.ndarray:
    return np.maximum(np.asarray(m, dtype=np.float64), 0.0)


def cosine_similarity(a, b, epsilon: float = 1e-8) -> np.ndarray:
    """Row-wise ``a.b / max(|a| |b|, eps)``."""
    a, b = _matrix(a), _matrix(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity shapes differ: {a.shape} vs {b.shape}")
    denom = np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), epsilon)
    return (a * b).sum(axis=1) / denom


def cosine_similarity_vjp(a, b, epsilon, g):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    prod = na * nb
    dot = (a * b).sum(axis=1)
    guarded = prod <= epsilon
    denom = np.where(guarded, epsilon, prod)
    ga = b / denom[:, None]
    gb = a / denom[:, None]
    live = ~guarded
    # d(|a||b|)/da = |b| a / |a|; only when the norm product is the denominator.
    scale = np.zeros_like(dot)
    scale[live] = dot[live] / prod[live] ** 2
    ga[live] -= (scale[live] * nb[live] / na[live])[:, None] * a[live]
    gb[live] -= (scale[live] * na[live] / nb[live])[:, None] * b[live]
    return ga * g[:, None], gb * g[:, None]


def _check_labels(labels, n: int, c: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise LabelError("labels must be integers")
        labels = labels.astype(np.int64)
    if n and (labels.min() < 0 or labels.max() >= c):
        raise LabelError(f"labels must lie in [0, {c})")
    return labels.astype(np.int64)


def cross_entropy(pred_logits, labels) -> float:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = _matrix(pred_logits)
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    if n == 0:
        raise ShapeError("cross_entropy of an empty batch")
    return float(-log_softmax_rows(logits)[np.arange(n), labels].mean())


def cross_entropy_vjp(logits, labels, g: float) -> np.ndarray:
    n = logits.shape[0]
    grad = softmax_rows(logits)
    grad[np.arange(n), labels] -= 1.0
    return grad * (g / n)


def _check_stochastic(m, name: str) -> np.ndarray:
    m = _matrix(m)
    if m.size and (m.min() < 0 or np.abs(m.sum(axis=1) - 1.0).max() > 1e-9):
        raise NormalizationError(f"rows of {name} are not probability vectors")
    return m


def kl_divergence(p, q) -> float:
    """Mean over rows of ``sum p (log p - log q)``, probabilities floored at 1e-12."""
    p = _check_stochastic(p, "p")
    q = _check_stochastic(q, "q")
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence shapes differ: {p.shape} vs {q.shape}")
    pc = np.maximum(p, PROB_FLOOR)
    qc = np.maximum(q, PROB_FLOOR)
    return float((p * (np.log(pc) - np.log(qc))).sum(axis=1).mean())


def kl_divergence_vjp_q(p, q, g: float) -> np.ndarray:
    n = p.shape[0]
    grad = np.where(q > PROB_FLOOR, -p / np.maximum(q, PROB_FLOOR), 0.0)
    return grad * (g / n)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Increments of the Jaccard loss along a sorted ground-truth mask."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def _lovasz_terms(probs: np.ndarray, labels: np.ndarray):
    """Yield (class, errors, fg, order, increments) for each class present in labels."""
    for cls in np.unique(labels):
        fg = (labels == cls).astype(np.float64)
        errors = np.abs(fg - probs[:, cls])
        order = np.argsort(-errors, kind="stable")
        yield cls, errors, fg, order, lovasz_grad(fg[order])


def lovasz_softmax(probs, labels) -> float:
    """Lovasz-softmax loss averaged over the classes present in ``labels``."""
    probs = _check_stochastic(probs, "probs")
    n, c = probs.shape
    labels = _check_labels(labels, n, c)
    if n == 0:
        raise ShapeError("lovasz_softmax of an empty batch")
    losses = [errors[order] @ inc for _, errors, _, order, inc in _lovasz_terms(probs, labels)]
    return float(np.mean(losses))


def lovasz_softmax_vjp(probs, labels, g: float) -> np.ndarray:
    grad = np.zeros_like(probs)
    terms = list(_lovasz_terms(probs, labels))
    for cls, _, fg, order, inc in terms:
        slope = np.empty_like(inc)
        slope[order] = inc
        # d|fg - p|/dp is -1 on foreground and +1 elsewhere.
        grad[:, cls] += slope * np.where(fg > 0, -1.0, 1.0)
    return grad * (g / len(terms))
