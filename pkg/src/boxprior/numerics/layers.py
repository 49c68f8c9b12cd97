"""Parameterized building blocks: MLPs and the class-aware multi-head attention."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from boxprior.errors import ShapeError
from boxprior.numerics import ops
from boxprior.numerics import tensor as nt
from boxprior.numerics.tensor import Tensor

ACTIVATIONS = ("relu", "sigmoid", "none")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class MlpLayer:
    weight: Tensor  # (in, out)
    bias: Tensor  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = nt.as_tensor(self.weight)
        self.bias = nt.as_tensor(self.bias)
        if self.weight.data.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"weight {self.weight.shape} and bias {self.bias.shape} disagree")


@dataclass
class MlpParams:
    layers: list[MlpLayer]

    def __post_init__(self):
        for i in range(len(self.layers) - 1):
            if self.layers[i].weight.shape[1] != self.layers[i + 1].weight.shape[0]:
                raise ShapeError(f"layer {i} output does not match layer {i + 1} input")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield f"{prefix}{i}.weight", layer.weight
            yield f"{prefix}{i}.bias", layer.bias


def init_mlp(rng: np.random.Generator, dims: Sequence[int], activations: Sequence[str]) -> MlpParams:
    """Glorot-uniform weights, zero biases; ``dims`` lists every layer width."""
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    layers = [
        MlpLayer(nt.parameter(glorot_uniform(rng, d_in, d_out)), nt.parameter(np.zeros(d_out)), act)
        for d_in, d_out, act in zip(dims[:-1], dims[1:], activations)
    ]
    return MlpParams(layers)


def apply_activation(x: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return nt.relu(x)
    if activation == "sigmoid":
        return nt.sigmoid(x)
    return x


def mlp_forward(params: MlpParams, x) -> Tensor:
    x = nt.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"MLP expects {params.in_dim} input columns, got shape {x.shape}")
    for layer in params.layers:
        x = apply_activation(x @ layer.weight + layer.bias, layer.activation)
    return x


def mlp_taps(params: MlpParams, x) -> list[Tensor]:
    """Outputs of every layer, in order."""
    x = nt.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"MLP expects {params.in_dim} input columns, got shape {x.shape}")
    taps = []
    for layer in params.layers:
        x = apply_activation(x @ layer.weight + layer.bias, layer.activation)
        taps.append(x)
    return taps


@dataclass
class AttentionHead:
    w_query: Tensor  # (D, D/h)
    w_key: Tensor  # (1, D/h)
    w_value: Tensor  # (D, D/h)


@dataclass
class AttentionParams:
    heads: list[AttentionHead]

    def __post_init__(self):
        if not self.heads:
            raise ShapeError("attention needs at least one head")
        d, width = self.heads[0].w_query.shape
        for h in self.heads:
            if h.w_query.shape != (d, width) or h.w_value.shape != (d, width) or h.w_key.shape != (1, width):
                raise ShapeError("inconsistent attention head shapes")
        if width * len(self.heads) != d:
            raise ShapeError(f"{len(self.heads)} heads of width {width} do not tile D={d}")

    @property
    def dim(self) -> int:
        return self.heads[0].w_query.shape[0]

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, h in enumerate(self.heads):
            yield f"{prefix}{i}.w_query", h.w_query
            yield f"{prefix}{i}.w_key", h.w_key
            yield f"{prefix}{i}.w_value", h.w_value


def init_attention(rng: np.random.Generator, dim: int, heads: int) -> AttentionParams:
    if heads < 1 or dim % heads:
        raise ShapeError(f"D={dim} is not divisible by h={heads}")
    width = dim // heads
    return AttentionParams(
        [
            AttentionHead(
                nt.parameter(glorot_uniform(rng, dim, width)),
                nt.parameter(glorot_uniform(rng, 1, width)),
                nt.parameter(glorot_uniform(rng, dim, width)),
            )
            for _ in range(heads)
        ]
    )


def attention_weights(params: AttentionParams, query, key_scalar) -> list[Tensor]:
    """Row-stochastic N x N weight matrix of every head."""
    query = nt.as_tensor(query)
    keys = nt.reshape(nt.as_tensor(key_scalar), (-1, 1))
    n, d = query.shape
    if d != params.dim or keys.shape[0] != n:
        raise ShapeError(f"query {query.shape} / keys {keys.shape} do not fit D={params.dim}")
    scale = 1.0 / math.sqrt(d)
    return [nt.softmax_rows((query @ h.w_query) @ (keys @ h.w_key).T * scale) for h in params.heads]


def multihead_attention(params: AttentionParams, query, key_scalar, value) -> Tensor:
    """Concatenated heads ``softmax(Q Wq (k Wk)^T / sqrt(D)) V Wv``.

    ``key_scalar`` holds one scalar per row (an N x 1 key matrix). Each head
    is D/h wide and there is no output projection, so the result is N x D.
    """
    value = nt.as_tensor(value)
    if value.shape != (nt.as_tensor(query).shape[0], params.dim):
        raise ShapeError(f"value shape {value.shape} does not match query rows and D={params.dim}")
    weights = attention_weights(params, query, key_scalar)
    return nt.concat_cols([w @ (value @ h.w_value) for w, h in zip(weights, params.heads)])


def segment_attention(params: AttentionParams, query, key_scalar, value, bounds) -> Tensor:
    """``multihead_attention`` applied independently to contiguous row segments.

    Rows ``bounds[i]:bounds[i+1]`` only attend to each other. The whole batch is
    a single graph node, which keeps the tape short when there are many boxes.
    """
    query, value = nt.as_tensor(query), nt.as_tensor(value)
    keys = nt.reshape(nt.as_tensor(key_scalar), (-1, 1))
    n, d = query.shape
    if d != params.dim or keys.shape[0] != n or value.shape != (n, d):
        raise ShapeError(f"query {query.shape} / keys {keys.shape} / value {value.shape} do not fit D={d}")
    bounds = np.asarray(bounds, dtype=np.int64)
    nt._segment_row_weights(bounds, n)
    spans = [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
    scale = 1.0 / math.sqrt(d)
    q, k, v = query.data, keys.data, value.data
    cache = []
    outs = []
    for h in params.heads:
        qh, kh, vh = q @ h.w_query.data, k @ h.w_key.data, v @ h.w_value.data
        weights = [ops.softmax_rows(qh[s] @ kh[s].T * scale) for s in spans]
        out = np.empty_like(qh)
        for s, a in zip(spans, weights):
            out[s] = a @ vh[s]
        cache.append((qh, kh, vh, weights))
        outs.append(out)

    def vjp(g):
        gq, gk, gv = np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)
        gw = []
        width = params.heads[0].w_query.shape[1]
        for i, (h, (qh, kh, vh, weights)) in enumerate(zip(params.heads, cache)):
            go = g[:, i * width : (i + 1) * width]
            dq, dk, dv = np.empty_like(qh), np.empty_like(kh), np.empty_like(vh)
            for s, a in zip(spans, weights):
                dv[s] = a.T @ go[s]
                ds = ops.softmax_rows_vjp(a, go[s] @ vh[s].T) * scale
                dq[s] = ds @ kh[s]
                dk[s] = ds.T @ qh[s]
            gq += dq @ h.w_query.data.T
            gk += dk @ h.w_key.data.T
            gv += dv @ h.w_value.data.T
            gw.extend([q.T @ dq, k.T @ dk, v.T @ dv])
        return (gq, gk, gv, *gw)

    parents = [query, keys, value]
    for h in params.heads:
        parents.extend([h.w_query, h.w_key, h.w_value])
    return nt._node(np.concatenate(outs, axis=1), parents, vjp)
