"""Local object branch, the gated-residual baseline block and the prediction heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from boxprior.errors import ShapeError
from boxprior.fusion.features import FeatureStack
from boxprior.geometry import BoundingBox2D, Projection, box2d_mask
from boxprior.numerics import tensor as nt
from boxprior.numerics.layers import (
    AttentionParams,
    MlpParams,
    mlp_forward,
    multihead_attention,
    segment_attention,
)
from boxprior.numerics.tensor import Tensor


class Scores(NamedTuple):
    logits: Tensor
    probs: Tensor


def fuse_layer(stack: FeatureStack, layer: int, learner: MlpParams) -> Tensor:
    """``[learner(3D in-view features) | 2D features]`` for one layer (0-based)."""
    f3d = stack.features3d_fov[layer]
    if learner.in_dim != f3d.shape[1]:
        raise ShapeError(f"learner expects {learner.in_dim} columns, layer {layer} has {f3d.shape[1]}")
    return nt.concat_cols([mlp_forward(learner, f3d), stack.features2d[layer]])


def fuse_multiscale(fused: Sequence[Tensor], downsampler: MlpParams) -> Tensor:
    """Concatenate all fused layers and map them back to the hidden size."""
    width = sum(f.shape[1] for f in fused)
    if width != downsampler.in_dim:
        raise ShapeError(f"downsampler expects {downsampler.in_dim} columns, got {width}")
    return mlp_forward(downsampler, nt.concat_cols(fused))


@dataclass
class BoxFeatureSet:
    box: BoundingBox2D
    rows: np.ndarray  # positions in the in-view (projection-ordered) point set
    source_index: np.ndarray  # rows of the original cloud
    features: Tensor  # (N_box, D)
    labels: np.ndarray  # (N_box,)

    def __len__(self) -> int:
        return self.rows.shape[0]


def select_box_features(fused: Tensor, projection: Projection, box: BoundingBox2D, labels) -> BoxFeatureSet:
    """Rows of ``fused`` whose projected point lies strictly inside ``box``.

    ``labels`` is indexed by the original cloud row.
    """
    if fused.shape[0] != len(projection):
        raise ShapeError("fused features must align with the projected points")
    rows = np.flatnonzero(box2d_mask(projection, box))
    source = projection.source_index[rows]
    return BoxFeatureSet(box, rows, source, nt.take_rows(fused, rows), np.asarray(labels)[source])


def class_aware_attention(
    bfs: BoxFeatureSet, table: Tensor, params: AttentionParams, epsilon: float = 1e-8
) -> Tensor | None:
    """Attention whose keys are point/box class-embedding cosine similarities.

    Returns None for an empty box, which then contributes nothing.
    """
    n = len(bfs)
    if n == 0:
        return None
    point_emb = nt.take_rows(table, bfs.labels)
    box_emb = nt.take_rows(table, np.full(n, bfs.box.class_id))
    similarity = nt.cosine_similarity(point_emb, box_emb, epsilon)
    return multihead_attention(params, point_emb, similarity, bfs.features)


def class_aware_attention_boxes(
    features: Tensor,
    labels: np.ndarray,
    bounds: np.ndarray,
    box_classes: Sequence[int],
    table: Tensor,
    params: AttentionParams,
    epsilon: float = 1e-8,
) -> Tensor:
    """``class_aware_attention`` for many boxes stacked row-wise.

    Box ``b`` owns rows ``bounds[b]:bounds[b+1]`` of ``features`` and
    ``labels``; boxes never attend across each other.
    """
    bounds = np.asarray(bounds, dtype=np.int64)
    if len(box_classes) != len(bounds) - 1:
        raise ShapeError("one class per box is required")
    point_emb = nt.take_rows(table, labels)
    box_emb = nt.take_rows(table, np.repeat(np.asarray(box_classes, dtype=np.int64), np.diff(bounds)))
    similarity = nt.cosine_similarity(point_emb, box_emb, epsilon)
    return segment_attention(params, point_emb, similarity, features, bounds)


def _classify(features: Tensor, classifier: MlpParams) -> Scores:
    logits = mlp_forward(classifier, features)
    return Scores(logits, nt.softmax_rows(logits))


def branch_predict(attn: Tensor, classifier: MlpParams) -> Scores:
    """Class probabilities of the object branch for every point in a box."""
    return _classify(attn, classifier)


def predict_3d_layer(stack: FeatureStack, layer: int, classifier: MlpParams) -> Scores:
    """Class probabilities of the 3D branch at one layer, over the in-view points."""
    return _classify(stack.features3d_fov[layer], classifier)


def msfskd_fuse(f2d, f2d3d, mlp_gate: MlpParams, mlp_value: MlpParams) -> Tensor:
    """Gated residual ``f2d + sigmoid(gate(f2d3d)) * value(f2d3d)``."""
    f2d, f2d3d = nt.as_tensor(f2d), nt.as_tensor(f2d3d)
    gate = mlp_forward(mlp_gate, f2d3d)
    value = mlp_forward(mlp_value, f2d3d)
    if gate.shape != f2d.shape or value.shape != f2d.shape:
        raise ShapeError(f"gate {gate.shape} / value {value.shape} must match 2D features {f2d.shape}")
    return f2d + nt.sigmoid(gate) * value


def msfskd_inputs(stack: FeatureStack, layer: int, learner: MlpParams) -> Tensor:
    """``[2D features | learner(3D in-view features)]``, the baseline's fused input."""
    return nt.concat_cols([stack.features2d[layer], mlp_forward(learner, stack.features3d_fov[layer])])
