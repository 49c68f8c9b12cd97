"""Segmentation, box-distillation and total losses; IoU metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from boxprior.errors import LossUndefinedError, ShapeError
from boxprior.fusion.branch import Scores
from boxprior.numerics import tensor as nt
from boxprior.numerics.tensor import Tensor

DEFAULT_LAMBDA = 0.1


@dataclass(frozen=True)
class LossReport:
    seg_loss: float
    distill_loss: float
    total_loss: float
    per_class_iou: tuple[float, ...] = ()
    miou: float = float("nan")


@dataclass
class Losses:
    seg: Tensor
    distill: Tensor
    total: Tensor
    boxes: int

    def report(self, per_class_iou=(), miou=float("nan")) -> LossReport:
        return LossReport(
            float(self.seg.data), float(self.distill.data), float(self.total.data), tuple(per_class_iou), miou
        )


def compute_losses(
    branch: Sequence[Scores],
    layer_probs: Sequence[Tensor],
    memberships: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    lam: float = DEFAULT_LAMBDA,
) -> Losses:
    """Box-averaged segmentation loss plus ``lam`` times the distillation loss.

    ``branch[b]`` holds the object-branch scores of box ``b``, whose points
    are rows ``memberships[b]`` of every ``layer_probs[l]`` (in-view 3D
    predictions) with ground truth ``labels[b]``. The distillation term is
    the KL from the branch (held constant) to each 3D layer, averaged over
    boxes and layers. Empty boxes are skipped.
    """
    if not (len(branch) == len(memberships) == len(labels)):
        raise ShapeError("branch scores, memberships and labels must have one entry per box")
    keep = [b for b in range(len(branch)) if len(memberships[b])]
    if not keep:
        raise LossUndefinedError("no non-empty box in the batch")
    bounds = np.cumsum([0] + [len(memberships[b]) for b in keep])
    return stacked_losses(
        Scores(nt.concat_rows([branch[b].logits for b in keep]), nt.concat_rows([branch[b].probs for b in keep])),
        layer_probs,
        np.concatenate([np.asarray(memberships[b], dtype=np.int64) for b in keep]),
        np.concatenate([np.asarray(labels[b], dtype=np.int64) for b in keep]),
        bounds,
        lam,
    )


def stacked_losses(
    branch: Scores,
    layer_probs: Sequence[Tensor],
    rows: np.ndarray,
    labels: np.ndarray,
    bounds: np.ndarray,
    lam: float = DEFAULT_LAMBDA,
    teacher: np.ndarray | None = None,
) -> Losses:
    """``compute_losses`` on boxes stacked row-wise; box ``b`` owns ``bounds[b]:bounds[b+1]``.

    ``teacher`` overrides the distillation target (by default the branch
    probabilities themselves). Freezing it lets a finite-difference check see
    the same function that the stopped gradient differentiates.
    """
    bounds = np.asarray(bounds, dtype=np.int64)
    if len(bounds) < 2:
        raise LossUndefinedError("no non-empty box in the batch")
    if not layer_probs:
        raise ShapeError("at least one 3D layer prediction is required")
    if branch.probs.shape[0] != len(rows) or len(labels) != len(rows):
        raise ShapeError("branch scores, rows and labels must align")
    seg = nt.cross_entropy_segments(branch.logits, labels, bounds) + nt.lovasz_softmax_segments(
        branch.probs, labels, bounds
    )
    teacher = branch.probs.data if teacher is None else teacher
    distill = nt.mean_of([nt.kl_divergence_segments(teacher, nt.take_rows(p, rows), bounds) for p in layer_probs])
    return Losses(seg, distill, total_loss(seg, distill, lam), len(bounds) - 1)


def total_loss(seg: Tensor, distill: Tensor, lam: float = DEFAULT_LAMBDA) -> Tensor:
    return seg + nt.mul(distill, lam)


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    """``conf[g, p]`` counts points with ground truth g predicted as p."""
    pred, gt = np.asarray(pred, dtype=np.int64), np.asarray(gt, dtype=np.int64)
    return np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where the class never occurs) and the mean over ground-truth classes."""
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    present = conf.sum(axis=1) > 0
    miou = float(iou[present].mean()) if present.any() else math.nan
    return iou, miou
