"""Forward pass over scene batches, SGD training and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from boxprior.errors import GenerationError, LossUndefinedError
from boxprior.fusion.branch import (
    Scores,
    branch_predict,
    class_aware_attention_boxes,
    fuse_layer,
    fuse_multiscale,
    predict_3d_layer,
)
from boxprior.fusion.config import TrainConfig
from boxprior.fusion.features import FeatureStack, encode_arrays, local_rgb_means, point_inputs
from boxprior.fusion.losses import LossReport, Losses, confusion_matrix, iou_from_confusion, stacked_losses
from boxprior.fusion.model import ModelParams, init_model
from boxprior.geometry import BoundingBox2D, box2d_mask
from boxprior.numerics import tensor as nt
from boxprior.numerics.gradcheck import GradReport, grad_check
from boxprior.numerics.layers import mlp_forward
from boxprior.scenedata import GeneratorConfig, SceneBundle, generate_scene, generate_scenes

log = logging.getLogger(__name__)


@dataclass
class PreparedScene:
    """Parameter-free inputs of one scene, computed once."""

    inputs3d: np.ndarray  # (N, 4)
    labels: np.ndarray  # (N,)
    fov_index: np.ndarray  # (N_img,) cloud rows in projection order
    rgb: list[np.ndarray]  # per scale, (N_img, 3)
    boxes: list[BoundingBox2D]
    box_rows: list[np.ndarray]  # per box, rows into the in-view set

    @property
    def fov_labels(self) -> np.ndarray:
        return self.labels[self.fov_index]


def prepare_scene(bundle: SceneBundle, layers: int) -> PreparedScene:
    proj = bundle.project()
    boxes = [b2 for _, _, b2 in bundle.annotated()]
    return PreparedScene(
        inputs3d=point_inputs(bundle.cloud),
        labels=bundle.labels,
        fov_index=proj.source_index,
        rgb=local_rgb_means(bundle.image, proj.pixels(), layers),
        boxes=boxes,
        box_rows=[np.flatnonzero(box2d_mask(proj, b)) for b in boxes],
    )


def collate(scenes: Sequence[PreparedScene]) -> PreparedScene:
    """Stack scenes into one point set; box rows are shifted accordingly."""
    if len(scenes) == 1:
        return scenes[0]
    n_off = np.cumsum([0] + [s.inputs3d.shape[0] for s in scenes])
    f_off = np.cumsum([0] + [s.fov_index.shape[0] for s in scenes])
    return PreparedScene(
        inputs3d=np.concatenate([s.inputs3d for s in scenes]),
        labels=np.concatenate([s.labels for s in scenes]),
        fov_index=np.concatenate([s.fov_index + o for s, o in zip(scenes, n_off)]),
        rgb=[np.concatenate([s.rgb[l] for s in scenes]) for l in range(len(scenes[0].rgb))],
        boxes=[b for s in scenes for b in s.boxes],
        box_rows=[r + o for s, o in zip(scenes, f_off) for r in s.box_rows],
    )


@dataclass
class ForwardResult:
    stack: FeatureStack
    fused: nt.Tensor
    rows: np.ndarray  # in-view rows of every non-empty box, stacked
    bounds: np.ndarray  # box b owns rows[bounds[b]:bounds[b+1]]
    branch: Scores  # object-branch scores, stacked like ``rows``
    layers3d: list[Scores]
    losses: Losses


def forward(
    params: ModelParams,
    batch: PreparedScene,
    lam: float,
    epsilon: float = 1e-8,
    teacher: np.ndarray | None = None,
) -> ForwardResult:
    stack = encode_arrays(params, batch.inputs3d, batch.rgb, batch.fov_index)
    fused = fuse_multiscale(
        [fuse_layer(stack, l, learner) for l, learner in enumerate(params.learners)], params.downsampler
    )
    keep = [b for b, r in enumerate(batch.box_rows) if len(r)]
    if not keep:
        raise LossUndefinedError("no annotated box has a projected point")
    rows = np.concatenate([batch.box_rows[b] for b in keep])
    bounds = np.cumsum([0] + [len(batch.box_rows[b]) for b in keep])
    labels = batch.fov_labels[rows]
    attn = class_aware_attention_boxes(
        nt.take_rows(fused, rows),
        labels,
        bounds,
        [batch.boxes[b].class_id for b in keep],
        params.class_embeddings,
        params.attention,
        epsilon,
    )
    branch = branch_predict(attn, params.branch_classifier)
    layers3d = [predict_3d_layer(stack, l, clf) for l, clf in enumerate(params.classifiers3d)]
    losses = stacked_losses(branch, [s.probs for s in layers3d], rows, labels, bounds, lam, teacher)
    return ForwardResult(stack, fused, rows, bounds, branch, layers3d, losses)


class SGD:
    """Plain gradient descent, no momentum."""

    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: ModelParams, learning_rate: float | None = None) -> None:
        lr = self.learning_rate if learning_rate is None else learning_rate
        for _, t in params.named_tensors():
            if t.grad is not None:
                t.data -= lr * t.grad


def zero_grad(params: ModelParams) -> None:
    for _, t in params.named_tensors():
        t.grad = None


def _report(result: ForwardResult, batch: PreparedScene, classes: int) -> LossReport:
    pred = result.layers3d[-1].probs.data.argmax(axis=1)
    iou, miou = iou_from_confusion(confusion_matrix(pred, batch.fov_labels, classes))
    return result.losses.report(tuple(float(x) for x in iou), miou)


def train_step(
    batch: PreparedScene,
    params: ModelParams,
    optimizer: SGD,
    lam: float,
    learning_rate: float | None = None,
    epsilon: float = 1e-8,
) -> LossReport:
    """One gradient step; the report describes the parameters before the update."""
    zero_grad(params)
    result = forward(params, batch, lam, epsilon)
    result.losses.total.backward()
    optimizer.step(params, learning_rate)
    return _report(result, batch, params.class_embeddings.shape[0])


def batches_per_epoch(num_scenes: int, batch_size: int) -> int:
    return math.ceil(num_scenes / batch_size)


def train(
    scenes: Sequence[SceneBundle],
    cfg: TrainConfig,
    params: ModelParams | None = None,
    on_step: Callable[[int, LossReport], None] | None = None,
) -> tuple[ModelParams, list[LossReport]]:
    """Train for ``cfg.epochs`` passes over ``scenes``; returns parameters and per-step reports."""
    params = params if params is not None else init_model(cfg)
    prepared = [prepare_scene(s, cfg.layers) for s in scenes]
    optimizer = SGD(cfg.learning_rate)
    order_rng = np.random.default_rng([cfg.seed, 1])
    history = []
    fixed = collate(prepared) if cfg.batch_size >= len(prepared) else None
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(prepared))
        for start in range(0, len(prepared), cfg.batch_size):
            batch = fixed or collate([prepared[i] for i in order[start : start + cfg.batch_size]])
            report = train_step(batch, params, optimizer, cfg.lam, epsilon=cfg.epsilon_cosine)
            history.append(report)
            if on_step is not None:
                on_step(len(history), report)
        log.debug("epoch %d total %.6g", epoch, history[-1].total_loss if history else float("nan"))
    return params, history


def predict_points(params: ModelParams, scene: SceneBundle | PreparedScene) -> np.ndarray:
    """Deepest-layer 3D class prediction for every point of the scene."""
    inputs = scene.inputs3d if isinstance(scene, PreparedScene) else point_inputs(scene.cloud)
    feats = mlp_forward(params.encoder3d, inputs)
    return mlp_forward(params.classifiers3d[-1], feats).data.argmax(axis=1)


def evaluate(scenes: Sequence[SceneBundle], params: ModelParams, cfg: TrainConfig) -> LossReport:
    """Losses on the scenes plus per-class IoU / mIoU of the deepest 3D classifier over all points."""
    prepared = [prepare_scene(s, cfg.layers) for s in scenes]
    batch = collate(prepared)
    result = forward(params, batch, cfg.lam, cfg.epsilon_cosine)
    pred = predict_points(params, batch)
    iou, miou = iou_from_confusion(confusion_matrix(pred, batch.labels, params.class_embeddings.shape[0]))
    return result.losses.report(tuple(float(x) for x in iou), miou)


def inbox_accuracy(scenes: Sequence[SceneBundle], params: ModelParams, cfg: TrainConfig) -> float:
    """Accuracy of the deepest 3D classifier on in-view points inside any annotated box."""
    correct = total = 0
    for scene in scenes:
        prep = prepare_scene(scene, cfg.layers)
        rows = np.unique(np.concatenate(prep.box_rows)) if prep.box_rows else np.zeros(0, np.int64)
        idx = prep.fov_index[rows]
        pred = predict_points(params, prep)[idx]
        correct += int((pred == prep.labels[idx]).sum())
        total += len(idx)
    return correct / total if total else math.nan


def synthetic_split(seed: int, count: int) -> tuple[list[SceneBundle], SceneBundle]:
    """``count`` training scenes and one held-out scene, all derived from ``seed``."""
    held_seed = int(np.random.SeedSequence([seed, 1]).generate_state(1, dtype=np.uint64)[0])
    return generate_scenes(seed, count), generate_scene(GeneratorConfig(seed=held_seed))


GRADCHECK_SCENE = GeneratorConfig(num_objects=2, points_per_object=(6, 14), background_points=60)
MAX_BOX_POINTS = 50


def gradcheck_batch(seed: int, layers: int) -> PreparedScene:
    """A small seeded scene whose boxes hold at most ``MAX_BOX_POINTS`` in-view points."""
    for attempt in range(100):
        cfg_seed = int(np.random.SeedSequence([seed, 2, attempt]).generate_state(1, dtype=np.uint64)[0])
        scene = prepare_scene(generate_scene(replace(GRADCHECK_SCENE, seed=cfg_seed)), layers)
        sizes = [len(r) for r in scene.box_rows]
        if any(sizes) and max(sizes) <= MAX_BOX_POINTS:
            return scene
    raise GenerationError(f"no small gradient-check scene for seed {seed}")


def loss_grad_check(
    cfg: TrainConfig, max_coords: int | None = 6, step: float = 1e-5, batch: PreparedScene | None = None
) -> GradReport:
    """Finite-difference check of the total loss against every parameter tensor.

    Parameters are freshly initialized from ``cfg.seed``; ``max_coords``
    coordinates per tensor are probed (all of them when None). The branch
    predictions used as the distillation target are frozen at the base point,
    since their gradient is stopped by design.
    """
    params = init_model(cfg)
    batch = batch if batch is not None else gradcheck_batch(cfg.seed, cfg.layers)
    teacher = forward(params, batch, cfg.lam, cfg.epsilon_cosine).branch.probs.data.copy()
    return grad_check(
        lambda: forward(params, batch, cfg.lam, cfg.epsilon_cosine, teacher).losses.total,
        list(params.named_tensors()),
        step=step,
        max_coords=max_coords,
        rng=np.random.default_rng([cfg.seed, 3]),
    )
