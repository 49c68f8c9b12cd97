"""Trainable parameters of the toy encoders, the object branch and the 3D classifiers."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from boxprior.fusion.config import TrainConfig
from boxprior.numerics import tensor as nt
from boxprior.numerics.layers import AttentionParams, MlpParams, init_attention, init_mlp
from boxprior.numerics.tensor import Tensor

POINT_INPUTS = 4  # x, y, z, intensity
PIXEL_INPUTS = 3  # RGB mean


@dataclass
class ModelParams:
    encoder3d: MlpParams  # tapped after every layer
    encoders2d: list[MlpParams]  # one per scale
    learners: list[MlpParams]
    downsampler: MlpParams
    class_embeddings: Tensor  # (c, D)
    attention: AttentionParams
    branch_classifier: MlpParams
    classifiers3d: list[MlpParams]

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.encoder3d.named_tensors("encoder3d.")
        for l, m in enumerate(self.encoders2d):
            yield from m.named_tensors(f"encoders2d.{l}.")
        for l, m in enumerate(self.learners):
            yield from m.named_tensors(f"learners.{l}.")
        yield from self.downsampler.named_tensors("downsampler.")
        yield "class_embeddings", self.class_embeddings
        yield from self.attention.named_tensors("attention.")
        yield from self.branch_classifier.named_tensors("branch_classifier.")
        for l, m in enumerate(self.classifiers3d):
            yield from m.named_tensors(f"classifiers3d.{l}.")

    def branch_only_names(self) -> list[str]:
        """Parameters that feed the object branch but not the 3D predictions."""
        shared = ("encoder3d.", "classifiers3d.")
        return [name for name, _ in self.named_tensors() if not name.startswith(shared)]

    def classifier3d_names(self) -> list[str]:
        return [name for name, _ in self.named_tensors() if name.startswith("classifiers3d.")]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        if set(own) != set(state):
            raise KeyError(f"parameter names differ: {sorted(set(own) ^ set(state))}")
        for name, t in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != t.shape:
                raise ValueError(f"{name}: shape {value.shape} != {t.shape}")
            t.data = value.copy()

    def save(self, path) -> None:
        with open(Path(path), "wb") as fh:
            np.savez(fh, **self.state_dict())

    def load(self, path) -> None:
        with np.load(Path(path)) as data:
            self.load_state_dict({k: data[k] for k in data.files})


def unit_rows(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    m = rng.standard_normal((rows, cols))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def init_model(cfg: TrainConfig, rng: np.random.Generator | None = None) -> ModelParams:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    widths = list(cfg.widths)
    return ModelParams(
        encoder3d=init_mlp(rng, [POINT_INPUTS, *widths], ["relu"] * cfg.layers),
        encoders2d=[init_mlp(rng, [PIXEL_INPUTS, w], ["relu"]) for w in widths],
        learners=[init_mlp(rng, [w, w], ["relu"]) for w in widths],
        downsampler=init_mlp(rng, [2 * sum(widths), cfg.hidden], ["relu"]),
        class_embeddings=nt.parameter(unit_rows(rng, cfg.classes, cfg.hidden)),
        attention=init_attention(rng, cfg.hidden, cfg.heads),
        branch_classifier=init_mlp(rng, [cfg.hidden, cfg.classes], ["none"]),
        classifiers3d=[init_mlp(rng, [w, cfg.classes], ["none"]) for w in widths],
    )
