"""Toy multi-scale encoders standing in for the 3D and 2D backbones."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from boxprior.errors import ShapeError
from boxprior.fusion.model import ModelParams
from boxprior.geometry import PointCloud, Projection
from boxprior.numerics import tensor as nt
from boxprior.numerics.layers import mlp_forward, mlp_taps
from boxprior.numerics.tensor import Tensor

COORD_SCALE = 20.0  # meters per unit fed to the point encoder
INTENSITY_GAIN = 32.0  # spreads the [0, 1] reflectance around zero


@dataclass
class FeatureStack:
    """Per-layer features; every list has one entry per layer."""

    features2d: list[Tensor]  # (N_img, D_l)
    features3d_full: list[Tensor]  # (N, D_l)
    features3d_fov: list[Tensor]  # (N_img, D_l), rows in projection order

    @property
    def layers(self) -> int:
        return len(self.features2d)


def point_inputs(cloud: PointCloud) -> np.ndarray:
    """Scaled (x, y, z, intensity) rows fed to the point encoder."""
    return np.column_stack([cloud.xyz / COORD_SCALE, INTENSITY_GAIN * (cloud.intensity - 0.5)])


def scale_radius(layer: int) -> int:
    """Half window of the RGB box filter at 0-based ``layer``: 0, 1, 3, 7, ..."""
    return 2**layer - 1


def local_rgb_means(image: np.ndarray, pixels: np.ndarray, layers: int) -> list[np.ndarray]:
    """Mean RGB in [0, 1] of the window around each (col, row) pixel, one array per scale."""
    h, w, _ = image.shape
    integral = np.zeros((h + 1, w + 1, 3))
    integral[1:, 1:] = np.cumsum(np.cumsum(image.astype(np.float64) / 255.0, axis=0), axis=1)
    cols, rows = pixels[:, 0], pixels[:, 1]
    out = []
    for layer in range(layers):
        r = scale_radius(layer)
        r0, r1 = np.clip(rows - r, 0, h), np.clip(rows + r + 1, 0, h)
        c0, c1 = np.clip(cols - r, 0, w), np.clip(cols + r + 1, 0, w)
        total = integral[r1, c1] - integral[r0, c1] - integral[r1, c0] + integral[r0, c0]
        count = ((r1 - r0) * (c1 - c0)).astype(np.float64)
        out.append(total / count[:, None])
    return out


def encode_arrays(
    params: ModelParams, inputs3d: np.ndarray, rgb_means: list[np.ndarray], fov_index: np.ndarray
) -> FeatureStack:
    """Run both encoders on precomputed inputs.

    ``fov_index`` selects, in projection order, the rows of ``inputs3d``
    that landed in the image; ``rgb_means[l]`` is aligned with it.
    """
    layers = len(params.encoders2d)
    if len(rgb_means) != layers or len(params.encoder3d.layers) != layers:
        raise ShapeError(f"expected {layers} scales, got {len(rgb_means)}")
    if inputs3d.ndim != 2 or inputs3d.shape[1] != params.encoder3d.in_dim:
        raise ShapeError(f"point inputs must have {params.encoder3d.in_dim} columns")
    if any(m.shape != (len(fov_index), 3) for m in rgb_means):
        raise ShapeError("RGB means must align with the in-view points")
    full = mlp_taps(params.encoder3d, inputs3d)
    fov = [nt.take_rows(f, fov_index) for f in full]
    feats2d = [mlp_forward(enc, m) for enc, m in zip(params.encoders2d, rgb_means)]
    return FeatureStack(feats2d, full, fov)


def encode_toy(params: ModelParams, cloud: PointCloud, image: np.ndarray, projection: Projection) -> FeatureStack:
    """Per-point and per-pixel features matched through the projection."""
    rgb = local_rgb_means(image, projection.pixels(), len(params.encoders2d))
    return encode_arrays(params, point_inputs(cloud), rgb, projection.source_index)
