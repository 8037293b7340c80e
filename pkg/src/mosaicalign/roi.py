"""Region feature pooling from dense feature maps.

RoIAlign here is precomputed as a sparse weight matrix over feature cells:
for a fixed box the pooled output is a linear map of the feature grid, so
the op reduces to one (differentiable) matmul. Coordinates are continuous
and half-pixel aligned; no quantization anywhere.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import DenseFeatureMap
from .mosaic import Box
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RoiSpec:
    output_size: int = 1  # k x k bins
    sampling_points: int = 2  # per axis per bin

    def __post_init__(self):
        if self.output_size < 1 or self.sampling_points < 1:
            raise ValueError(f"invalid RoiSpec {self}")


def _bilinear_weights(h: int, w: int, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Interpolation weights over the h*w cell grid for each (y, x) point.

    Cell (i, j) is treated as a point sample at center (i + 0.5, j + 0.5);
    off-grid coordinates clamp to the border cells.
    """
    ys = np.clip(ys - 0.5, 0.0, h - 1.0)
    xs = np.clip(xs - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    weights = np.zeros((len(ys), h * w))
    rows = np.arange(len(ys))
    np.add.at(weights, (rows, y0 * w + x0), (1 - wy) * (1 - wx))
    np.add.at(weights, (rows, y0 * w + x1), (1 - wy) * wx)
    np.add.at(weights, (rows, y1 * w + x0), wy * (1 - wx))
    np.add.at(weights, (rows, y1 * w + x1), wy * wx)
    return weights


def roi_weight_matrix(
    box: Box, stride: int, grid_h: int, grid_w: int, spec: RoiSpec
) -> np.ndarray:
    """[k*k, h*w] averaging weights implementing RoIAlign for one box.

    Cached per (box, geometry); treat the result as read-only.
    """
    return _weight_matrix_cached(box.as_tuple(), stride, grid_h, grid_w, spec.output_size, spec.sampling_points)


def _weight_matrix_cached(box_tuple, stride, grid_h, grid_w, k_out, n_samp):
    key = (box_tuple, stride, grid_h, grid_w, k_out, n_samp)
    hit = _WEIGHT_CACHE.get(key)
    if hit is not None:
        return hit
    out = _weight_matrix(box_tuple, stride, grid_h, grid_w, k_out, n_samp)
    if len(_WEIGHT_CACHE) > 4096:
        _WEIGHT_CACHE.clear()
    _WEIGHT_CACHE[key] = out
    return out


_WEIGHT_CACHE: dict = {}


def _weight_matrix(box_tuple, stride, grid_h, grid_w, k_out, n_samp) -> np.ndarray:
    spec = RoiSpec(k_out, n_samp)
    bx0, by0, bx1, by1 = box_tuple
    box = Box(bx0, by0, bx1, by1)
    fx0, fy0 = box.x0 / stride, box.y0 / stride
    fx1, fy1 = box.x1 / stride, box.y1 / stride
    k, n = spec.output_size, spec.sampling_points
    bin_h = (fy1 - fy0) / k
    bin_w = (fx1 - fx0) / k
    out = np.zeros((k * k, grid_h * grid_w))
    offsets = (np.arange(n) + 0.5) / n
    for by in range(k):
        for bx in range(k):
            ys = np.repeat(fy0 + (by + offsets) * bin_h, n)
            xs = np.tile(fx0 + (bx + offsets) * bin_w, n)
            pts = _bilinear_weights(grid_h, grid_w, ys, xs)
            out[by * k + bx] = pts.mean(axis=0)
    return out


def _clip_box(box: Box, width: float, height: float) -> Box:
    if box.x0 >= 0 and box.y0 >= 0 and box.x1 <= width and box.y1 <= height:
        return box
    clipped = Box(
        max(box.x0, 0.0), max(box.y0, 0.0), min(box.x1, width), min(box.y1, height)
    )
    log.warning("box %s extends outside the canvas; clipped to %s", box.as_tuple(), clipped.as_tuple())
    return clipped


def roi_align(fmap: DenseFeatureMap, box: Box, spec: RoiSpec = RoiSpec()) -> Tensor:
    """Pool one region from a single-image dense map -> [k, k, d].

    Per bin, the result averages bilinear samples on an n x n interior
    grid. Zero-area boxes are rejected; boxes reaching outside the canvas
    are clipped with a warning.
    """
    features = fmap.features
    if features.ndim == 4:
        if features.shape[0] != 1:
            raise ValueError("roi_align pools from one image; index the batch first")
        features = T.reshape(features, features.shape[1:])
    h, w, d = features.shape
    canvas_w, canvas_h = w * fmap.stride, h * fmap.stride
    if box.area <= 0:
        raise ValueError(f"zero-area box {box.as_tuple()}")
    box = _clip_box(box, canvas_w, canvas_h)
    weights = roi_weight_matrix(box, fmap.stride, h, w, spec)
    flat = T.reshape(features, (h * w, d))
    pooled = T.matmul(Tensor(weights.astype(features.data.dtype)), flat)
    return T.reshape(pooled, (spec.output_size, spec.output_size, d))


def region_embeddings(
    fmap: DenseFeatureMap, boxes: list[Box], spec: RoiSpec = RoiSpec()
) -> Tensor:
    """Unit-norm 1x1 pooled embedding per box, rows in box order -> [N, d]."""
    features = fmap.features
    if features.ndim == 4:
        if features.shape[0] != 1:
            raise ValueError("region_embeddings pools from one image; index the batch first")
        features = T.reshape(features, features.shape[1:])
    h, w, d = features.shape
    canvas_w, canvas_h = w * fmap.stride, h * fmap.stride
    pool_spec = RoiSpec(output_size=1, sampling_points=spec.sampling_points)
    rows = []
    for box in boxes:
        if box.area <= 0:
            raise ValueError(f"zero-area box {box.as_tuple()}")
        clipped = _clip_box(box, canvas_w, canvas_h)
        rows.append(roi_weight_matrix(clipped, fmap.stride, h, w, pool_spec)[0])
    weights = np.stack(rows)
    flat = T.reshape(features, (h * w, d))
    pooled = T.matmul(Tensor(weights.astype(features.data.dtype)), flat)
    return T.l2_normalize(pooled)
