"""Evaluation protocols: zero-shot region classification, text-response
heatmaps, and per-pixel classification of the dense feature map."""
from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig
from .encoders import DenseFeatureMap
from .mosaic import Box, bilinear_resize
from .roi import region_embeddings
from .synthdata import SynthDataset, SynthSample, class_prompts
from .tensor import Tensor

_EVAL_CHUNK = 16


def prompt_embeddings(model, cfg: RunConfig) -> np.ndarray:
    """Unit embedding per concept prompt, rows in concept-id order."""
    table = model._table
    vocab = model._vocab
    prompts = class_prompts(range(len(table)), table, vocab, cfg.max_text_len)
    with T.no_grad():
        return model.text.forward(np.asarray(prompts, dtype=np.int64)).data


def _canvas_image(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[0] == size and image.shape[1] == size:
        return image
    return bilinear_resize(image, size, size)


def _scale_box(box: Box, factor: float) -> Box:
    return Box(box.x0 * factor, box.y0 * factor, box.x1 * factor, box.y1 * factor)


def dense_map_of(model, image: np.ndarray, cfg: RunConfig) -> DenseFeatureMap:
    with T.no_grad():
        _, dense = model.vision.forward(_canvas_image(image, cfg.canvas_size)[None].astype(cfg.dtype))
    return dense


def evaluate_regions(
    model, dataset: SynthDataset, cfg: RunConfig, samples: list[SynthSample] | None = None
) -> dict:
    """Zero-shot classification of ground-truth object boxes.

    Ranks each pooled region embedding against every concept prompt and
    reports Top-1/Top-5 accuracy over base, novel, and all objects.
    """
    samples = dataset.eval if samples is None else samples
    prompts = prompt_embeddings(model, cfg)
    novel = set(dataset.table.novel_ids)
    factor = cfg.canvas_size / dataset.cfg.image_size
    hits1 = {"base": 0, "novel": 0}
    hits5 = {"base": 0, "novel": 0}
    counts = {"base": 0, "novel": 0}
    with T.no_grad():
        for lo in range(0, len(samples), _EVAL_CHUNK):
            chunk = samples[lo : lo + _EVAL_CHUNK]
            images = np.stack([_canvas_image(s.image, cfg.canvas_size) for s in chunk])
            _, dense = model.vision.forward(images.astype(cfg.dtype))
            for i, sample in enumerate(chunk):
                if not sample.object_boxes:
                    continue
                fmap = DenseFeatureMap(T.slice_axis(dense.features, 0, i, i + 1), dense.stride)
                boxes = [_scale_box(b, factor) for b in sample.object_boxes]
                rows = region_embeddings(fmap, boxes).data
                sims = rows @ prompts.T
                ranked = np.argsort(-sims, axis=1)
                for row, concept in zip(ranked, sample.object_concepts):
                    split = "novel" if concept in novel else "base"
                    counts[split] += 1
                    hits1[split] += int(row[0] == concept)
                    hits5[split] += int(concept in row[:5])

    def rate(hits):
        out = {}
        for split in ("base", "novel"):
            out[split] = hits[split] / counts[split] if counts[split] else 0.0
        total = counts["base"] + counts["novel"]
        out["all"] = (hits["base"] + hits["novel"]) / total if total else 0.0
        return out

    return {"top1": rate(hits1), "top5": rate(hits5), "counts": counts}


@dataclass
class HeatmapResult:
    response: np.ndarray  # h x w, raw cosine values
    normalized: np.ndarray  # h x w in [0, 1] for rendering
    argmax_cell: tuple[int, int]  # (row, col)
    best_box: Box  # canvas pixels


def heatmap(model, image: np.ndarray, text_ids, cfg: RunConfig) -> HeatmapResult:
    """Cosine response of every dense cell to one text embedding."""
    dense = dense_map_of(model, image, cfg)
    with T.no_grad():
        text = model.text.forward(np.asarray(text_ids, dtype=np.int64)[None]).data[0]
    feats = dense.features.data[0]
    cells = feats / np.linalg.norm(feats, axis=-1, keepdims=True)
    response = cells @ text
    span = response.max() - response.min()
    normalized = (response - response.min()) / (span if span > 0 else 1.0)
    idx = int(np.argmax(response))
    h, w = response.shape
    argmax_cell = (idx // w, idx % w)
    best = _best_window(response)
    stride = dense.stride
    best_box = Box(
        best[1] * stride, best[0] * stride, (best[3] + 1) * stride, (best[2] + 1) * stride
    )
    return HeatmapResult(response, normalized, argmax_cell, best_box)


def _best_window(response: np.ndarray) -> tuple[int, int, int, int]:
    """Cell window (r0, c0, r1, c1) inclusive, maximizing mean response."""
    h, w = response.shape
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = response.cumsum(0).cumsum(1)
    best = None
    best_val = -np.inf
    for r0 in range(h):
        for r1 in range(r0, h):
            for c0 in range(w):
                for c1 in range(c0, w):
                    total = (
                        integral[r1 + 1, c1 + 1]
                        - integral[r0, c1 + 1]
                        - integral[r1 + 1, c0]
                        + integral[r0, c0]
                    )
                    mean = total / ((r1 - r0 + 1) * (c1 - c0 + 1))
                    if mean > best_val:
                        best_val = mean
                        best = (r0, c0, r1, c1)
    return best


def per_pixel_classify(model, image: np.ndarray, prompt_embs: np.ndarray, cfg: RunConfig) -> np.ndarray:
    """Label map [h, w]: per-cell argmax over prompt similarities."""
    dense = dense_map_of(model, image, cfg)
    feats = dense.features.data[0]
    cells = feats / np.linalg.norm(feats, axis=-1, keepdims=True)
    sims = cells @ prompt_embs.T
    return np.argmax(sims, axis=-1)


def render_heatmap(normalized: np.ndarray, upscale: int = 8) -> np.ndarray:
    """Blue-to-red ramp image in [0,1], nearest-upscaled for visibility."""
    v = np.repeat(np.repeat(normalized, upscale, axis=0), upscale, axis=1)
    out = np.zeros(v.shape + (3,))
    out[..., 0] = v
    out[..., 2] = 1.0 - v
    out[..., 1] = 0.15
    return out


def label_palette(n: int) -> np.ndarray:
    """n visually distinct RGB colors in [0,1]."""
    return np.array([colorsys.hsv_to_rgb(i / n, 0.85, 0.95) for i in range(n)])


def render_labels(labels: np.ndarray, n_classes: int, upscale: int = 8) -> np.ndarray:
    palette = label_palette(n_classes)
    img = palette[labels]
    return np.repeat(np.repeat(img, upscale, axis=0), upscale, axis=1)
