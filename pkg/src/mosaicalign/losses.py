"""Alignment objectives between region embeddings and text embeddings.

Four formulations: symmetric InfoNCE for one-to-one matched pairs,
multi-label BCE for tag supervision, soft-target cross entropy for
regions matched to several texts, and a grounding loss over grid-word
similarity scores.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


@dataclass
class Temperature:
    """Learnable logit scale, stored as log-scale and clamped after steps."""

    log_scale: Tensor
    bounds: tuple[float, float] = (1.0, 100.0)

    @classmethod
    def create(cls, init: float = 1.0 / 0.07, bounds=(1.0, 100.0), dtype=np.float64) -> "Temperature":
        return cls(Tensor(np.log(np.asarray(init, dtype=dtype)), requires_grad=True), bounds)

    def scale(self) -> Tensor:
        return T.exp(self.log_scale)

    def value(self) -> float:
        return float(np.exp(self.log_scale.data))

    def project(self) -> None:
        """Clamp the scale into bounds in place (call after optimizer steps)."""
        lo, hi = np.log(self.bounds[0]), np.log(self.bounds[1])
        self.log_scale.data = np.asarray(
            np.clip(self.log_scale.data, lo, hi), dtype=self.log_scale.data.dtype
        )


@dataclass
class EmbeddingBatch:
    """Unit-norm region rows, unit-norm text rows, and their match map."""

    region_embs: Tensor  # [N, d]
    text_embs: Tensor  # [M, d]
    match: list[tuple[int, ...]] = field(default_factory=list)  # per region

    def validate(self) -> None:
        n = self.region_embs.shape[0]
        m = self.text_embs.shape[0]
        if len(self.match) != n:
            raise ShapeError(f"{n} regions but {len(self.match)} match entries")
        for entry in self.match:
            if not entry:
                raise ShapeError("every region needs at least one matched text")
            if max(entry) >= m:
                raise ShapeError(f"match index {max(entry)} out of range for {m} texts")

    def bijection(self) -> np.ndarray | None:
        """Region -> text permutation if the matching is one-to-one, else None."""
        n = self.region_embs.shape[0]
        if self.text_embs.shape[0] != n:
            return None
        if any(len(entry) != 1 for entry in self.match):
            return None
        perm = np.array([entry[0] for entry in self.match])
        if len(set(perm.tolist())) != n:
            return None
        return perm


def _symmetric_ce(logits: Tensor, perm: np.ndarray) -> Tensor:
    row_ce = T.cross_entropy_with_logits(logits, perm)
    inverse = np.argsort(perm)
    col_ce = T.cross_entropy_with_logits(T.transpose(logits, (1, 0)), inverse)
    return (row_ce + col_ce) * 0.5


def info_nce(batch: EmbeddingBatch, temp: Temperature) -> Tensor:
    """Symmetric cross entropy over scaled region-text cosine logits.

    Requires a one-to-one match; multi-text regions belong in
    ``soft_target_ce`` instead.
    """
    batch.validate()
    perm = batch.bijection()
    if perm is None:
        raise ShapeError("info_nce needs a bijective region-text match; use soft_target_ce")
    logits = T.mul(T.matmul(batch.region_embs, T.transpose(batch.text_embs, (1, 0))), temp.scale())
    return _symmetric_ce(logits, perm)


def bce_multilabel(
    region_emb: Tensor,
    text_embs: Tensor,
    targets: np.ndarray,
    temp: Temperature,
    bias: Tensor,
) -> Tensor:
    """Sum over texts of binary cross entropy on scaled-cosine logits.

    ``region_emb`` is one unit row [d]; ``targets`` is 0/1 per text.
    """
    targets = np.asarray(targets, dtype=region_emb.data.dtype)
    if targets.shape != (text_embs.shape[0],):
        raise ShapeError(f"targets shape {targets.shape} != ({text_embs.shape[0]},)")
    region = T.reshape(region_emb, (1, region_emb.shape[-1]))
    cos = T.reshape(T.matmul(region, T.transpose(text_embs, (1, 0))), (text_embs.shape[0],))
    logits = T.add(T.mul(cos, temp.scale()), bias)
    return T.sum_(T.bce_with_logits(logits, targets))


def soft_target_ce(logits: Tensor, soft_targets: np.ndarray) -> Tensor:
    """Mean over rows of -sum_j t_ij log softmax(logits)_ij.

    Target rows must sum to 1; one-hot rows reduce to standard cross
    entropy bit-for-bit.
    """
    soft_targets = np.asarray(soft_targets, dtype=logits.data.dtype)
    if soft_targets.shape != logits.shape:
        raise ShapeError(f"targets {soft_targets.shape} != logits {logits.shape}")
    sums = soft_targets.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-9):
        raise ShapeError(f"target rows must sum to 1, got sums {sums}")
    return T.softmax_cross_entropy(logits, soft_targets)


def grounding_score(grid_embs: Tensor, word_embs: Tensor) -> Tensor:
    """Mean cosine over all (grid cell, word) pairs of unit rows."""
    if grid_embs.shape[0] < 1 or word_embs.shape[0] < 1:
        raise ShapeError("grounding_score needs at least one grid row and one word row")
    return T.mean_(T.matmul(grid_embs, T.transpose(word_embs, (1, 0))))


def grounding_loss(scores: Tensor, perm: np.ndarray, temp: Temperature) -> Tensor:
    """Symmetric cross entropy over scaled grounding scores [N, M].

    ``perm[i]`` is the text matched to region i and must be a bijection.
    """
    perm = np.asarray(perm)
    n, m = scores.shape
    if n != m or len(set(perm.tolist())) != n:
        raise ShapeError("grounding_loss needs a bijective region-text match")
    logits = T.mul(scores, temp.scale())
    return _symmetric_ce(logits, perm)


def uniform_soft_targets(match: list[tuple[int, ...]], n_texts: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic target matrix: uniform over each region's matched texts."""
    out = np.zeros((len(match), n_texts), dtype=dtype)
    for i, entry in enumerate(match):
        out[i, list(entry)] = 1.0 / len(entry)
    return out
