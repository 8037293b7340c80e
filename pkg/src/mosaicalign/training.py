"""Batch assembly, optimization, and the training loop."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig, config_hash, serialize_config
from .encoders import DenseFeatureMap, TextConfig, TextEncoder, VisionConfig, VisionEncoder
from .errors import ConfigError, NumericError
from .losses import (
    EmbeddingBatch,
    Temperature,
    grounding_loss,
    info_nce,
    soft_target_ce,
    uniform_soft_targets,
)
from .mosaic import (
    Box,
    CropConfig,
    GridPolicy,
    MosaicSample,
    attach_composed,
    bilinear_resize,
    build_mosaic,
    max_size_box,
    plan_grid,
)
from .roi import region_embeddings
from .synthdata import DatasetConfig, SynthDataset, class_prompts
from .tensor import Tensor

log = logging.getLogger(__name__)

_BLAS_PINNED = False


def pin_blas_single_thread() -> None:
    """Limit BLAS pools to one thread; tiny GEMMs lose badly to thread sync."""
    global _BLAS_PINNED
    if _BLAS_PINNED:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=1, user_api="blas")
        _BLAS_PINNED = True
    except Exception:  # pragma: no cover - threadpoolctl is a soft dependency
        log.debug("threadpoolctl unavailable; leaving BLAS pool size alone")

METRIC_COLUMNS = (
    "step",
    "loss_total",
    "loss_info_nce",
    "loss_bce_tag",
    "loss_soft_target_ce",
    "loss_grounding",
    "loss_composed",
    "top1_base",
    "top1_novel",
    "top1_all",
    "top5_base",
    "top5_novel",
    "top5_all",
    "wall_time",
)


class AlignmentModel:
    """Vision encoder + text encoder + temperature + tag-loss bias."""

    def __init__(self, cfg: RunConfig, vocab_size: int, rng: np.random.Generator):
        dtype = cfg.dtype
        vis_cfg = VisionConfig(
            image_size=cfg.canvas_size,
            patch_size=cfg.patch_size,
            depth=cfg.vision_depth,
            width=cfg.vision_width,
            heads=cfg.vision_heads,
            embed_dim=cfg.embed_dim,
        )
        txt_cfg = TextConfig(
            vocab_size=vocab_size,
            max_len=cfg.max_text_len,
            depth=cfg.text_depth,
            width=cfg.text_width,
            heads=cfg.text_heads,
            embed_dim=cfg.embed_dim,
        )
        self.cfg = cfg
        self.vision = VisionEncoder(vis_cfg, rng, dtype)
        self.text = TextEncoder(txt_cfg, rng, dtype)
        self.temperature = Temperature.create(cfg.temp_init, cfg.temp_bounds, dtype)
        self.tag_bias = Tensor(np.asarray(cfg.tag_bias_init, dtype=dtype), requires_grad=True)

    def named_params(self) -> dict[str, Tensor]:
        params = {**self.vision.named_params(), **self.text.named_params()}
        params["temperature"] = self.temperature.log_scale
        params["tag_bias"] = self.tag_bias
        return params


# ---------------------------------------------------------------------------
# optimizer

@dataclass(frozen=True)
class AdamHyper:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "AdamHyper":
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)


def adamw_step(param, grad, m, v, t: int, hyper: AdamHyper, decay: bool = True):
    """One decoupled-weight-decay Adam update; returns (param, m, v)."""
    m = hyper.beta1 * m + (1.0 - hyper.beta1) * grad
    v = hyper.beta2 * v + (1.0 - hyper.beta2) * grad * grad
    m_hat = m / (1.0 - hyper.beta1**t)
    v_hat = v / (1.0 - hyper.beta2**t)
    param = param - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    if decay:
        param = param - hyper.lr * hyper.weight_decay * param
    return param, m, v


class AdamW:
    NO_DECAY = {"temperature"}

    def __init__(self, params: dict[str, Tensor], hyper: AdamHyper):
        self.params = params
        self.hyper = hyper
        self.t = 0
        self.lr_scale = 1.0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        hp = self.hyper
        lr = hp.lr * self.lr_scale
        bc1 = 1.0 - hp.beta1**self.t
        bc2 = 1.0 - hp.beta2**self.t
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= hp.beta1
            m += (1.0 - hp.beta1) * grad
            v *= hp.beta2
            v += (1.0 - hp.beta2) * (grad * grad)
            update = (m / bc1) / (np.sqrt(v / bc2) + hp.eps)
            data = p.data
            data -= lr * update
            if name not in self.NO_DECAY:
                data -= lr * hp.weight_decay * data

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def lr_scale_at(step: int, cfg: RunConfig) -> float:
    """Schedule multiplier for the step about to run (1-indexed)."""
    if cfg.lr_schedule == "constant" or cfg.steps <= 1:
        return 1.0
    progress = (step - 1) / max(cfg.steps - 1, 1)
    floor = 0.1
    return floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * progress))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# batch assembly

@dataclass
class Batch:
    canvases: np.ndarray  # [n_plain + n_mosaic, S, S, 3]
    plain_count: int
    mosaics: list[MosaicSample]
    texts: list[tuple[int, ...]]
    # singleton region -> (canvas index, box or None for the global path, text idx)
    singleton_canvas: list[int] = field(default_factory=list)
    singleton_box: list[Box | None] = field(default_factory=list)
    singleton_text: list[int] = field(default_factory=list)
    singleton_tags: list[tuple[int, ...]] = field(default_factory=list)
    # composed regions -> (canvas index, box, matched text indices)
    composed_canvas: list[int] = field(default_factory=list)
    composed_box: list[Box] = field(default_factory=list)
    composed_texts: list[tuple[int, ...]] = field(default_factory=list)
    # per singleton: max-size box for the tag loss, sub-boxes for grounding
    tag_box: list[Box] = field(default_factory=list)
    grounding_boxes: list[list[Box]] = field(default_factory=list)

    @property
    def text_matrix(self) -> np.ndarray:
        return np.asarray(self.texts, dtype=np.int64)


def _draw_distinct(dataset: list, count: int, rng: np.random.Generator) -> list[int]:
    """Sample indices whose captions are pairwise distinct."""
    chosen: list[int] = []
    seen: set[tuple[int, ...]] = set()
    attempts = 0
    while len(chosen) < count:
        idx = int(rng.integers(0, len(dataset)))
        cap = dataset[idx].caption_ids
        if cap in seen:
            attempts += 1
            if attempts > 200 * count:
                raise ConfigError("could not draw enough distinct captions from the dataset")
            continue
        seen.add(cap)
        chosen.append(idx)
    return chosen


def group_cells_by_similarity(embs: np.ndarray, group_sizes: list[int]) -> list[list[int]]:
    """Greedy nearest-neighbor grouping of pool rows into the given sizes.

    Each group starts at the first unused row and absorbs its most similar
    unused rows by cosine similarity.
    """
    if sum(group_sizes) > len(embs):
        raise ConfigError(f"pool of {len(embs)} rows cannot fill groups of {group_sizes}")
    normed = embs / np.linalg.norm(embs, axis=1, keepdims=True)
    unused = list(range(len(embs)))
    groups = []
    for size in group_sizes:
        anchor = unused.pop(0)
        group = [anchor]
        if size > 1:
            sims = normed[unused] @ normed[anchor]
            order = np.argsort(-sims, kind="stable")[: size - 1]
            picked = [unused[i] for i in order]
            for p in picked:
                unused.remove(p)
            group.extend(picked)
        groups.append(group)
    return groups


def _jittered_candidates(
    region_box: Box, rng: np.random.Generator, per_cell: int, crop_aspect
) -> list[Box]:
    """Random sub-boxes of a region (area fraction 0.3..1.0) for max-size picking."""
    out = []
    for _ in range(per_cell):
        frac = rng.uniform(0.3, 1.0)
        aspect = rng.uniform(*crop_aspect)
        w = region_box.width * np.sqrt(frac * aspect)
        h = region_box.height * np.sqrt(frac / aspect)
        w = min(w, region_box.width)
        h = min(h, region_box.height)
        x0 = region_box.x0 + rng.uniform(0.0, region_box.width - w)
        y0 = region_box.y0 + rng.uniform(0.0, region_box.height - h)
        out.append(Box(x0, y0, x0 + max(w, 1.0), y0 + max(h, 1.0)))
    return out


def _cell_aligned_subboxes(
    region_box: Box, stride: int, count: int, rng: np.random.Generator
) -> list[Box]:
    """Feature-cell-sized boxes inside the region, without replacement if possible."""
    c0 = int(np.floor(region_box.x0 / stride))
    r0 = int(np.floor(region_box.y0 / stride))
    c1 = max(int(np.ceil(region_box.x1 / stride)), c0 + 1)
    r1 = max(int(np.ceil(region_box.y1 / stride)), r0 + 1)
    cells = [(r, c) for r in range(r0, r1) for c in range(c0, c1)]
    if len(cells) >= count:
        picks = rng.choice(len(cells), size=count, replace=False)
    else:
        picks = rng.choice(len(cells), size=count, replace=True)
    out = []
    for i in picks:
        r, c = cells[int(i)]
        x0 = max(float(c * stride), region_box.x0)
        y0 = max(float(r * stride), region_box.y0)
        x1 = min(float((c + 1) * stride), region_box.x1)
        y1 = min(float((r + 1) * stride), region_box.y1)
        out.append(Box(x0, y0, x1, y1))
    return out


def assemble_batch(
    dataset: SynthDataset,
    cfg: RunConfig,
    rng: np.random.Generator,
    pool_embed=None,
) -> Batch:
    """Draw one training batch: plain samples plus mosaicked canvases.

    Texts are deduplicated batch-wide; every plain sample and pseudo region
    gets exactly one matched text. ``pool_embed`` (samples -> embedding
    rows) activates similarity-grouped mosaic cells for the non-random
    sampling modes.
    """
    policy = GridPolicy.parse(cfg.grid_policy)
    grids = [plan_grid(rng, policy) for _ in range(cfg.n_mosaic)]
    cells = [g.cells for g in grids]
    total = cfg.n_plain + sum(cells)
    idxs = _draw_distinct(dataset.train, total, rng)

    if cfg.sampling_mode != "random":
        if pool_embed is None:
            raise ConfigError(f"sampling mode {cfg.sampling_mode!r} needs an embedding function")
        pool_idxs = _draw_distinct(dataset.train, max(2 * sum(cells), sum(cells)), rng) if cells else []
        if cells:
            embs = pool_embed([dataset.train[i] for i in pool_idxs])
            groups = group_cells_by_similarity(embs, cells)
            mosaic_idxs = [pool_idxs[i] for grp in groups for i in grp]
            idxs = idxs[: cfg.n_plain] + mosaic_idxs

    crop_cfg = CropConfig(tuple(cfg.crop_area), tuple(cfg.crop_aspect))
    size = cfg.canvas_size
    need_tag = cfg.loss_weights.get("bce_tag", 0.0) != 0.0
    need_grounding = cfg.loss_weights.get("grounding", 0.0) != 0.0

    canvases = np.zeros((cfg.n_plain + cfg.n_mosaic, size, size, 3))
    batch = Batch(canvases=canvases, plain_count=cfg.n_plain, mosaics=[], texts=[])
    text_index: dict[tuple[int, ...], int] = {}

    def text_id(caption: tuple[int, ...]) -> int:
        if caption not in text_index:
            text_index[caption] = len(batch.texts)
            batch.texts.append(caption)
        return text_index[caption]

    cursor = 0
    full_box = Box(0.0, 0.0, float(size), float(size))
    for i in range(cfg.n_plain):
        sample = dataset.train[idxs[cursor]]
        cursor += 1
        img = sample.image
        if img.shape[0] != size:
            img = bilinear_resize(img, size, size)
        canvases[i] = img
        batch.singleton_canvas.append(i)
        batch.singleton_box.append(None)
        batch.singleton_text.append(text_id(sample.caption_ids))
        batch.singleton_tags.append(tuple(sample.tags))
        if need_tag:
            batch.tag_box.append(
                max_size_box_for(full_box, rng, cfg.tag_candidates_per_cell, cfg.crop_aspect)
            )
        if need_grounding:
            batch.grounding_boxes.append(
                _cell_aligned_subboxes(full_box, cfg.patch_size, cfg.grounding_samples, rng)
            )

    for j, grid in enumerate(grids):
        members = [dataset.train[idxs[cursor + k]] for k in range(grid.cells)]
        cursor += grid.cells
        mosaic = build_mosaic(members, grid, size, rng, crop_cfg)
        mosaic = attach_composed(mosaic, cfg.composed_regions, size, rng)
        canvas_idx = cfg.n_plain + j
        canvases[canvas_idx] = mosaic.canvas
        batch.mosaics.append(mosaic)
        for region in mosaic.regions:
            batch.singleton_canvas.append(canvas_idx)
            batch.singleton_box.append(region.box)
            batch.singleton_text.append(text_id(region.caption_ids))
            batch.singleton_tags.append(region.tag_ids)
            if need_tag:
                batch.tag_box.append(
                    max_size_box_for(region.box, rng, cfg.tag_candidates_per_cell, cfg.crop_aspect)
                )
            if need_grounding:
                batch.grounding_boxes.append(
                    _cell_aligned_subboxes(region.box, cfg.patch_size, cfg.grounding_samples, rng)
                )
        for comp in mosaic.composed:
            batch.composed_canvas.append(canvas_idx)
            batch.composed_box.append(comp.box)
            batch.composed_texts.append(tuple(text_id(c) for c in comp.target_caption_ids))
    return batch


def max_size_box_for(region_box: Box, rng, per_cell: int, crop_aspect) -> Box:
    """Jitter candidate sub-boxes and keep the largest one inside the region."""
    from .mosaic import PseudoRegion

    region = PseudoRegion(box=region_box, caption_ids=(), tag_ids=(), source_sample_id=-1)
    candidates = _jittered_candidates(region_box, rng, per_cell, crop_aspect)
    return max_size_box(region, candidates)


def similarity_grouped_batch(
    dataset: SynthDataset,
    cfg: RunConfig,
    rng: np.random.Generator,
    model: AlignmentModel | None = None,
    pool_embed=None,
) -> Batch:
    """Batch with mosaic cells grouped by caption or image similarity.

    Random mode falls through to plain ``assemble_batch``.
    """
    if cfg.sampling_mode == "random":
        return assemble_batch(dataset, cfg, rng)
    if pool_embed is None:
        if model is None:
            raise ConfigError("similarity grouping needs a model or an embedding function")
        pool_embed = make_pool_embed(model, cfg)
    return assemble_batch(dataset, cfg, rng, pool_embed=pool_embed)


def make_pool_embed(model: AlignmentModel, cfg: RunConfig):
    """Current-model embedding function for similarity-grouped sampling."""

    def embed(samples):
        with T.no_grad():
            if cfg.sampling_mode == "text-similarity":
                ids = np.asarray([s.caption_ids for s in samples], dtype=np.int64)
                return model.text.forward(ids).data
            imgs = np.stack(
                [
                    s.image
                    if s.image.shape[0] == cfg.canvas_size
                    else bilinear_resize(s.image, cfg.canvas_size, cfg.canvas_size)
                    for s in samples
                ]
            )
            global_embs, _ = model.vision.forward(imgs)
            return global_embs.data

    return embed


# ---------------------------------------------------------------------------
# one optimization step

def _pool_rows(dense: Tensor, canvas_ids, boxes, stride: int) -> Tensor | None:
    """Unit-norm pooled rows for (canvas, box) pairs, grouped per canvas."""
    if not boxes:
        return None
    order = np.arange(len(boxes))
    pieces = []
    restore = np.empty(len(boxes), dtype=int)
    taken = 0
    for b in sorted(set(canvas_ids)):
        members = [i for i in order if canvas_ids[i] == b]
        fmap = DenseFeatureMap(T.slice_axis(dense, 0, b, b + 1), stride)
        pieces.append(region_embeddings(fmap, [boxes[i] for i in members]))
        restore[members] = np.arange(taken, taken + len(members))
        taken += len(members)
    rows = pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=0)
    if not np.array_equal(restore, order):
        # reorder rows back to input order via a permutation matrix
        perm = np.zeros((len(boxes), len(boxes)), dtype=rows.data.dtype)
        perm[order, restore] = 1.0
        rows = T.matmul(Tensor(perm), rows)
    return rows


def compute_losses(model: AlignmentModel, batch: Batch, cfg: RunConfig) -> dict[str, Tensor]:
    """Forward pass and every enabled loss term for one batch."""
    weights = cfg.loss_weights
    stride = cfg.patch_size
    global_embs, dense_map = model.vision.forward(
        batch.canvases.astype(cfg.dtype), global_count=batch.plain_count
    )
    dense = dense_map.features

    need_tag = weights.get("bce_tag", 0.0) != 0.0
    tag_concepts: list[int] = sorted({t for tags in batch.singleton_tags for t in tags}) if need_tag else []
    text_rows = list(batch.texts)
    if need_tag:
        prompt_rows = class_prompts(tag_concepts, model_table(model), model_vocab(model), cfg.max_text_len)
        text_rows = text_rows + list(prompt_rows)
    ids = np.asarray(text_rows, dtype=np.int64)
    all_text_embs = model.text.forward(ids)
    n_caption = len(batch.texts)
    text_embs = T.slice_axis(all_text_embs, 0, 0, n_caption)

    # singleton rows: plain samples use the global path, regions are pooled
    row_pieces = []
    pooled_boxes = []
    pooled_canvas = []
    plain_positions = [i for i, b in enumerate(batch.singleton_box) if b is None]
    region_positions = [i for i, b in enumerate(batch.singleton_box) if b is not None]
    if plain_positions:
        row_pieces.append(T.slice_axis(global_embs, 0, 0, batch.plain_count))
    for i in region_positions:
        pooled_canvas.append(batch.singleton_canvas[i])
        pooled_boxes.append(batch.singleton_box[i])
    pooled = _pool_rows(dense, pooled_canvas, pooled_boxes, stride)
    if pooled is not None:
        row_pieces.append(pooled)
    singleton_rows = row_pieces[0] if len(row_pieces) == 1 else T.concat(row_pieces, axis=0)
    singleton_order = plain_positions + region_positions
    singleton_text = [batch.singleton_text[i] for i in singleton_order]

    losses: dict[str, Tensor] = {}
    temp = model.temperature

    composed_rows = _pool_rows(dense, batch.composed_canvas, batch.composed_box, stride)

    if "info_nce" in weights:
        emb_batch = EmbeddingBatch(
            region_embs=singleton_rows,
            text_embs=text_embs,
            match=[(t,) for t in singleton_text],
        )
        losses["info_nce"] = info_nce(emb_batch, temp)
        if composed_rows is not None and cfg.composed_weight != 0.0:
            logits = T.mul(T.matmul(composed_rows, T.transpose(text_embs, (1, 0))), temp.scale())
            targets = uniform_soft_targets(batch.composed_texts, n_caption, cfg.dtype)
            losses["composed"] = soft_target_ce(logits, targets)

    if "soft_target_ce" in weights:
        rows = singleton_rows if composed_rows is None else T.concat([singleton_rows, composed_rows], axis=0)
        match = [(t,) for t in singleton_text] + list(batch.composed_texts)
        logits = T.mul(T.matmul(rows, T.transpose(text_embs, (1, 0))), temp.scale())
        losses["soft_target_ce"] = soft_target_ce(
            logits, uniform_soft_targets(match, n_caption, cfg.dtype)
        )

    if need_tag:
        tag_rows = _pool_rows(dense, batch.singleton_canvas, batch.tag_box, stride)
        prompt_embs = T.slice_axis(all_text_embs, 0, n_caption, n_caption + len(tag_concepts))
        logits = T.add(
            T.mul(T.matmul(tag_rows, T.transpose(prompt_embs, (1, 0))), temp.scale()),
            model.tag_bias,
        )
        concept_col = {c: k for k, c in enumerate(tag_concepts)}
        targets = np.zeros((len(batch.singleton_tags), len(tag_concepts)), dtype=cfg.dtype)
        for i, tags in enumerate(batch.singleton_tags):
            for t in tags:
                targets[i, concept_col[t]] = 1.0
        bce = T.bce_with_logits(logits, targets)
        losses["bce_tag"] = T.mean_(T.sum_(bce, axis=1))

    if weights.get("grounding", 0.0) != 0.0:
        word_embs, content = model.text.forward_tokens(np.asarray(batch.texts, dtype=np.int64))
        # mean word embedding per text; mean-of-pairs cosine factorizes into
        # (mean grid row) . (mean word row)
        mask = content.astype(cfg.dtype)
        counts = mask.sum(axis=1, keepdims=True)
        masked = T.mul(word_embs, Tensor(mask[..., None]))
        word_means = T.mul(T.sum_(masked, axis=1), Tensor(1.0 / counts))  # [M, e]
        sub_canvas = []
        sub_boxes = []
        for i in singleton_order:
            for boxj in batch.grounding_boxes[i]:
                sub_canvas.append(batch.singleton_canvas[i])
                sub_boxes.append(boxj)
        # plain rows use pooled grid cells too (the whole canvas is the region)
        grid_rows = _pool_rows(dense, sub_canvas, sub_boxes, stride)
        n_regions = len(singleton_order)
        s_count = cfg.grounding_samples
        grid_rows = T.reshape(grid_rows, (n_regions, s_count, cfg.embed_dim))
        grid_means = T.mul(T.sum_(grid_rows, axis=1), Tensor(np.asarray(1.0 / s_count, dtype=cfg.dtype)))
        scores = T.matmul(grid_means, T.transpose(word_means, (1, 0)))
        losses["grounding"] = grounding_loss(scores, np.asarray(singleton_text), temp)

    return losses


def model_vocab(model: AlignmentModel):
    return model._vocab  # attached by the trainer


def model_table(model: AlignmentModel):
    return model._table  # attached by the trainer


def total_loss(losses: dict[str, Tensor], cfg: RunConfig) -> Tensor:
    total = None
    for name, value in losses.items():
        weight = cfg.composed_weight if name == "composed" else cfg.loss_weights.get(name, 0.0)
        term = value * float(weight)
        total = term if total is None else total + term
    return total


def train_step(model: AlignmentModel, batch: Batch, cfg: RunConfig, opt: AdamW) -> dict[str, float]:
    """One optimization step; returns the realized loss values."""
    losses = compute_losses(model, batch, cfg)
    total = total_loss(losses, cfg)
    if not np.isfinite(total.data):
        grad_norms = {k: float(np.abs(p.grad).max()) for k, p in opt.params.items() if p.grad is not None}
        raise NumericError(f"non-finite loss {float(total.data)}; last grad norms: {grad_norms}")
    opt.zero_grad()
    total.backward()
    opt.step()
    model.temperature.project()
    out = {name: float(v.data) for name, v in losses.items()}
    out["total"] = float(total.data)
    return out


# ---------------------------------------------------------------------------
# trainer

class Trainer:
    def __init__(self, cfg: RunConfig, dataset: SynthDataset | None = None):
        pin_blas_single_thread()
        self.cfg = cfg
        self.dataset = dataset if dataset is not None else SynthDataset(dataset_config(cfg))
        init_rng = np.random.default_rng([cfg.seed, 0])
        self.model = AlignmentModel(cfg, len(self.dataset.vocab), init_rng)
        self.model._vocab = self.dataset.vocab
        self.model._table = self.dataset.table
        self.opt = AdamW(self.model.named_params(), AdamHyper.from_config(cfg))
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.step = 0

    def next_batch(self) -> Batch:
        if self.cfg.sampling_mode == "random":
            return assemble_batch(self.dataset, self.cfg, self.rng)
        return similarity_grouped_batch(self.dataset, self.cfg, self.rng, model=self.model)

    def run(self, run_dir: Path | None = None, metrics_rows: list | None = None) -> dict:
        """Train to ``cfg.steps``; returns the final evaluation metrics."""
        from .checkpoint import save_checkpoint
        from .evaluation import evaluate_regions

        writer = None
        csv_file = None
        if run_dir is not None:
            run_dir = Path(run_dir)
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "config.json").write_text(serialize_config(self.cfg))
            csv_file = open(run_dir / "metrics.csv", "w", newline="")
            writer = csv.writer(csv_file)
            writer.writerow(METRIC_COLUMNS)
        start = time.perf_counter()
        final_eval: dict = {}
        try:
            while self.step < self.cfg.steps:
                batch = self.next_batch()
                self.opt.lr_scale = lr_scale_at(self.step + 1, self.cfg)
                losses = train_step(self.model, batch, self.cfg, self.opt)
                self.step += 1
                eval_due = (
                    self.cfg.eval_cadence > 0 and self.step % self.cfg.eval_cadence == 0
                ) or self.step == self.cfg.steps
                metrics = {}
                if eval_due:
                    metrics = evaluate_regions(self.model, self.dataset, self.cfg)
                    final_eval = metrics
                if self.step % self.cfg.log_every == 0 or eval_due:
                    row = self._metrics_row(losses, metrics, time.perf_counter() - start)
                    if writer is not None:
                        writer.writerow(row)
                    if metrics_rows is not None:
                        metrics_rows.append(row)
            if self.cfg.steps == 0:
                final_eval = {}
        finally:
            if csv_file is not None:
                csv_file.close()
        if run_dir is not None:
            save_checkpoint(self, run_dir / "checkpoint.bin")
        return final_eval

    def _metrics_row(self, losses: dict, metrics: dict, wall: float) -> list:
        def fmt(x):
            return repr(float(x)) if x is not None else ""

        return [
            self.step,
            fmt(losses.get("total")),
            fmt(losses.get("info_nce")) if "info_nce" in losses else "",
            fmt(losses.get("bce_tag")) if "bce_tag" in losses else "",
            fmt(losses.get("soft_target_ce")) if "soft_target_ce" in losses else "",
            fmt(losses.get("grounding")) if "grounding" in losses else "",
            fmt(losses.get("composed")) if "composed" in losses else "",
            fmt(metrics.get("top1", {}).get("base")) if metrics else "",
            fmt(metrics.get("top1", {}).get("novel")) if metrics else "",
            fmt(metrics.get("top1", {}).get("all")) if metrics else "",
            fmt(metrics.get("top5", {}).get("base")) if metrics else "",
            fmt(metrics.get("top5", {}).get("novel")) if metrics else "",
            fmt(metrics.get("top5", {}).get("all")) if metrics else "",
            repr(wall),
        ]


def dataset_config(cfg: RunConfig) -> DatasetConfig:
    return DatasetConfig(
        seed=cfg.data_seed,
        train_size=cfg.train_size,
        eval_size=cfg.eval_size,
        image_size=cfg.data_image_size,
        max_len=cfg.max_text_len,
        noise_sigma=cfg.noise_sigma,
        two_object_p=cfg.two_object_p,
    )


def run_experiment(cfg_dict: dict, run_dir: str | None = None) -> dict:
    """Build a trainer from a config dict, run it, return final metrics.

    Top-level so experiment grids can fan out across worker processes.
    """
    from .config import config_from_dict

    cfg = config_from_dict(cfg_dict)
    trainer = Trainer(cfg)
    metrics = trainer.run(Path(run_dir) if run_dir else None)
    return metrics
