"""Mosaic canvas construction and pseudo-region geometry.

Canvases are divided into square grids whose cell edges are rounded to
integer pixels, so region boxes tile the canvas exactly (shared edges,
no gaps) even when the canvas size is not divisible by the grid size.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

INSIDE_TOL = 0.5  # box containment tolerance, pixels per edge


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        if self.rows != self.cols:
            raise ConfigError(f"only square grids are supported, got {self.rows}x{self.cols}")

    @property
    def cells(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in canvas pixels, y down."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box ({self.x0},{self.y0},{self.x1},{self.y1})")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, other: "Box", tol: float = INSIDE_TOL) -> bool:
        return (
            other.x0 >= self.x0 - tol
            and other.y0 >= self.y0 - tol
            and other.x1 <= self.x1 + tol
            and other.y1 <= self.y1 + tol
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True)
class PseudoRegion:
    box: Box
    caption_ids: tuple[int, ...]
    tag_ids: tuple[int, ...]
    source_sample_id: int


@dataclass(frozen=True)
class ComposedRegion:
    box: Box
    member_cells: tuple[int, ...]
    target_caption_ids: tuple[tuple[int, ...], ...]


@dataclass
class MosaicSample:
    canvas: np.ndarray  # H x W x 3, float in [0,1]
    grid: GridSpec
    regions: list[PseudoRegion]
    composed: list[ComposedRegion] = field(default_factory=list)
    # cell index -> position in `regions` (and in the source sample list)
    cell_assignment: tuple[int, ...] = ()


@dataclass(frozen=True)
class GridPolicy:
    """Either a fixed grid size or a uniform draw over a set of sizes."""

    kind: str  # "fixed" | "random"
    sizes: tuple[int, ...]

    @classmethod
    def parse(cls, text: str) -> "GridPolicy":
        text = text.strip()
        if text.startswith("fixed(") and text.endswith(")"):
            return cls("fixed", (int(text[6:-1]),))
        if text.startswith("random(") and text.endswith(")"):
            sizes = tuple(int(s) for s in text[7:-1].split(",") if s.strip())
            return cls("random", sizes)
        raise ConfigError(f"cannot parse grid policy {text!r}; use fixed(n) or random(a,b,...)")

    def __str__(self) -> str:
        inner = ",".join(str(s) for s in self.sizes)
        return f"{self.kind}({inner})"


@dataclass(frozen=True)
class CropConfig:
    area: tuple[float, float] = (0.5, 1.0)
    aspect: tuple[float, float] = (0.75, 4.0 / 3.0)


def plan_grid(rng: np.random.Generator, policy: GridPolicy) -> GridSpec:
    """Pick the grid size for one mosaic according to the policy."""
    if not policy.sizes:
        raise ConfigError("grid policy has an empty size set")
    if policy.kind == "fixed":
        n = policy.sizes[0]
    elif policy.kind == "random":
        n = int(policy.sizes[rng.integers(0, len(policy.sizes))])
    else:
        raise ConfigError(f"unknown grid policy kind {policy.kind!r}")
    return GridSpec(n, n)


def grid_edges(n: int, size: int) -> list[int]:
    """Integer cell boundaries 0 = e_0 < e_1 < ... < e_n = size."""
    return [int(round(k * size / n)) for k in range(n + 1)]


def cell_box(grid: GridSpec, index: int, canvas_size: int) -> Box:
    """Pixel box of grid cell ``index`` (row-major) on a square canvas."""
    if not 0 <= index < grid.cells:
        raise IndexError(f"cell index {index} out of range for {grid.rows}x{grid.cols} grid")
    edges = grid_edges(grid.rows, canvas_size)
    r, c = divmod(index, grid.cols)
    return Box(float(edges[c]), float(edges[r]), float(edges[c + 1]), float(edges[r + 1]))


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resample, half-pixel aligned, edges clamped."""
    h, w = image.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).reshape(-1, 1)
    wx = (xs - x0).reshape(1, -1)
    if image.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bot = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def crop_resize_fill(
    image: np.ndarray,
    cell: Box,
    rng: np.random.Generator,
    crop_cfg: CropConfig = CropConfig(),
) -> np.ndarray:
    """Sample a crop window from ``image`` and resize it to fill ``cell``.

    The crop covers a uniformly drawn area fraction of the source at an
    aspect jitter relative to the source's own aspect ratio, clipped to
    the image. A degenerate window falls back to a full-image resize.
    """
    h, w = image.shape[:2]
    if h < 8 or w < 8:
        raise ValueError(f"source image too small: {w}x{h}, need at least 8x8")
    out_h = int(round(cell.height))
    out_w = int(round(cell.width))
    frac = rng.uniform(*crop_cfg.area)
    aspect = rng.uniform(*crop_cfg.aspect)
    cw = int(round(w * np.sqrt(frac * aspect)))
    ch = int(round(h * np.sqrt(frac / aspect)))
    cw = min(cw, w)
    ch = min(ch, h)
    if cw < 1 or ch < 1:
        log.warning("degenerate crop window (%dx%d), using full image", cw, ch)
        return bilinear_resize(image, out_h, out_w)
    x = int(rng.integers(0, w - cw + 1))
    y = int(rng.integers(0, h - ch + 1))
    return bilinear_resize(image[y : y + ch, x : x + cw], out_h, out_w)


def build_mosaic(
    samples: list,
    grid: GridSpec,
    canvas_size: int,
    rng: np.random.Generator,
    crop_cfg: CropConfig = CropConfig(),
) -> MosaicSample:
    """Tile cropped samples onto a canvas; ``regions[i]`` maps to ``samples[i]``.

    Each sample must expose ``image``, ``caption_ids`` and ``tags``.
    Samples are assigned to cells by a uniform random permutation.
    """
    if len(samples) != grid.cells:
        raise ValueError(f"need {grid.cells} samples for a {grid.rows}x{grid.cols} grid, got {len(samples)}")
    perm = rng.permutation(grid.cells)  # cell index -> sample index
    canvas = np.zeros((canvas_size, canvas_size, 3))
    regions: list[PseudoRegion | None] = [None] * grid.cells
    for cell_idx in range(grid.cells):
        sample_idx = int(perm[cell_idx])
        sample = samples[sample_idx]
        box = cell_box(grid, cell_idx, canvas_size)
        patch = crop_resize_fill(sample.image, box, rng, crop_cfg)
        canvas[int(box.y0) : int(box.y1), int(box.x0) : int(box.x1)] = patch
        regions[sample_idx] = PseudoRegion(
            box=box,
            caption_ids=tuple(sample.caption_ids),
            tag_ids=tuple(sample.tags),
            source_sample_id=sample_idx,
        )
    return MosaicSample(
        canvas=canvas,
        grid=grid,
        regions=list(regions),
        composed=[],
        cell_assignment=tuple(int(p) for p in perm),
    )


def sample_composed_regions(
    grid: GridSpec,
    count: int,
    canvas_size: int,
    rng: np.random.Generator,
    captions_by_cell: list[tuple[int, ...]] | None = None,
) -> list[ComposedRegion]:
    """Draw ``count`` rectangular blocks of ≥ 2 contiguous cells.

    Duplicates across draws are allowed. On a 1x1 grid there is nothing to
    compose and the result is empty.
    """
    if count < 0:
        raise ConfigError(f"composed-region count must be ≥ 0, got {count}")
    if grid.cells < 2:
        if count > 0:
            log.info("1x1 grid has no composable cells; skipping composed regions")
        return []
    edges = grid_edges(grid.rows, canvas_size)
    out: list[ComposedRegion] = []
    for _ in range(count):
        while True:
            r = int(rng.integers(1, grid.rows + 1))
            c = int(rng.integers(1, grid.cols + 1))
            if r * c >= 2:
                break
        r0 = int(rng.integers(0, grid.rows - r + 1))
        c0 = int(rng.integers(0, grid.cols - c + 1))
        members = tuple(
            row * grid.cols + col
            for row in range(r0, r0 + r)
            for col in range(c0, c0 + c)
        )
        box = Box(float(edges[c0]), float(edges[r0]), float(edges[c0 + c]), float(edges[r0 + r]))
        captions: tuple[tuple[int, ...], ...] = ()
        if captions_by_cell is not None:
            captions = tuple(captions_by_cell[m] for m in members)
        out.append(ComposedRegion(box=box, member_cells=members, target_caption_ids=captions))
    return out


def attach_composed(
    sample: MosaicSample, count: int, canvas_size: int, rng: np.random.Generator
) -> MosaicSample:
    """Fill ``sample.composed`` with freshly drawn composed regions."""
    captions_by_cell = [
        sample.regions[sample.cell_assignment[cell]].caption_ids
        for cell in range(sample.grid.cells)
    ]
    composed = sample_composed_regions(sample.grid, count, canvas_size, rng, captions_by_cell)
    sample.composed = composed
    return sample


def max_size_box(region: PseudoRegion, candidates: list[Box]) -> Box:
    """Largest-area candidate fully inside the region; earliest wins ties.

    Falls back to the region's own box when no candidate fits.
    """
    if not candidates:
        raise ValueError("max_size_box needs at least one candidate")
    best: Box | None = None
    best_area = -1.0
    for cand in candidates:
        if region.box.contains(cand) and cand.area > best_area:
            best = cand
            best_area = cand.area
    return best if best is not None else region.box


def check_tiling(sample: MosaicSample, canvas_size: int) -> None:
    """Raise if region boxes fail to tile the canvas exactly."""
    grid = sample.grid
    expected = {cell_box(grid, i, canvas_size).as_tuple() for i in range(grid.cells)}
    actual = {r.box.as_tuple() for r in sample.regions}
    if actual != expected:
        raise ValueError("region boxes do not tile the canvas")
    total = sum(r.box.area for r in sample.regions)
    if total != float(canvas_size * canvas_size):
        raise ValueError(f"region areas sum to {total}, canvas is {canvas_size * canvas_size}")


def draw_box(canvas: np.ndarray, box: Box, color, thickness: int = 1) -> None:
    """Paint a rectangle outline in place (canvas is H x W x 3)."""
    h, w = canvas.shape[:2]
    x0, y0 = int(round(box.x0)), int(round(box.y0))
    x1, y1 = min(int(round(box.x1)), w), min(int(round(box.y1)), h)
    t = thickness
    canvas[y0 : y0 + t, x0:x1] = color
    canvas[max(y1 - t, 0) : y1, x0:x1] = color
    canvas[y0:y1, x0 : x0 + t] = color
    canvas[y0:y1, max(x1 - t, 0) : x1] = color
