"""Procedural shapes-on-noise dataset with base/novel concept splits.

Each sample draws one or two non-overlapping colored shapes on a noisy
gray background and captions them from a fixed template. A held-out set
of (shape, color) combinations never appears in training samples, so
evaluation can probe generalization to unseen combinations.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, TokenizerError
from .mosaic import Box

SHAPES = ("circle", "square", "triangle", "cross", "ring")

COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.80, 0.15),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.90, 0.10),
    "cyan": (0.10, 0.85, 0.90),
    "magenta": (0.90, 0.15, 0.85),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.55, 0.15, 0.80),
}

# one combination per color held out of training, spread across shapes
DEFAULT_NOVEL_PAIRS = (
    ("circle", "yellow"),
    ("circle", "magenta"),
    ("square", "cyan"),
    ("square", "orange"),
    ("triangle", "red"),
    ("triangle", "purple"),
    ("cross", "green"),
    ("ring", "blue"),
)

PAD, START, END = 0, 1, 2
SPECIALS = ("<pad>", "<start>", "<end>")


@dataclass(frozen=True)
class Concept:
    shape: str
    color: str
    split: str  # "base" | "novel"

    @property
    def phrase(self) -> str:
        return f"{self.color} {self.shape}"


class ConceptTable:
    """All (shape, color) combinations with their base/novel assignment."""

    def __init__(self, novel_pairs=DEFAULT_NOVEL_PAIRS):
        novel = set(novel_pairs)
        self.concepts: list[Concept] = []
        for shape in SHAPES:
            for color in COLORS:
                split = "novel" if (shape, color) in novel else "base"
                self.concepts.append(Concept(shape, color, split))
        self._index = {(c.shape, c.color): i for i, c in enumerate(self.concepts)}
        self.base_ids = tuple(i for i, c in enumerate(self.concepts) if c.split == "base")
        self.novel_ids = tuple(i for i, c in enumerate(self.concepts) if c.split == "novel")

    def __len__(self) -> int:
        return len(self.concepts)

    def __getitem__(self, concept_id: int) -> Concept:
        return self.concepts[concept_id]

    def id_of(self, shape: str, color: str) -> int:
        return self._index[(shape, color)]


class Vocabulary:
    """Bijective word <-> id map, fixed at dataset-generation time."""

    def __init__(self):
        words = list(SPECIALS) + ["a", "and", "photo", "of"] + list(COLORS) + list(SHAPES)
        self.id_to_word = tuple(words)
        self.word_to_id = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.id_to_word)


def tokenize(caption: str, vocab: Vocabulary, max_len: int) -> tuple[int, ...]:
    """Whitespace tokenization with start/end tokens, padded to ``max_len``."""
    words = caption.lower().split()
    ids = [START]
    for w in words:
        if w not in vocab.word_to_id:
            raise TokenizerError(f"word {w!r} is not in the vocabulary")
        ids.append(vocab.word_to_id[w])
    ids.append(END)
    if len(ids) > max_len:
        raise TokenizerError(f"caption {caption!r} tokenizes to {len(ids)} ids, max is {max_len}")
    ids.extend([PAD] * (max_len - len(ids)))
    return tuple(ids)


def detokenize(ids, vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        if i in (PAD, START):
            continue
        if i == END:
            break
        if not 0 <= i < len(vocab.id_to_word):
            raise TokenizerError(f"token id {i} is outside the vocabulary")
        words.append(vocab.id_to_word[i])
    return " ".join(words)


def class_prompts(concept_ids, table: ConceptTable, vocab: Vocabulary, max_len: int):
    """'a photo of a {color} {shape}' prompt per concept, tokenized."""
    return [tokenize(f"a photo of a {table[i].phrase}", vocab, max_len) for i in concept_ids]


@dataclass
class SynthSample:
    image: np.ndarray  # s x s x 3, float in [0,1]
    caption: str
    caption_ids: tuple[int, ...]
    tags: tuple[int, ...]  # concept ids present
    object_boxes: list[Box] = field(default_factory=list)
    object_concepts: tuple[int, ...] = ()


def _shape_mask(shape: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    dx = xs - cx
    dy = ys - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= 0.9 * r) & (np.abs(dy) <= 0.9 * r)
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    if shape == "cross":
        arm = 0.34 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ConfigError(f"unknown shape {shape!r}")


def _mask_box(mask: np.ndarray) -> Box:
    ys, xs = np.nonzero(mask)
    return Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def generate_sample(
    rng: np.random.Generator,
    allowed_concepts,
    table: ConceptTable,
    vocab: Vocabulary,
    max_len: int,
    size: int = 64,
    noise_sigma: float = 0.05,
    two_object_p: float = 0.5,
) -> SynthSample:
    """Render one captioned sample using only ``allowed_concepts``."""
    if size < 16:
        raise ConfigError(f"sample size must be ≥ 16, got {size}")
    amp = noise_sigma * np.sqrt(3.0)  # uniform noise with the requested std
    image = 0.5 + rng.uniform(-amp, amp, size=(size, size, 3))
    n_obj = 2 if (rng.random() < two_object_p and len(allowed_concepts) >= 2) else 1
    picked = rng.choice(np.asarray(allowed_concepts), size=n_obj, replace=False)
    boxes: list[Box] = []
    concepts: list[int] = []
    phrases: list[str] = []
    for cid in picked:
        concept = table[int(cid)]
        for attempt in range(60):
            shrink = 1.0 if attempt < 30 else 0.75
            r = rng.uniform(0.16 * size, 0.26 * size) * shrink
            cx = rng.uniform(r + 1, size - r - 2)
            cy = rng.uniform(r + 1, size - r - 2)
            mask = _shape_mask(concept.shape, size, cx, cy, r)
            box = _mask_box(mask)
            if all(_disjoint(box, b, margin=2.0) for b in boxes):
                break
        image[mask] = COLORS[concept.color]
        boxes.append(box)
        concepts.append(int(cid))
        phrases.append(f"a {concept.phrase}")
    caption = " and ".join(phrases)
    image = np.clip(image, 0.0, 1.0)
    return SynthSample(
        image=image,
        caption=caption,
        caption_ids=tokenize(caption, vocab, max_len),
        tags=tuple(concepts),
        object_boxes=boxes,
        object_concepts=tuple(concepts),
    )


def _disjoint(a: Box, b: Box, margin: float = 0.0) -> bool:
    return (
        a.x1 + margin <= b.x0
        or b.x1 + margin <= a.x0
        or a.y1 + margin <= b.y0
        or b.y1 + margin <= a.y0
    )


@dataclass
class DatasetConfig:
    seed: int = 1234
    train_size: int = 2000
    eval_size: int = 200
    image_size: int = 64
    max_len: int = 12
    noise_sigma: float = 0.05
    two_object_p: float = 0.5
    novel_pairs: tuple = DEFAULT_NOVEL_PAIRS


_EVAL_SEED_OFFSET = 0x5EED0000


class SynthDataset:
    """Deterministically regenerable train/eval splits plus vocabulary."""

    def __init__(self, cfg: DatasetConfig):
        self.cfg = cfg
        self.table = ConceptTable(tuple(tuple(p) for p in cfg.novel_pairs))
        self.vocab = Vocabulary()
        self.train: list[SynthSample] = [
            self._make(i, self.table.base_ids) for i in range(cfg.train_size)
        ]
        all_ids = tuple(range(len(self.table)))
        self.eval: list[SynthSample] = [
            self._make(i + _EVAL_SEED_OFFSET, all_ids) for i in range(cfg.eval_size)
        ]

    def _make(self, index: int, allowed) -> SynthSample:
        rng = np.random.default_rng(self.cfg.seed ^ index)
        return generate_sample(
            rng,
            allowed,
            self.table,
            self.vocab,
            self.cfg.max_len,
            size=self.cfg.image_size,
            noise_sigma=self.cfg.noise_sigma,
            two_object_p=self.cfg.two_object_p,
        )


def dataset_manifest(cfg: DatasetConfig) -> dict:
    payload = {
        "seed": cfg.seed,
        "train_size": cfg.train_size,
        "eval_size": cfg.eval_size,
        "image_size": cfg.image_size,
        "max_len": cfg.max_len,
        "noise_sigma": cfg.noise_sigma,
        "two_object_p": cfg.two_object_p,
        "novel_pairs": [list(p) for p in cfg.novel_pairs],
    }
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]
    vocab = Vocabulary()
    return {
        "config": payload,
        "config_hash": digest,
        "vocabulary": list(vocab.id_to_word),
        "shapes": list(SHAPES),
        "colors": list(COLORS),
    }


def to_png_bytes(image: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    save_png(image, buf)
    return buf.getvalue()


def save_png(image: np.ndarray, path) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_cache(dataset: SynthDataset, out_dir: Path) -> dict:
    """Write PNG + JSON per sample and a manifest; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = dataset_manifest(dataset.cfg)
    counts = {"train": len(dataset.train), "eval": len(dataset.eval)}
    manifest["counts"] = counts
    for split, samples in (("train", dataset.train), ("eval", dataset.eval)):
        split_dir = out_dir / split
        split_dir.mkdir(exist_ok=True)
        for i, s in enumerate(samples):
            save_png(s.image, split_dir / f"{i:05d}.png")
            record = {
                "caption": s.caption,
                "caption_ids": list(s.caption_ids),
                "tags": list(s.tags),
                "object_boxes": [list(b.as_tuple()) for b in s.object_boxes],
                "object_concepts": list(s.object_concepts),
            }
            (split_dir / f"{i:05d}.json").write_text(json.dumps(record, sort_keys=True))
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def read_manifest(out_dir: Path) -> dict | None:
    path = Path(out_dir) / "manifest.json"
    if not path.exists():
        return None
    return json.loads(path.read_text())
