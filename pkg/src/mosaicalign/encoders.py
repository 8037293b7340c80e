"""Tiny transformer encoders for images and text.

The vision encoder runs its penultimate activations through BOTH variants
of the final residual attention block: the standard one feeds the global
([CLS]) embedding, and an attention-free variant feeds a dense per-patch
feature map. The two variants share every parameter; only the token
mixing differs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, TokenizerError
from .synthdata import END
from .tensor import Tensor


@dataclass(frozen=True)
class VisionConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 4
    width: int = 64
    heads: int = 4
    embed_dim: int = 32

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return 1 + self.grid * self.grid


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int = 20
    max_len: int = 12
    depth: int = 2
    width: int = 64
    heads: int = 4
    embed_dim: int = 32

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")


@dataclass
class DenseFeatureMap:
    """Per-patch features [B, h, w, d] from the attention-free final block."""

    features: Tensor
    stride: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.features.shape[1], self.features.shape[2]


def _normal(rng: np.random.Generator, shape, scale: float, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class TransformerBlock:
    """Pre-norm residual attention block parameters and both forward paths."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator, dtype):
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        self.scale = 1.0 / np.sqrt(self.head_dim)
        s = 0.02
        self.p = {
            "ln1_g": _ones(width, dtype),
            "ln1_b": _zeros(width, dtype),
            "wq": _normal(rng, (width, width), s, dtype),
            "bq": _zeros(width, dtype),
            "wk": _normal(rng, (width, width), s, dtype),
            "bk": _zeros(width, dtype),
            "wv": _normal(rng, (width, width), s, dtype),
            "bv": _zeros(width, dtype),
            "wo": _normal(rng, (width, width), s, dtype),
            "bo": _zeros(width, dtype),
            "ln2_g": _ones(width, dtype),
            "ln2_b": _zeros(width, dtype),
            "w_ffn1": _normal(rng, (width, 4 * width), s, dtype),
            "b_ffn1": _zeros(4 * width, dtype),
            "w_ffn2": _normal(rng, (4 * width, width), s, dtype),
            "b_ffn2": _zeros(width, dtype),
        }

    def _ffn(self, y: Tensor) -> Tensor:
        h = T.layernorm(y, self.p["ln2_g"], self.p["ln2_b"])
        h = T.gelu(T.linear(h, self.p["w_ffn1"], self.p["b_ffn1"]))
        return T.linear(h, self.p["w_ffn2"], self.p["b_ffn2"])

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Standard block: x [B, n, w] -> x + Proj(attention(v)) + FFN."""
        batch, n, w = x.shape
        h = T.layernorm(x, self.p["ln1_g"], self.p["ln1_b"])
        q = T.split_heads(T.linear(h, self.p["wq"], self.p["bq"]), self.heads)
        k = T.split_heads(T.linear(h, self.p["wk"], self.p["bk"]), self.heads)
        v = T.split_heads(T.linear(h, self.p["wv"], self.p["bv"]), self.heads)
        # scale q (the small operand) rather than the n^2 score matrix
        att = T.matmul(q * self.scale, T.transpose(k, (0, 2, 1)))
        if mask is not None:
            att = att + Tensor(mask.astype(att.data.dtype))
        att = T.softmax(att, axis=-1)
        mixed = T.merge_heads(T.matmul(att, v), batch)
        y = x + T.linear(mixed, self.p["wo"], self.p["bo"])
        return y + self._ffn(y)

    def forward_no_attention(self, x: Tensor) -> Tensor:
        """Attention-free variant: strictly per-token, same parameters."""
        h = T.layernorm(x, self.p["ln1_g"], self.p["ln1_b"])
        v = T.linear(h, self.p["wv"], self.p["bv"])
        y = x + T.linear(v, self.p["wo"], self.p["bo"])
        return y + self._ffn(y)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in self.p.items()}


def res_attn_block(x: Tensor, block: TransformerBlock, mask: np.ndarray | None = None) -> Tensor:
    return block.forward(x, mask)


def modified_res_attn_block(x: Tensor, block: TransformerBlock) -> Tensor:
    return block.forward_no_attention(x)


class VisionEncoder:
    def __init__(self, cfg: VisionConfig, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg
        self.dtype = dtype
        w = cfg.width
        patch_dim = cfg.patch_size * cfg.patch_size * 3
        self.patch_w = _normal(rng, (patch_dim, w), 0.02, dtype)
        self.patch_b = _zeros(w, dtype)
        self.cls = _normal(rng, (1, 1, w), 0.02, dtype)
        self.pos = _normal(rng, (cfg.tokens, w), 0.01, dtype)
        self.blocks = [TransformerBlock(w, cfg.heads, rng, dtype) for _ in range(cfg.depth)]
        self.out_ln_g = _ones(w, dtype)
        self.out_ln_b = _zeros(w, dtype)
        self.out_w = _normal(rng, (w, cfg.embed_dim), 0.02, dtype)

    def named_params(self) -> dict[str, Tensor]:
        params = {
            "vision.patch_w": self.patch_w,
            "vision.patch_b": self.patch_b,
            "vision.cls": self.cls,
            "vision.pos": self.pos,
            "vision.out_ln_g": self.out_ln_g,
            "vision.out_ln_b": self.out_ln_b,
            "vision.out_w": self.out_w,
        }
        for i, blk in enumerate(self.blocks):
            params.update(blk.named_params(f"vision.block{i}"))
        return params

    def _patchify(self, images: np.ndarray) -> np.ndarray:
        p = self.cfg.patch_size
        g = self.cfg.grid
        b = images.shape[0]
        x = images.reshape(b, g, p, g, p, 3)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(x).reshape(b, g * g, p * p * 3).astype(self.dtype)

    def _embed_out(self, tokens: Tensor) -> Tensor:
        h = T.layernorm(tokens, self.out_ln_g, self.out_ln_b)
        return T.linear(h, self.out_w)

    def forward(
        self, images: np.ndarray, global_count: int | None = None
    ) -> tuple[Tensor | None, DenseFeatureMap]:
        """images [B, S, S, 3] -> (unit global embeddings, dense map).

        Both final-block variants run on the same penultimate activations.
        ``global_count`` limits the standard (global) path to the first k
        images; 0 skips it and returns None. The dense map holds raw
        per-patch embeddings; similarity consumers normalize per cell.
        """
        if images.ndim == 3:
            images = images[None]
        if images.shape[1] != self.cfg.image_size or images.shape[2] != self.cfg.image_size:
            raise ConfigError(
                f"expected {self.cfg.image_size}x{self.cfg.image_size} images, got {images.shape[1:3]}"
            )
        b = images.shape[0]
        g = self.cfg.grid
        patches = Tensor(self._patchify(images))
        x = T.linear(patches, self.patch_w, self.patch_b)  # [B, hw, w]
        cls = Tensor(np.zeros((b, 1, self.cfg.width), dtype=self.dtype)) + self.cls
        x = T.concat([cls, x], axis=1) + self.pos
        for blk in self.blocks[:-1]:
            x = blk.forward(x)
        penultimate = x
        n_global = b if global_count is None else global_count
        global_emb = None
        if n_global > 0:
            z_std = self.blocks[-1].forward(
                penultimate if n_global == b else T.slice_axis(penultimate, 0, 0, n_global)
            )
            cls_tok = T.slice_axis(z_std, 1, 0, 1)  # [k, 1, w]
            global_emb = T.l2_normalize(
                T.reshape(self._embed_out(cls_tok), (n_global, self.cfg.embed_dim))
            )
        z_mod = self.blocks[-1].forward_no_attention(penultimate)
        dense_tok = self._embed_out(T.slice_axis(z_mod, 1, 1, self.cfg.tokens))
        dense = T.reshape(dense_tok, (b, g, g, self.cfg.embed_dim))
        return global_emb, DenseFeatureMap(features=dense, stride=self.cfg.patch_size)

    def param_count(self) -> int:
        return sum(p.data.size for p in self.named_params().values())


class TextEncoder:
    def __init__(self, cfg: TextConfig, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg
        self.dtype = dtype
        w = cfg.width
        self.tok_emb = _normal(rng, (cfg.vocab_size, w), 0.02, dtype)
        self.pos = _normal(rng, (cfg.max_len, w), 0.01, dtype)
        self.blocks = [TransformerBlock(w, cfg.heads, rng, dtype) for _ in range(cfg.depth)]
        self.out_ln_g = _ones(w, dtype)
        self.out_ln_b = _zeros(w, dtype)
        self.out_w = _normal(rng, (w, cfg.embed_dim), 0.02, dtype)
        mask = np.triu(np.full((cfg.max_len, cfg.max_len), -1e9), k=1)
        self._causal = mask

    def named_params(self) -> dict[str, Tensor]:
        params = {
            "text.tok_emb": self.tok_emb,
            "text.pos": self.pos,
            "text.out_ln_g": self.out_ln_g,
            "text.out_ln_b": self.out_ln_b,
            "text.out_w": self.out_w,
        }
        for i, blk in enumerate(self.blocks):
            params.update(blk.named_params(f"text.block{i}"))
        return params

    def _check_ids(self, ids: np.ndarray) -> np.ndarray:
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] != self.cfg.max_len:
            raise TokenizerError(f"token rows must have length {self.cfg.max_len}, got {ids.shape[1]}")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise TokenizerError(f"token id {int(ids.max())} outside vocabulary of size {self.cfg.vocab_size}")
        if not (ids == END).any(axis=1).all():
            raise TokenizerError("every token sequence must contain the end token")
        return ids

    def _trunk(self, ids: np.ndarray) -> Tensor:
        x = T.gather_rows(self.tok_emb, ids) + self.pos
        for blk in self.blocks:
            x = blk.forward(x, self._causal)
        return x

    def forward(self, ids: np.ndarray) -> Tensor:
        """Token id rows [B, max_len] -> unit embeddings [B, e] at the end token."""
        ids = self._check_ids(np.asarray(ids))
        x = self._trunk(ids)
        eot = np.argmax(ids == END, axis=1)
        pooled = T.take_positions(x, eot)  # [B, w]
        h = T.layernorm(pooled, self.out_ln_g, self.out_ln_b)
        return T.l2_normalize(T.linear(h, self.out_w))

    def forward_tokens(self, ids: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Unit embeddings for all positions [B, max_len, e] plus a content mask.

        Content positions are the caption words: after start, before end.
        """
        ids = self._check_ids(np.asarray(ids))
        x = self._trunk(ids)
        h = T.layernorm(x, self.out_ln_g, self.out_ln_b)
        embs = T.l2_normalize(T.linear(h, self.out_w))
        eot = np.argmax(ids == END, axis=1)
        positions = np.arange(ids.shape[1])[None, :]
        content = (positions >= 1) & (positions < eot[:, None])
        return embs, content

    def param_count(self) -> int:
        return sum(p.data.size for p in self.named_params().values())
