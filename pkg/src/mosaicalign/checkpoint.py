"""Binary checkpoints: parameters, optimizer moments, and RNG state.

Layout (all integers little-endian):
  magic "MALNCKPT" | version u32 | config-hash 12 ascii bytes | step u64
  | precision u8 (4 or 8) | param count u32
  | per param: name len u16, name utf8, ndim u8, dims u32..., raw floats
  | optimizer t u64
  | per param (same order): raw m floats, raw v floats
  | rng-state len u32, rng-state json utf8

Reload plus continue reproduces an uninterrupted run bit-exactly in
float64 mode.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig, config_hash
from .errors import ConfigError

MAGIC = b"MALNCKPT"
VERSION = 1


def _dtype_of(precision_byte: int):
    return np.dtype("<f8") if precision_byte == 8 else np.dtype("<f4")


def save_checkpoint(trainer, path) -> None:
    path = Path(path)
    cfg = trainer.cfg
    names = sorted(trainer.opt.params)
    precision = 8 if cfg.precision == "float64" else 4
    dtype = _dtype_of(precision)
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += config_hash(cfg).encode("ascii")
    out += struct.pack("<Q", trainer.step)
    out += struct.pack("<B", precision)
    out += struct.pack("<I", len(names))
    for name in names:
        data = trainer.opt.params[name].data
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", data.ndim)
        for dim in data.shape:
            out += struct.pack("<I", dim)
        out += np.ascontiguousarray(data, dtype=dtype).tobytes()
    out += struct.pack("<Q", trainer.opt.t)
    for name in names:
        out += np.ascontiguousarray(trainer.opt.m[name], dtype=dtype).tobytes()
        out += np.ascontiguousarray(trainer.opt.v[name], dtype=dtype).tobytes()
    rng_state = json.dumps(trainer.rng.bit_generator.state).encode("utf-8")
    out += struct.pack("<I", len(rng_state))
    out += rng_state
    path.write_bytes(bytes(out))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        piece = self.blob[self.pos : self.pos + n]
        if len(piece) != n:
            raise ConfigError("checkpoint file is truncated")
        self.pos += n
        return piece

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def load_checkpoint(path, trainer, expect_hash: bool = True) -> int:
    """Restore a trainer in place; returns the restored step."""
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise ConfigError(f"{path} is not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    saved_hash = r.take(12).decode("ascii")
    if expect_hash and saved_hash != config_hash(trainer.cfg):
        raise ConfigError(
            f"checkpoint was written for config {saved_hash}, current config is "
            f"{config_hash(trainer.cfg)}"
        )
    (step,) = r.unpack("<Q")
    (precision,) = r.unpack("<B")
    dtype = _dtype_of(precision)
    (count,) = r.unpack("<I")
    names = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = tuple(r.unpack("<" + "I" * ndim)) if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(size * dtype.itemsize), dtype=dtype).reshape(shape)
        if name not in trainer.opt.params:
            raise ConfigError(f"checkpoint parameter {name!r} not present in the model")
        target = trainer.opt.params[name]
        if target.data.shape != shape:
            raise ConfigError(f"parameter {name!r} shape {shape} != model shape {target.data.shape}")
        target.data = data.astype(target.data.dtype).copy()
        names.append(name)
    (opt_t,) = r.unpack("<Q")
    trainer.opt.t = opt_t
    for name in names:
        size = trainer.opt.params[name].data.size
        shape = trainer.opt.params[name].data.shape
        own = trainer.opt.params[name].data.dtype
        trainer.opt.m[name] = (
            np.frombuffer(r.take(size * dtype.itemsize), dtype=dtype).reshape(shape).astype(own)
        )
        trainer.opt.v[name] = (
            np.frombuffer(r.take(size * dtype.itemsize), dtype=dtype).reshape(shape).astype(own)
        )
    (rng_len,) = r.unpack("<I")
    state = json.loads(r.take(rng_len).decode("utf-8"))
    trainer.rng.bit_generator.state = state
    trainer.step = step
    return step


def peek_step(path) -> int:
    r = _Reader(Path(path).read_bytes()[: len(MAGIC) + 4 + 12 + 8])
    if r.take(len(MAGIC)) != MAGIC:
        raise ConfigError(f"{path} is not a checkpoint file")
    r.unpack("<I")
    r.take(12)
    (step,) = r.unpack("<Q")
    return step
