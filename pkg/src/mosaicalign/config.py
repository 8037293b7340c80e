"""Run configuration: declarative, hashable, JSON round-trippable."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

LOSS_NAMES = ("info_nce", "bce_tag", "soft_target_ce", "grounding")


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "float64"  # "float64" | "float32"

    # batch assembly
    canvas_size: int = 64
    grid_policy: str = "random(2,3,4)"
    n_plain: int = 2
    n_mosaic: int = 2
    sampling_mode: str = "random"  # random | text-similarity | image-similarity
    crop_area: tuple[float, float] = (0.5, 1.0)
    crop_aspect: tuple[float, float] = (0.75, 4.0 / 3.0)

    # losses
    loss_weights: dict[str, float] = field(
        default_factory=lambda: {"info_nce": 1.0, "bce_tag": 1.0}
    )
    composed_regions: int = 4
    composed_weight: float = 1.0
    grounding_samples: int = 4
    tag_candidates_per_cell: int = 10
    tag_bias_init: float = -2.0
    temp_init: float = 1.0 / 0.07
    temp_bounds: tuple[float, float] = (1.0, 100.0)

    # optimizer
    lr: float = 3e-4
    lr_schedule: str = "cosine"  # "constant" | "cosine" (decays to 10% of lr)
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    # schedule
    steps: int = 5000
    eval_cadence: int = 500  # 0 = evaluate at the end only
    log_every: int = 1

    # model
    patch_size: int = 8
    vision_depth: int = 4
    vision_width: int = 64
    vision_heads: int = 4
    embed_dim: int = 32
    text_depth: int = 2
    text_width: int = 64
    text_heads: int = 4

    # dataset
    data_seed: int = 1234
    train_size: int = 2000
    eval_size: int = 200
    data_image_size: int = 64
    max_text_len: int = 12
    noise_sigma: float = 0.05
    two_object_p: float = 0.5

    def __post_init__(self):
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64 or float32, got {self.precision!r}")
        if self.n_plain + self.n_mosaic < 1:
            raise ConfigError("batch must contain at least one sample")
        if self.sampling_mode not in ("random", "text-similarity", "image-similarity"):
            raise ConfigError(f"unknown sampling mode {self.sampling_mode!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        unknown = set(self.loss_weights) - set(LOSS_NAMES)
        if unknown:
            raise ConfigError(f"unknown losses {sorted(unknown)}; choose from {LOSS_NAMES}")
        if not self.loss_weights:
            raise ConfigError("at least one loss must be enabled")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key, value in d.items():
            if isinstance(value, tuple):
                d[key] = list(value)
        return d


_TUPLE_FIELDS = {"crop_area", "crop_aspect", "temp_bounds"}
_FIELD_TYPES = {f.name: f for f in dataclasses.fields(RunConfig)}


def config_from_dict(data: dict) -> RunConfig:
    unknown = set(data) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _TUPLE_FIELDS:
            value = tuple(value)
        if key == "loss_weights":
            value = {str(k): float(v) for k, v in value.items()}
        kwargs[key] = value
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return config_from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(serialize_config(cfg))


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=1) + "\n"


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def _parse_value(raw: str, current):
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(float(x) for x in raw.split(","))
    if isinstance(current, dict):
        out = {}
        for part in raw.split(","):
            name, _, weight = part.partition("=")
            out[name.strip()] = float(weight) if weight else 1.0
        return out
    return raw


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``key=value`` strings on top of a config (CLI beats file)."""
    data = cfg.to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like key=value")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        data[key] = _parse_value(raw, getattr(cfg, key))
    return config_from_dict(data)


def baseline_config(cfg: RunConfig) -> RunConfig:
    """Equal-budget no-mosaic comparison arm.

    Mosaics become plain samples and supervision reduces to image-level
    InfoNCE on global embeddings.
    """
    data = cfg.to_dict()
    data["n_plain"] = cfg.n_plain + cfg.n_mosaic
    data["n_mosaic"] = 0
    data["loss_weights"] = {"info_nce": 1.0}
    return config_from_dict(data)


def desk_config(**overrides) -> RunConfig:
    """Default minutes-scale CPU preset."""
    return config_from_dict({**RunConfig().to_dict(), **overrides})


def large_batch_config(**overrides) -> RunConfig:
    """Preset mirroring full-scale practice: low LR, 128-sample batches.

    Impractical from random initialization on a CPU; ships for completeness.
    """
    base = RunConfig().to_dict()
    base.update({"lr": 1e-5, "n_plain": 64, "n_mosaic": 64})
    base.update(overrides)
    return config_from_dict(base)
