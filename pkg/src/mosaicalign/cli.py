"""Command-line operator surface.

Subcommands: generate-data, train, eval, heatmap, per-pixel,
inspect-mosaic, validate-config. Exit codes: 0 success, 1 usage or
config error, 2 runtime or numeric failure. Config values resolve as
CLI overrides > config file > defaults. The training run directory
root comes from --out or the MOSAICALIGN_RUN_ROOT environment variable.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    RunConfig,
    apply_overrides,
    config_hash,
    load_config,
    serialize_config,
)
from .errors import ConfigError, NumericError, TokenizerError
from .evaluation import (
    evaluate_regions,
    heatmap,
    per_pixel_classify,
    prompt_embeddings,
    render_heatmap,
    render_labels,
)
from .mosaic import GridPolicy, attach_composed, build_mosaic, check_tiling, draw_box, plan_grid
from .synthdata import (
    SynthDataset,
    dataset_manifest,
    load_png,
    read_manifest,
    save_png,
    tokenize,
    write_cache,
)
from .training import Trainer, dataset_config

log = logging.getLogger("mosaicalign")

RUN_ROOT_ENV = "MOSAICALIGN_RUN_ROOT"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mosaicalign",
        description="Region-text contrastive training on mosaicked canvases",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        return p

    p = with_config(sub.add_parser("generate-data", help="write the dataset cache"))
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true", help="overwrite an incompatible cache")

    p = with_config(sub.add_parser("train", help="train a model"))
    p.add_argument("--data", type=Path, default=None, help="dataset cache dir (manifest checked)")
    p.add_argument("--out", type=Path, default=None, help="run directory root")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")

    p = with_config(sub.add_parser("eval", help="zero-shot region classification"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="metrics JSON path (default stdout)")

    p = with_config(sub.add_parser("heatmap", help="text response map for one image"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--sample-id", type=int, default=None, help="eval-split sample index")
    p.add_argument("--image", type=Path, default=None, help="PNG to query instead")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = with_config(sub.add_parser("per-pixel", help="per-cell concept classification"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--sample-id", type=int, default=None)
    p.add_argument("--image", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)

    p = with_config(sub.add_parser("inspect-mosaic", help="render one mosaic with boxes"))
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", type=Path, required=True)

    with_config(sub.add_parser("validate-config", help="parse and echo a config"))

    return parser


def _resolve_config(args, overrides: list[str]) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def _overrides_from(rest: list[str]) -> list[str]:
    """Turn leftover ``--key value`` pairs into ``key=value`` overrides."""
    out = []
    i = 0
    while i < len(rest):
        token = rest[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r}")
        key = token[2:]
        if "=" in key:
            out.append(key)
            i += 1
            continue
        if i + 1 >= len(rest):
            raise ConfigError(f"override {token!r} is missing a value")
        out.append(f"{key}={rest[i + 1]}")
        i += 2
    return [item.replace("-", "_").split("=", 1)[0] + "=" + item.split("=", 1)[1] for item in out]


def _load_trained(args, cfg: RunConfig) -> Trainer:
    trainer = Trainer(cfg)
    load_checkpoint(args.checkpoint, trainer)
    return trainer


def _query_image(args, trainer: Trainer) -> np.ndarray:
    if (args.sample_id is None) == (args.image is None):
        raise ConfigError("pass exactly one of --sample-id or --image")
    if args.image is not None:
        if not args.image.exists():
            raise ConfigError(f"image {args.image} does not exist")
        return load_png(args.image)
    samples = trainer.dataset.eval
    if not 0 <= args.sample_id < len(samples):
        raise ConfigError(f"sample id {args.sample_id} outside eval split of {len(samples)}")
    return samples[args.sample_id].image


def cmd_generate_data(args, overrides) -> int:
    cfg = _resolve_config(args, overrides)
    ds_cfg = dataset_config(cfg)
    existing = read_manifest(args.out)
    fresh = dataset_manifest(ds_cfg)
    if existing is not None and existing.get("config_hash") != fresh["config_hash"]:
        if not args.force:
            raise ConfigError(
                f"{args.out} holds a cache for config {existing.get('config_hash')}; "
                "pass --force to overwrite"
            )
        log.info("overwriting incompatible cache in %s", args.out)
    dataset = SynthDataset(ds_cfg)
    manifest = write_cache(dataset, args.out)
    log.info(
        "wrote %d train + %d eval samples to %s (config %s)",
        manifest["counts"]["train"],
        manifest["counts"]["eval"],
        args.out,
        manifest["config_hash"],
    )
    return 0


def _check_dataset(args, cfg: RunConfig) -> None:
    if args.data is None:
        return
    manifest = read_manifest(args.data)
    if manifest is None:
        raise ConfigError(f"no dataset manifest in {args.data}; run generate-data first")
    expected = dataset_manifest(dataset_config(cfg))
    if manifest["config_hash"] != expected["config_hash"]:
        raise ConfigError(
            f"dataset cache {args.data} was generated for config "
            f"{manifest['config_hash']}, this run needs {expected['config_hash']}"
        )


def cmd_train(args, overrides) -> int:
    cfg = _resolve_config(args, overrides)
    _check_dataset(args, cfg)
    root = args.out or Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    run_dir = Path(root) / f"{config_hash(cfg)}-{time.strftime('%Y%m%d-%H%M%S')}"
    trainer = Trainer(cfg)
    if args.resume is not None:
        step = load_checkpoint(args.resume, trainer)
        log.info("resumed from %s at step %d", args.resume, step)
    metrics = trainer.run(run_dir)
    log.info("run complete at step %d; artifacts in %s", trainer.step, run_dir)
    if metrics:
        log.info("final eval: %s", json.dumps(metrics))
    print(run_dir)
    return 0


def cmd_eval(args, overrides) -> int:
    cfg = _resolve_config(args, overrides)
    trainer = _load_trained(args, cfg)
    metrics = evaluate_regions(trainer.model, trainer.dataset, cfg)
    payload = json.dumps(metrics, sort_keys=True, indent=1)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(payload)
    else:
        print(payload)
    return 0


def cmd_heatmap(args, overrides) -> int:
    cfg = _resolve_config(args, overrides)
    trainer = _load_trained(args, cfg)
    image = _query_image(args, trainer)
    try:
        ids = tokenize(args.text, trainer.dataset.vocab, cfg.max_text_len)
    except TokenizerError as exc:
        raise ConfigError(str(exc)) from exc
    result = heatmap(trainer.model, image, ids, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    save_png(render_heatmap(result.normalized), args.out / "heatmap.png")
    record = {
        "text": args.text,
        "argmax_cell": list(result.argmax_cell),
        "best_box": list(result.best_box.as_tuple()),
        "response_min": float(result.response.min()),
        "response_max": float(result.response.max()),
    }
    (args.out / "heatmap.json").write_text(json.dumps(record, sort_keys=True, indent=1))
    log.info("argmax cell %s, best box %s", result.argmax_cell, result.best_box.as_tuple())
    return 0


def cmd_per_pixel(args, overrides) -> int:
    cfg = _resolve_config(args, overrides)
    trainer = _load_trained(args, cfg)
    image = _query_image(args, trainer)
    prompts = prompt_embeddings(trainer.model, cfg)
    labels = per_pixel_classify(trainer.model, image, prompts, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    save_png(render_labels(labels, len(trainer.dataset.table)), args.out / "labels.png")
    names = [trainer.dataset.table[i].phrase for i in range(len(trainer.dataset.table))]
    record = {"labels": labels.tolist(), "classes": names}
    (args.out / "labels.json").write_text(json.dumps(record, sort_keys=True, indent=1))
    return 0


def cmd_inspect_mosaic(args, overrides) -> int:
    cfg = _resolve_config(args, overrides)
    if args.seed is not None:
        cfg = apply_overrides(cfg, [f"seed={args.seed}"])
    dataset = SynthDataset(dataset_config(cfg))
    rng = np.random.default_rng([cfg.seed, 1])
    grid = plan_grid(rng, GridPolicy.parse(cfg.grid_policy))
    picks = rng.choice(len(dataset.train), size=grid.cells, replace=False)
    members = [dataset.train[int(i)] for i in picks]
    mosaic = build_mosaic(members, grid, cfg.canvas_size, rng)
    mosaic = attach_composed(mosaic, cfg.composed_regions, cfg.canvas_size, rng)
    check_tiling(mosaic, cfg.canvas_size)
    canvas = mosaic.canvas.copy()
    for region in mosaic.regions:
        draw_box(canvas, region.box, (1.0, 1.0, 1.0))
    for comp in mosaic.composed:
        draw_box(canvas, comp.box, (0.0, 0.0, 0.0))
    args.out.mkdir(parents=True, exist_ok=True)
    save_png(canvas, args.out / "mosaic.png")
    record = {
        "canvas_size": cfg.canvas_size,
        "grid": [mosaic.grid.rows, mosaic.grid.cols],
        "regions": [
            {
                "box": list(r.box.as_tuple()),
                "caption": members[r.source_sample_id].caption,
                "tags": list(r.tag_ids),
            }
            for r in mosaic.regions
        ],
        "composed": [
            {"box": list(c.box.as_tuple()), "members": list(c.member_cells)}
            for c in mosaic.composed
        ],
        "tiling_ok": True,
    }
    (args.out / "mosaic.json").write_text(json.dumps(record, sort_keys=True, indent=1))
    return 0


def cmd_validate_config(args, overrides) -> int:
    cfg = _resolve_config(args, overrides)
    sys.stdout.write(serialize_config(cfg))
    return 0


_COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
    "per-pixel": cmd_per_pixel,
    "inspect-mosaic": cmd_inspect_mosaic,
    "validate-config": cmd_validate_config,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        overrides = _overrides_from(rest)
        return _COMMANDS[args.command](args, overrides)
    except (ConfigError, TokenizerError) as exc:
        log.error("%s", exc)
        return 1
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.error("runtime failure: %s", exc, exc_info=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
