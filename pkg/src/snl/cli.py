"""Command-line entry point: ``snl <verb> [options]``.

Exit codes: 0 success, 2 configuration or usage error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import yaml

from snl.config import TrainConfig, config_from_mapping, env_overrides, load_config
from snl.data import convert_visa
from snl.errors import ConfigError, DivergenceError, UsageError
from snl.evaluate import probe, report, score_images, write_heatmaps, write_probe_report
from snl.metrics import write_metrics_csv
from snl.model import load_checkpoint
from snl.trainer import GRIDS, ablate, manifests, run_experiment, train

logger = logging.getLogger("snl")

EXIT_CONFIG = 2
EXIT_DIVERGED = 3

_BOOL_TYPES = {"bool"}
_SCALAR_TYPES = {"int": int, "float": float, "str": str}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("configuration (each flag overrides the config file and SNL_* variables)")
    group.add_argument("--config", type=Path, help="flat YAML config file")
    group.add_argument("--toy", action="store_true", help="start from the desk-scale toy preset")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in _BOOL_TYPES:
            group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            group.add_argument(flag, dest=f.name, type=_SCALAR_TYPES[f.type], default=None, metavar=f.type.upper())


def _explicit(args: argparse.Namespace) -> dict:
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    return {k: v for k, v in vars(args).items() if k in names and v is not None}


def resolve_config(args: argparse.Namespace, base: TrainConfig | None = None) -> TrainConfig:
    """defaults (or toy preset, or ``base``) < config file < environment < flags."""
    if base is None:
        base = TrainConfig.toy() if args.toy else TrainConfig()
    cfg = load_config(args.config, base=base)
    return config_from_mapping(_explicit(args), cfg)


def _checkpoint_config(args: argparse.Namespace):
    """Model and config for checkpoint-driven verbs.

    The checkpoint's training config is the base; file, environment and flags
    may change evaluation settings but not the architecture it was trained with.
    """
    model, archive = load_checkpoint(args.checkpoint)
    trained = config_from_mapping(archive.get("extra", {}).get("config", {}))
    cfg = resolve_config(args, base=trained)
    fixed = {
        "topology": archive["topology"],
        "backbone": archive["teacher"]["adapter"],
        "image_size": archive["teacher"]["input_size"],
    }
    for name, value in fixed.items():
        if getattr(cfg, name) != value:
            raise ConfigError(f"{name}={getattr(cfg, name)!r} does not match the checkpoint ({value!r})")
    return model, cfg.validate()


def _print(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


# --------------------------------------------------------------------------
# verbs


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args).validate()
    if args.evaluate:
        record, _ = run_experiment(cfg)
    else:
        record, _ = train(cfg)
    _print(
        {
            "config_hash": record.config_hash,
            "checkpoint": record.checkpoint,
            "final_loss": record.history[-1] if record.history else None,
            "metrics": record.metrics,
            "wall_clock": round(record.wall_clock, 3),
        }
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model, cfg = _checkpoint_config(args)
    _, test = manifests(cfg)
    scored = score_images(model, test, cfg)
    rows = report(scored, cfg)
    out = args.out or Path(args.checkpoint).with_name("metrics.csv")
    write_metrics_csv(out, rows)
    if args.heatmaps:
        write_heatmaps(scored, args.heatmaps)
    mean_img = sum(r.image_auroc for r in rows) / len(rows)
    _print({"metrics_csv": str(out), "image_auroc": mean_img, "categories": len(rows)})
    return 0


def cmd_heatmaps(args: argparse.Namespace) -> int:
    model, cfg = _checkpoint_config(args)
    _, test = manifests(cfg)
    lo, hi = write_heatmaps(score_images(model, test, cfg), args.out)
    _print({"heatmaps": str(args.out), "map_min": lo, "map_max": hi})
    return 0


def _parse_pair(text: str) -> tuple[str, str]:
    src, sep, dst = text.partition(":")
    if not sep or not src or not dst:
        raise argparse.ArgumentTypeError(f"expected SRC:DST, got {text!r}")
    return src, dst


def cmd_probe(args: argparse.Namespace) -> int:
    model, cfg = _checkpoint_config(args)
    _, test = manifests(cfg)
    rep = probe(model, test, cfg, kind=args.kind, pairs=args.pair, seed=args.probe_seed, bins=args.bins)
    out = args.out or Path(args.checkpoint).with_name(f"probe_{args.kind}.json")
    write_probe_report(rep, out)
    _print({"probe_report": str(out), "auroc": rep["auroc"]})
    return 0


def load_grid(spec: str) -> list[dict]:
    """A preset name (``losses``, ``centers``) or a YAML/JSON file holding a list of cells."""
    if spec in GRIDS:
        return [dict(cell) for cell in GRIDS[spec]]
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"grid must be one of {sorted(GRIDS)} or a file, got {spec!r}")
    cells = yaml.safe_load(path.read_text()) or []
    if not isinstance(cells, list) or not all(isinstance(c, dict) for c in cells):
        raise ConfigError(f"{path}: expected a list of mappings")
    return cells


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args).validate()
    grid = load_grid(args.grid)
    out = args.out or Path(cfg.output_dir) / "ablation.csv"
    records = ablate(cfg, grid, out)
    _print({"ablation_csv": str(out), "cells": len(records)})
    return 0


def cmd_convert_visa(args: argparse.Namespace) -> int:
    manifest = convert_visa(args.src, args.dst, args.split_csv)
    _print({"root": str(args.dst), "categories": len(manifest.categories), "train_images": len(manifest)})
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snl", description="Structural teacher-student anomaly detection.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train a student against a frozen teacher")
    _add_config_flags(p)
    p.add_argument("--evaluate", action="store_true", help="evaluate on the test split after training")
    p.set_defaults(func=cmd_train)

    for verb, func, helptext in (
        ("eval", cmd_eval, "per-category AUROC of a checkpoint"),
        ("heatmaps", cmd_heatmaps, "write anomaly-map PNGs for the test split"),
        ("probe", cmd_probe, "cross-class cutpaste/mixup interference probe"),
    ):
        p = sub.add_parser(verb, help=helptext)
        p.add_argument("--checkpoint", required=True, type=Path)
        _add_config_flags(p)
        p.set_defaults(func=func)
        if verb == "eval":
            p.add_argument("--out", type=Path, help="metrics CSV (default: next to the checkpoint)")
            p.add_argument("--heatmaps", type=Path, help="also write heatmaps to this directory")
        elif verb == "heatmaps":
            p.add_argument("--out", type=Path, required=True, help="output directory")
        else:
            p.add_argument("--kind", choices=["cutpaste", "mixup"], default="cutpaste")
            p.add_argument(
                "--pair", type=_parse_pair, action="append", metavar="SRC:DST", help="category pair (repeatable; default: all)"
            )
            p.add_argument("--probe-seed", type=int, default=0)
            p.add_argument("--bins", type=int, default=20)
            p.add_argument("--out", type=Path, help="report JSON (default: next to the checkpoint)")

    p = sub.add_parser("ablate", help="run an ablation grid")
    _add_config_flags(p)
    p.add_argument("--grid", default="losses", help="losses, centers, or a YAML/JSON list of overrides")
    p.add_argument("--out", type=Path, help="ablation CSV (default: <output_dir>/ablation.csv)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("convert-visa", help="rearrange a raw VisA tree into the MVTec layout")
    p.add_argument("src", type=Path)
    p.add_argument("dst", type=Path)
    p.add_argument("--split-csv", default="split_csv/1cls.csv")
    p.set_defaults(func=cmd_convert_visa)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except DivergenceError as exc:
        logger.error("%s", exc)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
