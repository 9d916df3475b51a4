"""Command-line entry point.

Exit codes: 0 success, 1 unexpected failure, 2 configuration/validation
error, 3 missing or unreadable data, 4 training failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

import torch

from .errors import AlignmentError, ConfigurationError, DataError, TrainingError, ValidationError
from .harness import (
    cmd_ablation,
    cmd_distill_student,
    cmd_evaluate,
    cmd_prepare_data,
    cmd_train_teacher,
    format_ablation_table,
    load_config,
)
from .synthetic import make_toy_dataset

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4

log = logging.getLogger("gmenet")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry (repeatable), e.g. --set schedule.epochs=5")
    p.add_argument("--out", help="output directory")
    p.add_argument("--precision", type=int, choices=(32, 64), help="floating point width")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmenet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="index a source dataset and generate its LR copy")
    _common(p)
    p = sub.add_parser("train-teacher", help="train the HR teacher network")
    _common(p)
    p = sub.add_parser("distill", help="distil the frozen teacher into the LR student")
    _common(p)
    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--input", choices=("lr", "hr"), default="lr")
    p.add_argument("--report", help="where to write the report (default <out>/eval_report.json)")
    p = sub.add_parser("ablation", help="run the six-row ablation matrix")
    _common(p)

    p = sub.add_parser("make-toy", help="write the synthetic seven-class face dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _resolve(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output_dir={args.out}")
    if args.precision is not None:
        overrides.append(f"precision={args.precision}")
    config = load_config(args.config, overrides)
    torch.set_default_dtype(torch.float64 if config.precision == 64 else torch.float32)
    torch.manual_seed(config.seed)
    return config


def run(args) -> int:
    if args.command == "make-toy":
        root = make_toy_dataset(args.out, args.per_class, args.size, args.seed)
        print(f"wrote synthetic dataset to {root}")
        return EXIT_OK
    config = _resolve(args)
    if args.command == "prepare-data":
        m = cmd_prepare_data(config)
        print(f"{len(m.records)} LR records -> {config.manifest_path}")
        if m.errors:
            print(f"{len(m.errors)} unreadable source file(s) skipped", file=sys.stderr)
    elif args.command == "train-teacher":
        s = cmd_train_teacher(config)
        print(json.dumps({k: s[k] for k in ("best_accuracy", "best_checkpoint", "last_checkpoint")}))
    elif args.command == "distill":
        s = cmd_distill_student(config)
        print(json.dumps({k: s[k] for k in ("best_accuracy", "best_checkpoint", "last_checkpoint")}))
    elif args.command == "evaluate":
        report = cmd_evaluate(config, args.checkpoint, args.manifest, use=args.input)
        path = report.save(args.report or config.out / "eval_report.json")
        print(f"top-1 accuracy {report.overall_accuracy:.4f}% on {report.sample_count} images -> {path}")
    elif args.command == "ablation":
        table = cmd_ablation(config)
        print(format_ablation_table(table), end="")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except (ConfigurationError, ValidationError, AlignmentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except Exception:
        log.exception("unexpected failure")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
