"""Command-line interface: gen-data, train, eval, ablate, routing, params."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import fields

from .checkpoint import CheckpointError
from .config import (ConfigError, RunConfig, VARIANT_PRESETS, build_run_config,
                     read_config_file)
from .taskgen import GeneratorError
from .data import TruncationError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default="", help="key = value config file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            parser.add_argument(flag, dest=f.name, default=None,
                                action=argparse.BooleanOptionalAction)
        else:
            parser.add_argument(flag, dest=f.name, default=None,
                                type=type(f.default))


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)
                 if getattr(args, f.name, None) is not None}
    return build_run_config(file_values, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clorae",
        description="Collaborative multi-LoRA experts on synthetic "
                    "multimodal extraction tasks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="train a model and write metrics/checkpoints")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--data-dir", default="")
    p.add_argument("--json", action="store_true", help="print raw JSON only")

    p = sub.add_parser("ablate", help="run ablation variants over shared seeds")
    _add_config_flags(p)
    p.add_argument("--variants", default=",".join(VARIANT_PRESETS[:-1]),
                   help="comma-separated variant names")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")

    p = sub.add_parser("routing", help="router-mass report for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--data-dir", default="")

    p = sub.add_parser("params", help="trainable-parameter accounting")
    _add_config_flags(p)
    return parser


def format_table(headers: list[str], rows: list[list]) -> str:
    cells = [headers] + [[_fmt_cell(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt_cell(c) -> str:
    if isinstance(c, float):
        return f"{c:.4f}"
    return str(c)


def _print_eval_report(report: dict) -> None:
    rows = [[d, v["precision"], v["recall"], v["f1"]]
            for d, v in report["datasets"].items()]
    print(format_table(["dataset", "precision", "recall", "f1"], rows))
    print(f"macro F1: {report['macro_f1']:.4f}")
    print(f"All (sum of F1): {report['all_f1']:.4f}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (GeneratorError, TruncationError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except RuntimeError as e:
        category = EXIT_NUMERIC if "non-finite" in str(e) else EXIT_ERROR
        print(f"error: {e}", file=sys.stderr)
        return category


def _dispatch(args: argparse.Namespace) -> int:
    from . import train as trainer  # deferred: numpy-heavy import tree
    from .adapter import count_trainable
    from .taskgen import write_datasets

    if args.command == "gen-data":
        cfg = _config_from_args(args)
        out = write_datasets(cfg.generator_spec(), args.out)
        print(f"wrote datasets to {out}")
        return EXIT_OK

    if args.command == "train":
        cfg = _config_from_args(args)
        result = trainer.run_training(cfg)
        print(f"finished {cfg.epochs} epochs; outputs in {cfg.resolved_out_dir()}")
        _print_eval_report(result.test_report)
        return EXIT_OK

    if args.command == "eval":
        report = trainer.run_evaluation(args.checkpoint, split=args.split,
                                        data_dir=args.data_dir)
        if args.json:
            print(json.dumps(report, indent=2, sort_keys=True))
        else:
            _print_eval_report(report)
        return EXIT_OK

    if args.command == "ablate":
        cfg = _config_from_args(args)
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        report = trainer.run_ablation(cfg, variants, seeds)
        rows = []
        for variant, entry in report["variants"].items():
            med = entry["median"]
            rows.append([variant, med["macro_f1"], med["all_f1"],
                         entry["trainable_parameters"]["total"]])
        print(format_table(["variant", "macro F1 (median)", "All (median)",
                            "trainable params"], rows))
        return EXIT_OK

    if args.command == "routing":
        report = trainer.run_routing(args.checkpoint, split=args.split,
                                     data_dir=args.data_dir)
        rows = []
        for group, per_task in report.items():
            for task, vals in sorted(per_task.items()):
                rows.append([group, task, vals["task_expert"],
                             vals["universal"], vals["tokens"]])
        print(format_table(["layers", "task", "task-expert share",
                            "universal share", "tokens"], rows))
        return EXIT_OK

    if args.command == "params":
        cfg = _config_from_args(args)
        counts = count_trainable(trainer.state_for_counting(cfg))
        rows = [[k, v] for k, v in counts.items() if k != "total"]
        rows.append(["total", counts["total"]])
        print(format_table(["category", "parameters"], rows))
        return EXIT_OK

    return EXIT_ERROR
