"""Command line entry point.

Four subcommands share one shape: ``film-denoise <cmd> --config cfg.json
[--checkpoint path] [--out dir] [--seed n]``.  Config problems exit with
status 2 and list every offending field; runtime failures exit with 1.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError
from .data import DataError
from .harness import HarnessError, cmd_compare, cmd_denoise, cmd_sweep, cmd_train
from .model import CheckpointError
from .reports import ReportError
from .training import TrainingError


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="film-denoise",
        description="Noise-conditional denoiser: train, sweep, denoise, compare.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "train": "train a model (single or two-phase) from a JSON config",
        "sweep": "evaluate one checkpoint over a conditioning/noise grid",
        "denoise": "run one PNG through a checkpoint via the patch pipeline",
        "compare": "score several methods on identical corrupted inputs",
    }
    for name, help_text in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--checkpoint", action="append", default=[],
                       help="checkpoint path (repeatable for compare)")
        p.add_argument("--out", default=None, help="output directory (overrides config out_dir)")
        p.add_argument("--seed", type=int, default=None, help="run seed (overrides config seed)")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "train":
            if args.checkpoint:
                raise ConfigError(["train does not take --checkpoint"])
            artifacts = cmd_train(args.config, out_dir=args.out, seed=args.seed)
        elif args.command == "sweep":
            if len(args.checkpoint) != 1:
                raise ConfigError(["sweep needs exactly one --checkpoint"])
            artifacts = cmd_sweep(args.config, args.checkpoint[0],
                                  out_dir=args.out, seed=args.seed)
        elif args.command == "denoise":
            if len(args.checkpoint) != 1:
                raise ConfigError(["denoise needs exactly one --checkpoint"])
            artifacts = cmd_denoise(args.config, args.checkpoint[0],
                                    out_dir=args.out, seed=args.seed)
        else:
            artifacts = cmd_compare(args.config, args.checkpoint,
                                    out_dir=args.out, seed=args.seed)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, TrainingError, ReportError, HarnessError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for name in sorted(artifacts):
        print(f"{name}: {artifacts[name]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
