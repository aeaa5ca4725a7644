"""Command-line entry point.

Subcommands mirror the workflow stages; all take --config and optional
--seed/--out overrides.  Errors exit nonzero with a single machine-parsable
line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment
from .config import ConfigError, load_config


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="path to the JSON config file")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="override config output_dir")
    p.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentmp")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-demos", "imitate", "improve", "eval", "full-run"):
        _add_common(sub.add_parser(name))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output_dir = args.out
        out_dir = Path(cfg.output_dir)

        if args.command == "gen-demos":
            experiment.cmd_gen_demos(cfg, out_dir)
        elif args.command == "imitate":
            experiment.cmd_imitate(cfg, out_dir / "demos.jsonl", out_dir)
        elif args.command == "improve":
            experiment.cmd_improve(cfg, out_dir / "model.json", out_dir)
        elif args.command == "eval":
            experiment.cmd_eval(cfg, out_dir / "model_final.json", out_dir)
        elif args.command == "full-run":
            experiment.cmd_full_run(cfg, out_dir)
    except (ConfigError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
