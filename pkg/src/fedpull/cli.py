"""Command-line entry point: `fedpull run <config.json> [--validate] [--seed-parallel N] [--out DIR]`."""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .config import ConfigError, load_config
from .experiments import run_experiment

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedpull", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiment described by a JSON config")
    run.add_argument("config", help="path to the experiment config (JSON)")
    run.add_argument("--validate", action="store_true", help="parse and validate only, never train")
    run.add_argument("--seed-parallel", type=int, default=1, metavar="N",
                     help="run up to N seeds concurrently")
    run.add_argument("--out", default=None, metavar="DIR", help="override output_dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.out:
            config = dataclasses.replace(config, output_dir=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.validate:
        print(f"config ok: experiment={config.experiment} seeds={list(config.seeds)}")
        return EXIT_OK
    try:
        paths = run_experiment(config, seed_parallel=max(1, args.seed_parallel))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # surfaced with a stable exit code for harness use
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for path in paths:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
