"""Command-line entry point.

    flowdistill <experiment> --config <path> [--seed N --out DIR --verbose]

Exit codes: 0 success, 1 verification failure, 2 configuration error.
"""

import argparse
import json
import logging
import os
import sys

from .errors import ConfigurationError, FlowDistillError
from .harness import EXPERIMENTS, RunConfig, run_experiment


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="flowdistill",
        description="Run a distillation/sampling experiment from a JSON config.",
    )
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", required=True, help="path to the JSON config")
    p.add_argument("--seed", type=int, default=None,
                   help="run a single seed instead of the config's list")
    p.add_argument("--out", default=None, help="output directory override")
    p.add_argument("--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    raw["experiment"] = args.experiment
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    if args.out is not None:
        raw["out_dir"] = args.out
    try:
        cfg = RunConfig.from_dict(raw, base_dir=os.path.dirname(
            os.path.abspath(args.config)))
        return run_experiment(cfg)
    except (ConfigurationError, FlowDistillError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
