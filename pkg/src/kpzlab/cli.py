"""Command line entry point: ``lab <experiment> --config FILE ...``.

Exit status is 0 when every verdict passes, 2 when any verdict fails and 1 on
errors (bad usage, bad config, numerical failure).
"""
from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, NumericalError, UsageError
from .harness import EXPERIMENTS, THREADS_ENV, ExperimentConfig, run


def _int_list(text: str) -> list:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lab", description="Run one experiment of the lattice/Burgers laboratory.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", required=True, help="INI file with [experiment] and [options] sections")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--replicas", type=int, help="replica count (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--n", type=_int_list, help="comma-separated scaling parameters, e.g. 16,32,64")
    p.add_argument("--threads", type=int, help=f"worker threads (env {THREADS_ENV} takes precedence)")
    return p




def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        cfg = ExperimentConfig.load(args.config)
        if cfg.experiment != args.experiment:
            raise ConfigError(f"config is for {cfg.experiment!r}, not {args.experiment!r}")
        cfg = cfg.with_overrides(seed=args.seed, replicas=args.replicas, out=args.out, n=args.n)
        art = run(cfg, threads=args.threads)
    except (UsageError, ConfigError, NumericalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for v in art.verdicts:
        print(v.line())
    if art.error:
        print(f"error: {art.error}", file=sys.stderr)
        return 1
    print(f"artifacts written to {cfg.out}")
    return 0 if art.passed else 2


if __name__ == "__main__":
    sys.exit(main())
