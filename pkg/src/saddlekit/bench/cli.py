"""Command-line entry point: ``saddlekit <experiment> --config FILE [options]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Optional, Sequence

from ..errors import ConfigError, ContractError, ConvergenceError, NumericalError, ParseError
from .config import EXPERIMENTS, load_config
from .experiments import run_experiment
from .report import ReportIOError, emit_report

__all__ = ["main", "build_parser", "resolve_threads", "EXIT_OK", "EXIT_CONFIG", "EXIT_NUMERICAL"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
THREADS_ENV = "SADDLEKIT_THREADS"

log = logging.getLogger("saddlekit")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="saddlekit", description="Run a saddle-search benchmark and write CSV/JSON reports.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", metavar="FILE", help="key = value file with [run], [neb], [dimer], [field] sections")
    p.add_argument("--out", metavar="DIR", help="output directory (default: current directory)")
    p.add_argument("--seeds", type=int, metavar="N", help="number of paired seeds")
    p.add_argument("--seed-offset", type=int, metavar="N", help="first seed (for sharded runs)")
    p.add_argument("--iterations", type=int, metavar="N", help="optimizer iterations per run")
    p.add_argument("--threads", type=int, metavar="N", help=f"thread budget (fallback: ${THREADS_ENV}, then 1)")
    p.add_argument("--setfl", metavar="PATH", help="tabulated EAM potential for wvac")
    p.add_argument("--variant", metavar="LIST", help="comma-separated variants")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def resolve_threads(flag: Optional[int], configured: Optional[int]) -> int:
    """CLI flag, then config value, then the environment variable, then 1."""
    if flag is not None:
        return flag
    if configured is not None:
        return configured
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer") from None
        if value < 1:
            raise ConfigError(f"{THREADS_ENV} must be at least 1")
        return value
    return 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        overrides = {
            "experiment": args.experiment,
            "seeds": args.seeds,
            "seed_offset": args.seed_offset,
            "iterations": args.iterations,
            "setfl": args.setfl,
            "out": args.out,
            "threads": args.threads,
            "variants": tuple(v.strip() for v in args.variant.split(",") if v.strip()) if args.variant else None,
        }
        cfg = load_config(args.config, overrides)
        cfg.threads = resolve_threads(args.threads, cfg.threads)
        cfg.validate()
        log.info("running %s: %d seeds, %d iterations, %d threads", cfg.experiment, cfg.seeds, cfg.iterations, cfg.threads)
        report = run_experiment(cfg)
        paths = emit_report(report, cfg.out)
    except (ConfigError, ParseError, ContractError, ReportIOError) as exc:
        print(f"saddlekit: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ConvergenceError, FloatingPointError) as exc:
        print(f"saddlekit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for kind in sorted(paths):
        print(paths[kind])
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
