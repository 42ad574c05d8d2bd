"""Command-line entry point.

    echogate --config experiment.json [--out DIR] [--seed N] [--threads N]
             [--quiet]

The config's ``experiment`` field picks the run; data files land in the
output directory and progress goes to standard error.  Exit codes: 0 on
success, 2 on configuration errors, 3 on validation failure.
"""

from __future__ import annotations

import argparse
import sys
import time

from .harness import ConfigError, ExperimentConfig, run_experiment
from .quantum_core import InvalidParameterError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="echogate",
        description=(
            "Simulate optical-echo experiments on ensembles of dipole-coupled "
            "ion pairs: demolition scans, interaction-selective preparation, "
            "and conditional phase readout."
        ),
    )
    parser.add_argument("--config", required=True, help="experiment JSON file")
    parser.add_argument("--out", help="output directory (overrides config output_dir)")
    parser.add_argument("--seed", type=int, help="RNG seed override (unsigned 64-bit)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    def log(msg: str) -> None:
        if not args.quiet:
            print(msg, file=sys.stderr)

    try:
        cfg = ExperimentConfig.from_file(args.config)
        cfg = cfg.with_overrides(seed=args.seed, output_dir=args.out)
        if args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
    except (ConfigError, InvalidParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    log(f"experiment: {cfg.experiment} -> {cfg.output_dir} (threads {args.threads})")
    t0 = time.perf_counter()
    try:
        _, code = run_experiment(cfg, threads=args.threads, log=log)
    except (ConfigError, InvalidParameterError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    log(f"done in {time.perf_counter() - t0:.1f} s (exit {code})")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
