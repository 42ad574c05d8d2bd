"""Command-line wrappers.

    echogate-plot-demolition  --scan scan.csv [--summary summary.json] --out base
    echogate-plot-conditional --off off.csv --on on.csv
                              [--summary summary.json] [--layout side_by_side]
                              --out base

Each writes base.png and base.svg. Exit 1 with a message on malformed input.
"""

from __future__ import annotations

import argparse
import sys

from .io import InputFormatError
from .render import FigureJob, plot_conditional_phase, plot_demolition


def main_demolition(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="echogate-plot-demolition",
        description="Plot echo magnitude vs control pulse duration.",
    )
    parser.add_argument("--scan", required=True, help="demolition_scan.csv")
    parser.add_argument("--summary", help="summary.json (optional annotations)")
    parser.add_argument("--out", required=True, help="output basename (writes .png and .svg)")
    args = parser.parse_args(argv)
    job = FigureJob(inputs={"scan": args.scan}, summary=args.summary, output=args.out)
    try:
        written = plot_demolition(job)
    except InputFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


def main_conditional(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="echogate-plot-conditional",
        description="Plot I/Q echo traces, control off vs on.",
    )
    parser.add_argument("--off", required=True, help="trace_control_off.csv")
    parser.add_argument("--on", required=True, help="trace_control_on.csv")
    parser.add_argument("--summary", help="summary.json (optional annotations)")
    parser.add_argument("--layout", choices=("side_by_side", "stacked"),
                        default="side_by_side")
    parser.add_argument("--out", required=True, help="output basename (writes .png and .svg)")
    args = parser.parse_args(argv)
    job = FigureJob(
        inputs={"off": args.off, "on": args.on},
        summary=args.summary,
        output=args.out,
        layout=args.layout,
    )
    try:
        written = plot_conditional_phase(job)
    except InputFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0
