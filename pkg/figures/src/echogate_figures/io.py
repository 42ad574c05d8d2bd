"""Readers for the simulator's delimited outputs.

Pure file consumers: every function takes paths, checks the documented
column sets, and returns plain arrays/dicts. Missing or misnamed columns
raise :class:`InputFormatError` with the offending file and column.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

TRACE_COLUMNS = ["t_s", "I", "Q"]
SCAN_COLUMNS = ["t_c_s", "echo_magnitude", "echo_magnitude_control_off"]


class InputFormatError(ValueError):
    """An input file does not match the documented format."""


def _read_csv(path, expected_columns):
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputFormatError(f"{path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputFormatError(f"{path}: empty file") from None
        missing = [c for c in expected_columns if c not in header]
        if missing:
            raise InputFormatError(
                f"{path}: missing column(s) {missing}; header is {header}"
            )
        idx = [header.index(c) for c in expected_columns]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[i]) for i in idx])
            except (ValueError, IndexError) as exc:
                raise InputFormatError(f"{path}:{lineno}: bad row {row!r}") from exc
    if not rows:
        raise InputFormatError(f"{path}: no data rows")
    data = np.asarray(rows)
    return {name: data[:, k] for k, name in enumerate(expected_columns)}


def read_trace(path) -> dict:
    """Echo trace: columns t_s, I, Q."""
    return _read_csv(path, TRACE_COLUMNS)


def read_demolition_scan(path) -> dict:
    """Demolition scan: columns t_c_s, echo_magnitude, echo_magnitude_control_off."""
    return _read_csv(path, SCAN_COLUMNS)


def read_summary(path) -> dict:
    path = Path(path)
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise InputFormatError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputFormatError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(data, dict) or "experiment" not in data:
        raise InputFormatError(f"{path}: not a run summary (no 'experiment' key)")
    return data
