"""Report files: per-seed CSV, trajectory CSV and a JSON summary.

Numbers are written with 12 significant digits and keys are sorted, so the
same report always serializes to the same bytes.
"""

from __future__ import annotations

import csv
import json
import math
import os
from typing import Dict, Iterable, List, Sequence

import numpy as np

from ..errors import SaddlekitError

__all__ = ["PER_SEED_HEADER", "TRAJECTORY_HEADER", "emit_report", "read_per_seed", "read_trajectory", "fmt", "ReportIOError"]

PER_SEED_HEADER = ("experiment", "variant", "seed", "final_barrier_error", "final_residual", "success")
TRAJECTORY_HEADER = ("variant", "iter", "mean_value", "sem")
FORMATS = ("per_seed", "trajectory", "summary")


class ReportIOError(SaddlekitError, OSError):
    """A report file could not be written."""


def fmt(x) -> str:
    """Twelve significant digits; ``nan``/``inf`` spelled as Python does."""
    x = float(x)
    if not math.isfinite(x):
        return repr(x)
    return format(x, ".12g")


def _round(obj):
    if isinstance(obj, dict):
        return {str(k): _round(obj[k]) for k in sorted(obj, key=str)}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _round(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return repr(x)
        return float(fmt(x))
    return obj


def _open(path):
    try:
        return open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise ReportIOError(f"cannot write {path}: {exc.strerror}") from None


def emit_report(report, out_dir: str, formats: Sequence[str] = FORMATS, prefix: str = None) -> Dict[str, str]:
    """Write the requested files into ``out_dir``; returns ``{format: path}``."""
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise ValueError(f"unknown report formats {sorted(unknown)}")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise ReportIOError(f"cannot create {out_dir}: {exc.strerror}") from None
    stem = prefix or report.experiment
    paths = {}
    if "per_seed" in formats:
        path = os.path.join(out_dir, f"{stem}_per_seed.csv")
        with _open(path) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PER_SEED_HEADER)
            for variant, seed, err, res, ok in report.rows:
                w.writerow((report.experiment, variant, int(seed), fmt(err), fmt(res), "true" if ok else "false"))
        paths["per_seed"] = path
    if "trajectory" in formats:
        path = os.path.join(out_dir, f"{stem}_trajectory.csv")
        with _open(path) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAJECTORY_HEADER)
            for variant, (mean, sem) in report.trajectories.items():
                for k, (m, s) in enumerate(zip(np.asarray(mean).ravel(), np.asarray(sem).ravel())):
                    w.writerow((variant, k, fmt(m), fmt(s)))
        paths["trajectory"] = path
    if "summary" in formats:
        path = os.path.join(out_dir, f"{stem}_summary.json")
        with _open(path) as fh:
            json.dump(_round(report.summary), fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
        paths["summary"] = path
    return paths


def read_per_seed(path: str) -> List[tuple]:
    """Parse a per-seed CSV back into ``(experiment, variant, seed, err, residual, success)`` tuples."""
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != PER_SEED_HEADER:
            raise ValueError(f"unexpected header {header}")
        return [(e, v, int(s), float(b), float(res), ok == "true") for e, v, s, b, res, ok in r]


def read_trajectory(path: str) -> List[tuple]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != TRAJECTORY_HEADER:
            raise ValueError(f"unexpected header {header}")
        return [(v, int(k), float(m), float(s)) for v, k, m, s in r]
