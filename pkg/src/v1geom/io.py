"""Plain-text exports: PGM (P2) images, CSV tables, JSON reports.

Everything written here is deterministic byte-for-byte for identical
inputs, so golden files can be diffed without binary tooling.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def write_pgm(path, array2d, lo=None, hi=None) -> None:
    """Write a 2D array as a plain (P2) PGM, affinely mapped to 0..255.

    lo/hi default to the array min/max; a constant array maps to mid-gray.
    """
    a = np.asarray(array2d, dtype=float)
    if a.ndim != 2:
        raise ValueError("PGM export needs a 2D array")
    lo = float(np.min(a)) if lo is None else float(lo)
    hi = float(np.max(a)) if hi is None else float(hi)
    if hi > lo:
        scaled = np.clip((a - lo) / (hi - lo), 0.0, 1.0)
    else:
        scaled = np.full_like(a, 0.5)
    pix = np.rint(scaled * 255).astype(int)
    lines = [f"P2", f"{a.shape[1]} {a.shape[0]}", "255"]
    for row in pix:
        lines.append(" ".join(str(int(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_csv(path, rows, header=None) -> None:
    """Write rows of numbers as CSV with repr-exact float formatting."""
    out = []
    if header:
        out.append(",".join(header))
    for row in rows:
        out.append(",".join(_fmt(x) for x in row))
    Path(path).write_text("\n".join(out) + "\n")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, int, float, str)) or obj is None:
        return obj
    return str(obj)
