"""Trace CSV and report JSON writers with 17 significant digits."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .dynamics import SimulationTrace


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def trace_columns(trace: SimulationTrace) -> list:
    n = trace.x.shape[1]
    cols = ["t"] + [f"x{i}" for i in range(n)]
    if trace.y is not None:
        cols += [f"y{i}" for i in range(trace.y.shape[1])]
    if trace.a is not None:
        cols += [f"a{i}" for i in range(trace.a.shape[1])]
    cols.append("mode")
    for name, arr in (("Yhat", trace.Yhat), ("xhat", trace.xhat), ("xhat_held", trace.xhat_held)):
        if arr is not None:
            cols += [f"{name}{i}" for i in range(arr.shape[1])]
    return cols


def write_trace_csv(trace: SimulationTrace, path) -> None:
    trace.check()
    blocks = [trace.x] + [b for b in (trace.y, trace.a) if b is not None]
    tail = [b for b in (trace.Yhat, trace.xhat, trace.xhat_held) if b is not None]
    mode = trace.mode or [""] * len(trace.t)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_columns(trace))
        for i, t in enumerate(trace.t):
            row = [fmt(t)]
            for b in blocks:
                row += [fmt(v) for v in b[i]]
            row.append(mode[i])
            for b in tail:
                row += [fmt(v) for v in b[i]]
            w.writerow(row)


def read_trace_csv(path) -> dict:
    """Column name -> list of values (floats, except ``mode``)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for key in rows[0] if rows else []:
        vals = [r[key] for r in rows]
        out[key] = vals if key == "mode" else np.array([float(v) for v in vals])
    return out


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def _encode(o, level, indent):
    pad = " " * (indent * (level + 1)) if indent else ""
    end = " " * (indent * level) if indent else ""
    nl = "\n" if indent else ""
    if isinstance(o, dict):
        if not o:
            yield "{}"
            return
        yield "{" + nl
        for i, (k, v) in enumerate(o.items()):
            yield pad + json.dumps(k) + ": "
            yield from _encode(v, level + 1, indent)
            yield ("," if i < len(o) - 1 else "") + nl
        yield end + "}"
    elif isinstance(o, list):
        if not o:
            yield "[]"
            return
        yield "[" + nl
        for i, v in enumerate(o):
            yield pad
            yield from _encode(v, level + 1, indent)
            yield ("," if i < len(o) - 1 else "") + nl
        yield end + "]"
    elif isinstance(o, bool) or o is None or isinstance(o, (int, str)):
        yield json.dumps(o)
    elif isinstance(o, float):
        if math.isnan(o):
            yield '"nan"'
        elif math.isinf(o):
            yield '"inf"' if o > 0 else '"-inf"'
        else:
            yield fmt(o)
    else:
        yield json.dumps(str(o))


def dumps_report(report: dict) -> str:
    """Deterministic JSON: insertion key order, floats at 17 significant digits.

    Non-finite floats become the strings ``"inf"``, ``"-inf"`` and ``"nan"``.
    """
    return "".join(_encode(_plain(report), 0, 2)) + "\n"


def write_report_json(report: dict, path) -> None:
    Path(path).write_text(dumps_report(report))
