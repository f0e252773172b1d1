"""CSV export of attention traces.

One row per attention weight: ``stage,t,branch,index,weight,ratio`` where
``stage`` counts from 1, ``branch`` is ``v`` (regions) or ``s`` (attributes)
and ``ratio`` is the visual share of the language-LSTM input at that
(stage, t). The ratio is defined by this package, not a standard quantity.
"""

from __future__ import annotations

import csv
from pathlib import Path

from .decoder import AttentionTrace

COLUMNS = ("stage", "t", "branch", "index", "weight", "ratio")


def trace_rows(trace: AttentionTrace):
    for stage, t, alpha_v, alpha_s, ratio in trace.rows():
        for branch, weights in (("v", alpha_v), ("s", alpha_s)):
            for k, w in enumerate(weights):
                yield stage + 1, t, branch, k, repr(float(w)), repr(ratio)


def export_trace(trace: AttentionTrace, path: Path) -> int:
    """Write the trace; returns the number of data rows."""
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in trace_rows(trace):
            writer.writerow(row)
            n += 1
    return n


def read_trace(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {"stage": int(r["stage"]), "t": int(r["t"]), "branch": r["branch"],
             "index": int(r["index"]), "weight": float(r["weight"]), "ratio": float(r["ratio"])}
            for r in csv.DictReader(fh)
        ]
