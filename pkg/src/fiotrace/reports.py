"""Serialization of reports: flat key = value text, and machine-readable CSV
(UTF-8, comma-separated, header row, complex values as paired Re/Im columns,
floats in shortest round-trip decimal)."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .tracemod import TraceReport

__all__ = [
    "fmt",
    "trace_report_text",
    "trace_report_rows",
    "TRACE_CSV_HEADER",
    "B0_CSV_HEADER",
    "ORACLE_CSV_HEADER",
    "write_csv",
    "csv_text",
]

TRACE_CSV_HEADER = ("name", "verdict", "margin", "witness")
B0_CSV_HEADER_BASE = ("re_b0", "im_b0", "det_center", "sgn_h", "fiber_diameter",
                      "prefactor_mode", "status")
ORACLE_CSV_HEADER = ("scenario", "quantity", "sweep", "oracle_re", "oracle_im",
                     "predicted_re", "predicted_im", "ratio", "error_estimate",
                     "verdict")


def B0_CSV_HEADER(w_dim: int):
    return tuple(f"w{i}" for i in range(1, w_dim + 1)) + B0_CSV_HEADER_BASE


def fmt(x) -> str:
    """Shortest round-trip decimal for floats; plain str otherwise."""
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        return repr(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    return str(x)


def _verdict(b) -> str:
    return "pass" if b else "fail"


def trace_report_text(r: TraceReport) -> str:
    lines = [
        f"scenario = {r.scenario}",
        f"seed = {r.seed}",
        f"forced = {r.forced}",
        f"smoothing = {r.smoothing}",
        f"condition1.clean = {_verdict(r.condition1.clean)}",
        f"condition1.is_manifold = {r.condition1.is_manifold}",
        f"condition1.tangent_equality = {r.condition1.tangent_equality}",
        f"condition1.worst_gap = {fmt(r.condition1.worst_gap)}",
        f"condition1.samples_used = {r.condition1.samples_used}",
        f"condition1.excess_over_transversal = {r.condition1.excess_over_transversal}",
        f"condition2.passed = {_verdict(r.condition2.passed)}",
        f"condition2.gap = {fmt(r.condition2.gap)}",
        f"dim_lambda_xx = {r.dim_lambda_xx}",
        f"excess_e = {fmt(r.excess_e)}",
        f"excess_consistent = {r.excess_consistent()}",
        f"order_phi = {fmt(r.order_phi)}",
        f"traced_order = {fmt(r.traced_order)}",
        f"sobolev_window = {fmt(r.sobolev_window[0]) + ' .. ' + fmt(r.sobolev_window[1]) if r.sobolev_window else 'empty'}",
        f"parameter_space_cleanness = {_verdict(r.parameter_space_cleanness.passed) if r.parameter_space_cleanness else ''}",
        f"overall = {'pass' if r.passed else ('inconclusive' if r.inconclusive else 'fail')}",
    ]
    if r.condition2.witness is not None and not r.condition2.passed:
        lines.append("condition2.witness = " + " ".join(fmt(v) for v in r.condition2.witness))
    for n in r.notes:
        lines.append(f"note = {n}")
    return "\n".join(lines) + "\n"


def trace_report_rows(r: TraceReport) -> list:
    """One row per check: (name, verdict, margin, witness coordinates)."""
    def witness_str(w):
        return "" if w is None else ";".join(fmt(v) for v in w)

    rows = [
        ("condition1_clean", _verdict(r.condition1.clean),
         fmt(r.condition1.worst_gap), ""),
        ("condition1_dim_lambda_xx", _verdict(r.dim_lambda_xx >= 0 or r.smoothing),
         fmt(r.dim_lambda_xx), ""),
        ("condition2_conormal", _verdict(r.condition2.passed),
         fmt(r.condition2.gap),
         witness_str(r.condition2.witness if not r.condition2.passed else None)),
        ("excess", _verdict(r.excess_consistent()), fmt(r.excess_e), ""),
        ("parameter_space_cleanness",
         _verdict(r.parameter_space_cleanness.passed) if r.parameter_space_cleanness else "",
         fmt(r.parameter_space_cleanness.worst_gap) if r.parameter_space_cleanness else "",
         ""),
        ("traced_order", "info", fmt(r.traced_order), ""),
        ("sobolev_window", "info",
         (fmt(r.sobolev_window[0]) + ";" + fmt(r.sobolev_window[1])) if r.sobolev_window else "empty",
         ""),
        ("overall",
         "pass" if r.passed else ("inconclusive" if r.inconclusive else "fail"),
         "", ""),
    ]
    return rows


def csv_text(header: Iterable[str], rows: Iterable[Iterable]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header))
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    Path(path).write_text(csv_text(header, rows), encoding="utf-8")
