"""Estimate reports (CSV/JSON), reference impedances and benchmark comparison."""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass

from .decomposer import LineCase
from .estimator import ImpedanceEstimate, Quality, benchmark_impedance
from .grid_model import GridTopology, Phase

ESTIMATE_FIELDS = ("line_id", "phase", "case", "quality", "z_ohm", "delta_rad",
                   "z_lower", "z_upper", "n_samples", "reason")
COMPARISON_FIELDS = ESTIMATE_FIELDS + ("z_bench", "delta_bench", "err_pct", "err_delta_deg")
SENSITIVITY_FIELDS = ("n_samples", "line_id", "phase", "err_pct", "err_delta_deg")


def _num(x) -> str:
    if x is None:
        return ""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def _parse_num(text):
    text = (text or "").strip()
    return None if text == "" else float(text)


def estimate_row(e: ImpedanceEstimate) -> dict:
    return {
        "line_id": e.line.line_id,
        "phase": e.phase.value,
        "case": str(e.case),
        "quality": e.quality.value,
        "z_ohm": e.z_mag,
        "delta_rad": e.delta,
        "z_lower": e.z_lower,
        "z_upper": e.z_upper,
        "n_samples": e.n_samples_used,
        "reason": e.reason,
    }


def _csv_cell(v):
    if isinstance(v, float) or v is None:
        return _num(v)
    return str(v)


def write_rows_csv(rows, fields, stream):
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_csv_cell(r.get(f)) for f in fields])


def write_estimates_csv(estimates, stream):
    write_rows_csv([estimate_row(e) for e in estimates], ESTIMATE_FIELDS, stream)


def _json_value(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def write_estimates_json(estimates, stream):
    rows = [{k: _json_value(v) for k, v in estimate_row(e).items()} for e in estimates]
    json.dump(rows, stream, indent=1)
    stream.write("\n")


def _row_to_estimate(r: dict, topology: GridTopology) -> ImpedanceEstimate:
    def num(key):
        v = r.get(key)
        if isinstance(v, str):
            return _parse_num(v)
        return None if v is None else float(v)

    return ImpedanceEstimate(
        line=topology.line(r["line_id"]),
        phase=Phase(r["phase"]),
        case=LineCase.parse(r["case"]),
        quality=Quality(r["quality"]),
        z_mag=num("z_ohm"),
        delta=num("delta_rad"),
        z_lower=num("z_lower"),
        z_upper=num("z_upper"),
        n_samples_used=int(r["n_samples"]),
        reason=r.get("reason") or "",
    )


def read_estimates_csv(stream, topology: GridTopology) -> list:
    return [_row_to_estimate(r, topology) for r in csv.DictReader(stream)]


def read_estimates_json(stream, topology: GridTopology) -> list:
    return [_row_to_estimate(r, topology) for r in json.load(stream)]


# -- reference impedances ----------------------------------------------------

def read_reference(stream) -> dict:
    """Load ``(line_id, Phase) -> (z_ohm, delta_rad)`` from a ground-truth or benchmark CSV.

    Ground truth has ``line_id,phase,z_ohm,delta_rad``; a data-sheet benchmark
    has ``line_id,r_ohm_per_km,l_h_per_km,length_km`` and applies to all phases.
    """
    reader = csv.DictReader(stream)
    fields = set(reader.fieldnames or [])
    out = {}
    if {"line_id", "phase", "z_ohm", "delta_rad"} <= fields:
        for r in reader:
            out[(r["line_id"], Phase(r["phase"].strip().upper()))] = (float(r["z_ohm"]), float(r["delta_rad"]))
    elif {"line_id", "r_ohm_per_km", "l_h_per_km", "length_km"} <= fields:
        for r in reader:
            zd = benchmark_impedance(float(r["r_ohm_per_km"]), float(r["l_h_per_km"]), float(r["length_km"]))
            for ph in Phase:
                out[(r["line_id"], ph)] = zd
    else:
        raise ValueError(f"unrecognised reference columns: {sorted(fields)}")
    return out


def load_reference(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        return read_reference(fh)


def percentage_error(z_est: float, z_ref: float) -> float:
    return 100.0 * abs(z_est - z_ref) / z_ref


def angle_error_deg(d_est: float, d_ref: float) -> float:
    return math.degrees(abs(d_est - d_ref))


def comparison_rows(estimates, reference: dict) -> list:
    rows = []
    for e in estimates:
        r = estimate_row(e)
        ref = reference.get((e.line.line_id, e.phase))
        r.update(z_bench=None, delta_bench=None, err_pct=None, err_delta_deg=None)
        if ref is not None:
            r["z_bench"], r["delta_bench"] = ref
            if e.determined and e.z_mag is not None:
                r["err_pct"] = percentage_error(e.z_mag, ref[0])
            if e.determined and e.delta is not None:
                r["err_delta_deg"] = angle_error_deg(e.delta, ref[1])
        rows.append(r)
    return rows


@dataclass
class ErrorSummary:
    n: int
    mean_pct: float | None
    median_pct: float | None
    max_pct: float | None
    mean_delta_deg: float | None
    max_delta_deg: float | None


def summarize(rows, cases=("Case1",)) -> ErrorSummary:
    """Error statistics over rows of the given cases (Case-1 by default)."""
    pct = [r["err_pct"] for r in rows if r["case"] in cases and r.get("err_pct") is not None]
    deg = [r["err_delta_deg"] for r in rows if r["case"] in cases and r.get("err_delta_deg") is not None]
    return ErrorSummary(
        n=len(pct),
        mean_pct=statistics.fmean(pct) if pct else None,
        median_pct=statistics.median(pct) if pct else None,
        max_pct=max(pct) if pct else None,
        mean_delta_deg=statistics.fmean(deg) if deg else None,
        max_delta_deg=max(deg) if deg else None,
    )
