"""GMD measurement series: CSV ingest, per-sample derived quantities, moments.

Sign convention: ``p`` and ``q`` are the powers seen at the metered node on
its parent line, flowing *out of* the node into the line.  A consuming node
therefore reports negative ``p``; ``sign(-p)`` makes its current positive.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .grid_model import Phase

CSV_COLUMNS = ("timestamp", "node", "phase", "p_w", "q_var", "v_v")


class MeasurementError(ValueError):
    pass


class UnreadableStream(MeasurementError):
    pass


class EmptyInput(MeasurementError):
    pass


class InsufficientData(MeasurementError):
    pass


class ZeroApparentPower(MeasurementError):
    pass


class NonPositiveVoltage(MeasurementError):
    pass


@dataclass
class MeasurementSeries:
    """Time-ordered samples of one (node, phase); NaN marks a missing field."""

    node: str
    phase: Phase
    timestamp: np.ndarray
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.phase = Phase(self.phase)
        self.timestamp = np.asarray(self.timestamp, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        n = len(self.timestamp)
        if not (len(self.p) == len(self.q) == len(self.v) == n):
            raise ValueError("series channels differ in length")
        if n > 1 and np.any(np.diff(self.timestamp) <= 0):
            raise ValueError(f"timestamps of {self.node}/{self.phase.value} are not strictly increasing")

    def __len__(self):
        return len(self.timestamp)

    def head(self, n: int) -> "MeasurementSeries":
        return MeasurementSeries(self.node, self.phase, self.timestamp[:n], self.p[:n], self.q[:n], self.v[:n])

    def take(self, idx) -> "MeasurementSeries":
        idx = np.sort(np.asarray(idx))
        return MeasurementSeries(self.node, self.phase, self.timestamp[idx], self.p[idx], self.q[idx], self.v[idx])

    def complete_mask(self) -> np.ndarray:
        return np.isfinite(self.p) & np.isfinite(self.q) & np.isfinite(self.v)


@dataclass
class IngestReport:
    rows_read: int = 0
    rows_skipped: int = 0
    duplicates: int = 0
    malformed: int = 0
    missing_p: int = 0
    missing_q: int = 0
    missing_v: int = 0

    @property
    def skipped(self):
        return self.rows_skipped


@dataclass
class MeasurementSet:
    series: dict = field(default_factory=dict)
    report: IngestReport = field(default_factory=IngestReport)

    def get(self, node, phase) -> MeasurementSeries | None:
        return self.series.get((node, Phase(phase)))

    def add(self, s: MeasurementSeries):
        self.series[(s.node, s.phase)] = s

    def nodes(self) -> set:
        return {node for node, _ in self.series}

    def __len__(self):
        return len(self.series)

    def __iter__(self):
        return iter(self.series.values())

    def map(self, fn) -> "MeasurementSet":
        out = MeasurementSet(report=self.report)
        for s in self:
            out.add(fn(s))
        return out


# -- per-sample quantities ---------------------------------------------------

def compute_phi(p: float, q: float) -> float:
    """Power-factor angle ``acos(|p|/|s|)``, signed positive for inductive flow.

    The sign is that of ``p*q`` (P and Q flowing the same way means an
    inductive load), which keeps the angle independent of the metering
    direction. For ``p == 0`` the sign follows ``-q``.
    """
    s = math.hypot(p, q)
    if s == 0.0:
        raise ZeroApparentPower("power factor undefined for p = q = 0")
    # same as acos(|p|/s) but well conditioned near unity power factor
    mag = math.atan2(abs(q), abs(p))
    if p != 0.0:
        sign = 1.0 if p * q >= 0 else -1.0
    else:
        sign = 1.0 if q <= 0 else -1.0
    return sign * mag


def compute_current(p: float, q: float, v: float) -> float:
    if not v > 0:
        raise NonPositiveVoltage(f"voltage must be positive, got {v}")
    mag = math.hypot(p, q) / v
    if p == 0.0:
        return mag
    return math.copysign(mag, -p)


def phi_array(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Vectorised :func:`compute_phi`; NaN where ``p = q = 0``."""
    s = np.hypot(p, q)
    mag = np.arctan2(np.abs(q), np.abs(p))
    sign = np.where(p != 0, np.where(p * q >= 0, 1.0, -1.0), np.where(q <= 0, 1.0, -1.0))
    out = sign * mag
    out[s == 0] = np.nan
    return out


def current_array(p: np.ndarray, q: np.ndarray, v: np.ndarray) -> np.ndarray:
    mag = np.hypot(p, q) / v
    return np.where(p > 0, -mag, mag)


# -- moments -----------------------------------------------------------------

@dataclass(frozen=True)
class PhaseMoments:
    mean_v: float
    mean_i: float
    mean_phi: float
    mean_i_sq: float
    n_samples: int
    mean_p: float = 0.0
    mean_q: float = 0.0
    t_start: float = 0.0
    t_end: float = 0.0


def moments(series: MeasurementSeries) -> PhaseMoments:
    """Sample means over rows where p, q and v are all present.

    Missing values are dropped, never interpolated. Each node's moments use
    only its own clock; nothing is aligned across nodes.
    """
    mask = series.complete_mask() & (series.v > 0)
    n = int(mask.sum())
    if n == 0:
        raise InsufficientData(f"no usable samples for {series.node}/{series.phase.value}")
    p, q, v = series.p[mask], series.q[mask], series.v[mask]
    i = current_array(p, q, v)
    phi = phi_array(p, q)
    phi_ok = np.isfinite(phi)
    ts = series.timestamp[mask]
    return PhaseMoments(
        mean_v=float(v.mean()),
        mean_i=float(i.mean()),
        mean_phi=float(phi[phi_ok].mean()) if phi_ok.any() else 0.0,
        mean_i_sq=float((i * i).mean()),
        n_samples=n,
        mean_p=float(p.mean()),
        mean_q=float(q.mean()),
        t_start=float(ts[0]),
        t_end=float(ts[-1]),
    )


# -- CSV ---------------------------------------------------------------------

def _parse_float(col: pd.Series):
    """Return (values, missing, bad) for a raw string column."""
    s = col.fillna("").str.strip()
    missing = (s == "") | (s.str.lower() == "nan")
    # decimal point only; anything else (thousands separators, units) is bad
    ok = s.str.fullmatch(r"[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?")
    # Python's float() rounds correctly; pd.to_numeric can be off by an ulp
    vals = np.full(len(s), np.nan)
    good = (ok & ~missing).to_numpy()
    vals[good] = [float(x) for x in s[good]]
    bad = ~(ok | missing)
    return vals, missing.to_numpy(), bad.to_numpy()


def _parse_timestamps(col: pd.Series) -> np.ndarray:
    s = col.fillna("").str.strip()
    out = np.full(len(s), np.nan)
    numeric = s.str.fullmatch(r"[+-]?\d+(\.\d+)?")
    out[numeric.to_numpy()] = [float(x) for x in s[numeric]]
    rest = (~numeric) & (s != "")
    if rest.any():
        parsed = pd.to_datetime(s[rest], utc=True, errors="coerce", format="ISO8601")
        secs = (parsed - pd.Timestamp("1970-01-01", tz="UTC")).dt.total_seconds()
        out[rest.to_numpy()] = secs.to_numpy(dtype=float)
    return out


def ingest_csv(stream) -> MeasurementSet:
    """Parse the measurement CSV into per-(node, phase) series.

    ``stream`` may be a binary or text file object, or a path. Malformed rows
    are skipped and counted; later duplicates of a (node, phase, timestamp)
    are dropped.
    """
    try:
        if isinstance(stream, (str, bytes)) or hasattr(stream, "__fspath__"):
            with open(stream, "rb") as fh:
                raw = fh.read()
        else:
            raw = stream.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        frame = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False, skipinitialspace=True)
    except (OSError, UnicodeDecodeError, pd.errors.ParserError) as exc:
        raise UnreadableStream(str(exc)) from exc
    except pd.errors.EmptyDataError as exc:
        raise EmptyInput("measurement stream is empty") from exc
    frame.columns = [c.strip() for c in frame.columns]
    lacking = set(CSV_COLUMNS) - set(frame.columns)
    if lacking:
        raise UnreadableStream(f"measurement CSV lacks columns {sorted(lacking)}")

    report = IngestReport(rows_read=len(frame))
    ts = _parse_timestamps(frame["timestamp"])
    node = frame["node"].str.strip()
    phase = frame["phase"].str.strip().str.upper()
    p, miss_p, bad_p = _parse_float(frame["p_w"])
    q, miss_q, bad_q = _parse_float(frame["q_var"])
    v, miss_v, bad_v = _parse_float(frame["v_v"])
    with np.errstate(invalid="ignore"):
        bad_v |= ~miss_v & ~(v > 0)
    bad = (
        ~np.isfinite(ts)
        | (node == "").to_numpy()
        | ~phase.isin([ph.value for ph in Phase]).to_numpy()
        | bad_p | bad_q | bad_v
        | (~miss_p & ~np.isfinite(p)) | (~miss_q & ~np.isfinite(q))
    )
    report.malformed = int(bad.sum())

    good = pd.DataFrame({"ts": ts, "node": node, "phase": phase, "p": p, "q": q, "v": v,
                         "mp": miss_p, "mq": miss_q, "mv": miss_v, "row": np.arange(len(frame))})[~bad]
    good = good.sort_values(["node", "phase", "ts", "row"], kind="mergesort")
    dup = good.duplicated(["node", "phase", "ts"], keep="first")
    report.duplicates = int(dup.sum())
    good = good[~dup]
    report.rows_skipped = report.malformed + report.duplicates
    report.missing_p = int(good["mp"].sum())
    report.missing_q = int(good["mq"].sum())
    report.missing_v = int(good["mv"].sum())
    if good.empty:
        raise EmptyInput("no valid measurement rows")

    out = MeasurementSet(report=report)
    for (n, ph), g in good.groupby(["node", "phase"], sort=True):
        out.add(MeasurementSeries(n, Phase(ph), g["ts"].to_numpy(), g["p"].to_numpy(),
                                  g["q"].to_numpy(), g["v"].to_numpy()))
    return out


def write_csv(ms: MeasurementSet, stream):
    """Write ``ms`` in the measurement CSV format, rows ordered by time, node, phase."""
    parts = []
    for s in ms:
        parts.append(pd.DataFrame({"timestamp": s.timestamp, "node": s.node, "phase": s.phase.value,
                                   "p_w": s.p, "q_var": s.q, "v_v": s.v}))
    frame = pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=list(CSV_COLUMNS))
    frame = frame.sort_values(["timestamp", "node", "phase"], kind="mergesort")
    ts = frame["timestamp"].to_numpy(dtype=float)
    if len(ts) and np.all(np.mod(ts, 1) == 0):
        frame["timestamp"] = ts.astype(np.int64)
    frame.to_csv(stream, index=False, na_rep="", lineterminator="\n", columns=list(CSV_COLUMNS))
