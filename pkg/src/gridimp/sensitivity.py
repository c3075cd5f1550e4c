"""Estimation error as a function of how many samples per node are used."""

from __future__ import annotations

import numpy as np

from .decomposer import LineCase
from .estimator import DEFAULT_CONFIG, estimate_all
from .reports import angle_error_deg, percentage_error


class SizeExceedsData(ValueError):
    pass


def truncate(ms, n: int, *, random_subsample: bool = False, seed: int = 0):
    """Keep the first ``n`` samples of every series, or a seeded random ``n``."""
    if not random_subsample:
        return ms.map(lambda s: s.head(n))
    rng = np.random.default_rng(seed)
    return ms.map(lambda s: s.take(rng.choice(len(s), size=min(n, len(s)), replace=False)))


def run_sensitivity(topology, ms, reference: dict, sizes, band, config=DEFAULT_CONFIG, *,
                    cases=(LineCase.CASE1,), random_subsample=False, seed=0) -> list:
    """One row per (size, line, phase) for lines of ``cases``; errors blank when undetermined."""
    sizes = sorted(int(n) for n in sizes)
    measured = [s for s in ms if s.node in topology.measured_nodes]
    available = min((len(s) for s in measured), default=0)
    if not sizes or sizes[-1] > available:
        raise SizeExceedsData(f"largest size {sizes[-1] if sizes else None} exceeds the {available} samples available")
    rows = []
    for n in sizes:
        res = estimate_all(topology, truncate(ms, n, random_subsample=random_subsample, seed=seed), band, config)
        for e in res:
            if e.case not in cases:
                continue
            ref = reference.get((e.line.line_id, e.phase))
            err = derr = None
            if ref is not None and e.determined and e.z_mag is not None:
                err = percentage_error(e.z_mag, ref[0])
                derr = angle_error_deg(e.delta, ref[1])
            rows.append({"n_samples": n, "line_id": e.line.line_id, "phase": e.phase.value,
                         "err_pct": err, "err_delta_deg": derr})
    return rows


def median_error_by_size(rows) -> dict:
    out = {}
    for n in sorted({r["n_samples"] for r in rows}):
        vals = [r["err_pct"] for r in rows if r["n_samples"] == n and r["err_pct"] is not None]
        out[n] = float(np.median(vals)) if vals else None
    return out
