"""Small scenario builders shared by the tests."""

import math

import numpy as np

from gridimp.grid_model import PHASES, Line, build_topology
from gridimp.measurements import MeasurementSeries, MeasurementSet
from gridimp.synth import LoadSpec, SimulationScenario

DAY = 86400.0


def chain_scenario(n_lines=1, *, z=0.1, delta=0.45, base_p=2300.0, pf=None, kind="power", measured=None,
                   days=1.0, noise=0.0, calibration=0.0, missing=0.0, daily=0.0, walk=0.0, seed=0,
                   root_pu=1.0, offsets=None, leaf_only=False):
    """Root ``R`` feeding a chain ``N1 .. Nn``; every non-root node carries a load."""
    nodes = ["R"] + [f"N{k}" for k in range(1, n_lines + 1)]
    lines = [Line(a, b, f"{a}-{b}") for a, b in zip(nodes, nodes[1:])]
    topo = build_topology(nodes, lines, "R", set(nodes) if measured is None else set(measured))
    pf = delta if pf is None else pf
    loads = {}
    for k, node in enumerate(nodes[1:], start=1):
        if leaf_only and k != n_lines:
            continue
        for ph in PHASES:
            loads[(node, ph)] = LoadSpec(base_p, pf, kind, daily_amplitude=daily, walk_sigma=walk)
    zs = z if isinstance(z, (list, tuple)) else [z] * n_lines
    true_z = {(ln.line_id, ph): (zs[k], delta) for k, ln in enumerate(lines) for ph in PHASES}
    return SimulationScenario(topo, true_z, loads, duration_s=days * DAY, noise_pct=noise,
                              calibration_pct=calibration, missing_rate=missing, seed=seed,
                              root_voltage_pu=root_pu, clock_offsets=offsets or {})


def constant_series(node, phase, n, p, q, v, t0=0.0, dt=150.0):
    ts = t0 + dt * np.arange(n)
    full = lambda x: np.full(n, float(x)) if np.isscalar(x) else np.asarray(x, dtype=float)
    return MeasurementSeries(node, phase, ts, full(p), full(q), full(v))


def measurement_set(*series):
    ms = MeasurementSet()
    for s in series:
        ms.add(s)
    return ms


def rel(a, b):
    return abs(a - b) / abs(b)


def deg(x):
    return math.degrees(x)
