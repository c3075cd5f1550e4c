"""Synthetic feeders with known impedances, and an emulator for GMD readings.

The power-flow solver keeps full complex phasors and never uses the
small-angle simplification the estimators rely on, so it can serve as
ground truth for them.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.signal import lfilter

from .decomposer import LineCase, decompose
from .estimator import benchmark_impedance, cable_inductance
from .grid_model import PHASES, GridTopology, Line, Phase, build_topology, topology_from_dict, topology_to_dict
from .measurements import MeasurementSeries, MeasurementSet, write_csv

DAY_S = 86400.0
MAY_2018 = 1525132800  # 2018-05-01T00:00:00Z

# stream tags for seed-derived RNGs
_LOAD, _NOISE, _GAIN, _DROP = 1, 2, 3, 4


class NonConvergence(RuntimeError):
    pass


class InvalidConfig(ValueError):
    pass


class InvalidScenario(ValueError):
    pass


@dataclass(frozen=True)
class LoadSpec:
    """Per-phase demand at one node: base active power (W, consumed) and shape.

    ``kind`` selects the voltage dependence: constant ``power``, ``current``
    or ``impedance`` (the base value applies at nominal voltage).
    """

    base_p_w: float
    pf_angle: float = 0.0
    kind: str = "power"
    daily_amplitude: float = 0.0
    daily_phase: float = 0.0
    walk_sigma: float = 0.0
    walk_theta: float = 0.05

    def __post_init__(self):
        if self.kind not in ("power", "current", "impedance"):
            raise InvalidScenario(f"unknown load kind {self.kind!r}")


@dataclass(frozen=True)
class LineData:
    r_ohm_per_km: float
    l_h_per_km: float
    length_km: float

    def impedance(self):
        return benchmark_impedance(self.r_ohm_per_km, self.l_h_per_km, self.length_km)


@dataclass
class SimulationScenario:
    topology: GridTopology
    true_impedances: dict  # (line_id, Phase) -> (z_ohm, delta_rad)
    loads: dict  # (node, Phase) -> LoadSpec
    duration_s: float
    v_nominal: float = 230.0
    root_voltage_pu: float = 1.0
    noise_pct: float = 0.01
    calibration_pct: float = 0.0
    sample_interval_s: float = 150.0
    missing_rate: float = 0.0
    clock_offsets: dict = field(default_factory=dict)  # node -> seconds in [0, interval)
    seed: int = 0
    start_epoch: int = MAY_2018
    line_data: dict = field(default_factory=dict)  # line_id -> LineData

    def __post_init__(self):
        for key, (z, _) in self.true_impedances.items():
            if not z > 0:
                raise InvalidScenario(f"impedance of {key} must be positive")
        if self.noise_pct < 0 or self.calibration_pct < 0:
            raise InvalidScenario("noise levels must be non-negative")
        if not 0 <= self.missing_rate < 1:
            raise InvalidScenario("missing_rate must lie in [0, 1)")
        if not self.sample_interval_s > 0 or not self.duration_s > 0:
            raise InvalidScenario("interval and duration must be positive")

    @property
    def n_steps(self) -> int:
        return int(self.duration_s // self.sample_interval_s)

    def node_index(self, node: str) -> int:
        return sorted(self.topology.nodes).index(node)

    def grid_times(self) -> np.ndarray:
        """Solver instants; one past the last sample so offsets can interpolate."""
        return self.start_epoch + self.sample_interval_s * np.arange(self.n_steps + 1)

    def z_complex(self, phase: Phase) -> dict:
        out = {}
        for ln in self.topology.lines:
            z, d = self.true_impedances[(ln.line_id, Phase(phase))]
            out[ln.line_id] = z * complex(math.cos(d), math.sin(d))
        return out


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def load_series(scenario: SimulationScenario, phase: Phase, times: np.ndarray | None = None) -> dict:
    """Complex demand (W + j var at nominal voltage) per node over ``times``."""
    phase = Phase(phase)
    if times is None:
        times = scenario.grid_times()
    ph_idx = PHASES.index(phase)
    out = {}
    for node in sorted(scenario.topology.nodes):
        spec = scenario.loads.get((node, phase))
        if spec is None or spec.base_p_w == 0:
            out[node] = np.zeros(len(times), dtype=complex)
            continue
        shape = 1.0 + spec.daily_amplitude * np.sin(2 * np.pi * (times - times[0]) / DAY_S + spec.daily_phase)
        if spec.walk_sigma > 0:
            eps = _rng(scenario.seed, _LOAD, scenario.node_index(node), ph_idx).standard_normal(len(times))
            walk = lfilter([spec.walk_sigma], [1.0, -(1.0 - spec.walk_theta)], eps)
            shape = shape * np.exp(walk)
        p = spec.base_p_w * shape
        out[node] = p + 1j * p * math.tan(spec.pf_angle)
    return out


# -- power flow --------------------------------------------------------------

@dataclass
class PowerFlowSolution:
    """Per-phase phasors over time.

    ``voltage[node]`` is the node voltage; ``current[node]`` the current
    entering ``node`` from its parent line (for the root: from the supply).
    """

    topology: GridTopology
    z_line: dict
    voltage: dict
    current: dict
    load_current: dict
    iterations: int

    def line_current(self, line: Line) -> np.ndarray:
        return self.current[line.child]

    def sending_power(self, line: Line) -> np.ndarray:
        return self.voltage[line.parent] * np.conj(self.current[line.child])

    def receiving_power(self, line: Line) -> np.ndarray:
        return self.voltage[line.child] * np.conj(self.current[line.child])

    def line_loss(self, line: Line) -> np.ndarray:
        i = self.current[line.child]
        return self.z_line[line.line_id] * (i * np.conj(i))


def _load_current(s0, v, kind, v_nominal):
    mag = np.abs(v)
    if kind == "power":
        s = s0
    elif kind == "current":
        s = s0 * mag / v_nominal
    else:
        s = s0 * (mag / v_nominal) ** 2
    return np.conj(s / v)


def sweep(topology: GridTopology, z_line: dict, demand: dict, v_root, *, kinds=None,
          v_nominal: float = 230.0, tol: float = 1e-10, max_iter: int = 100) -> PowerFlowSolution:
    """Backward/forward sweep on a radial feeder, vectorised over time.

    ``demand[node]`` holds complex power arrays; ``kinds`` maps a node to its
    load model (default constant power). Converges when no node voltage moves
    by more than ``tol`` volts between sweeps.
    """
    kinds = kinds or {}
    order = []
    frontier = [topology.root]
    while frontier:
        order.extend(frontier)
        frontier = [c for n in frontier for c in topology._children[n]]
    shape = np.shape(next(iter(demand.values()))) if demand else np.shape(v_root)
    v = {n: np.full(shape, v_root, dtype=complex) for n in order}
    for it in range(1, max_iter + 1):
        i_load = {n: _load_current(demand.get(n, 0j), v[n], kinds.get(n, "power"), v_nominal) for n in order}
        current = {}
        for n in reversed(order):
            acc = i_load[n].copy()
            for c in topology._children[n]:
                acc += current[c]
            current[n] = acc
        new_v = {topology.root: v[topology.root]}
        for n in order[1:]:
            ln = topology.parent_line(n)
            new_v[n] = new_v[ln.parent] - z_line[ln.line_id] * current[n]
        change = max(float(np.max(np.abs(new_v[n] - v[n]))) for n in order)
        v = new_v
        if change < tol:
            return PowerFlowSolution(topology, dict(z_line), v, current, i_load, it)
        if not all(np.all(np.isfinite(x)) for x in v.values()):
            break
    raise NonConvergence(f"sweep did not converge in {max_iter} iterations")


def solve_power_flow(scenario: SimulationScenario, phase: Phase, t=None, **kw) -> PowerFlowSolution:
    """Solve one phase at grid index ``t`` (an int, slice or index array; all steps if None)."""
    times = scenario.grid_times()
    if t is not None:
        times = np.atleast_1d(times[t])
    demand = load_series(scenario, phase, scenario.grid_times())
    if t is not None:
        demand = {n: np.atleast_1d(s[t]) for n, s in demand.items()}
    kinds = {node: spec.kind for (node, ph), spec in scenario.loads.items() if ph == Phase(phase)}
    return sweep(scenario.topology, scenario.z_complex(phase), demand,
                 scenario.root_voltage_pu * scenario.v_nominal, kinds=kinds, v_nominal=scenario.v_nominal, **kw)


def power_balance_error(sol: PowerFlowSolution) -> float:
    """Worst relative mismatch of S_send = S_recv + |I|^2 Z over lines and time."""
    worst = 0.0
    for ln in sol.topology.lines:
        send = sol.sending_power(ln)
        resid = send - sol.receiving_power(ln) - sol.line_loss(ln)
        scale = np.maximum(np.abs(send), 1e-300)
        worst = max(worst, float(np.max(np.abs(resid) / scale)))
    return worst


def max_angle_difference(sol: PowerFlowSolution) -> float:
    worst = 0.0
    for ln in sol.topology.lines:
        d = np.angle(sol.voltage[ln.child] / sol.voltage[ln.parent])
        worst = max(worst, float(np.max(np.abs(d))))
    return worst


# -- sensor emulation --------------------------------------------------------

def emulate_measurements(scenario: SimulationScenario, solutions: dict | None = None) -> MeasurementSet:
    """GMD readings for every measured node: P/Q out of the node, |V|; angles dropped.

    Each node samples at its own clock offset (phasors interpolated between
    solver instants), each channel gets a fixed calibration gain and
    independent multiplicative noise, and whole readings go missing at
    ``missing_rate``.
    """
    if solutions is None:
        solutions = {ph: solve_power_flow(scenario, ph) for ph in PHASES}
    k = scenario.n_steps
    grid = scenario.grid_times()
    ms = MeasurementSet()
    for node in sorted(scenario.topology.measured_nodes):
        n_idx = scenario.node_index(node)
        offset = float(scenario.clock_offsets.get(node, 0.0))
        w = offset / scenario.sample_interval_s
        stamps = grid[:k] + offset
        keep = np.ones(k, dtype=bool)
        if scenario.missing_rate > 0:
            keep = _rng(scenario.seed, _DROP, n_idx).random(k) >= scenario.missing_rate
        for ph in PHASES:
            sol = solutions[ph]
            ph_idx = PHASES.index(ph)
            vol = (1 - w) * sol.voltage[node][:k] + w * sol.voltage[node][1:k + 1]
            cur = (1 - w) * sol.current[node][:k] + w * sol.current[node][1:k + 1]
            s_out = -vol * np.conj(cur)
            chans = [s_out.real, s_out.imag, np.abs(vol)]
            gains = _rng(scenario.seed, _GAIN, n_idx, ph_idx).standard_normal(3) * scenario.calibration_pct
            noise = _rng(scenario.seed, _NOISE, n_idx, ph_idx).standard_normal((3, k)) * scenario.noise_pct
            p, q, v = ((1 + g) * (1 + e) * c for g, e, c in zip(gains, noise, chans))
            ms.add(MeasurementSeries(node, ph, stamps[keep], p[keep], q[keep], v[keep]))
    return ms


def emulate_sensors(scenario: SimulationScenario, solutions: dict | None = None, stream=None):
    """Write emulated readings in the measurement CSV format; returns the stream."""
    stream = stream if stream is not None else io.StringIO()
    write_csv(emulate_measurements(scenario, solutions), stream)
    return stream


def ground_truth_rows(scenario: SimulationScenario) -> list:
    return [
        {"line_id": ln.line_id, "phase": ph.value,
         "z_ohm": scenario.true_impedances[(ln.line_id, ph)][0],
         "delta_rad": scenario.true_impedances[(ln.line_id, ph)][1]}
        for ln in scenario.topology.lines for ph in PHASES
    ]


def write_ground_truth(scenario: SimulationScenario, stream):
    stream.write("line_id,phase,z_ohm,delta_rad\n")
    for r in ground_truth_rows(scenario):
        stream.write(f"{r['line_id']},{r['phase']},{float(r['z_ohm'])!r},{float(r['delta_rad'])!r}\n")


def write_benchmark(scenario: SimulationScenario, stream):
    stream.write("line_id,r_ohm_per_km,l_h_per_km,length_km\n")
    for ln in scenario.topology.lines:
        d = scenario.line_data.get(ln.line_id)
        if d is not None:
            stream.write(f"{ln.line_id},{float(d.r_ohm_per_km)!r},{float(d.l_h_per_km)!r},{float(d.length_km)!r}\n")


# -- Aspern-like generator ---------------------------------------------------

# (name, R ohm/km, formation constant K, axial spacing mm, conductor diameter mm)
CABLE_CATALOG = (
    ("NAYY-4x95", 0.320, 0.0575, 14.5, 11.0),
    ("NAYY-4x150", 0.206, 0.0575, 18.5, 13.8),
    ("NAYY-4x240", 0.125, 0.0575, 22.6, 17.5),
)


@dataclass(frozen=True)
class AspernConfig:
    n_nodes: int = 15
    coverage: float = 0.5
    imbalance: float = 0.2
    days: float = 30.0
    seed: int = 0
    noise_pct: float = 0.01
    calibration_pct: float = 0.0003
    missing_rate: float = 0.13
    v_nominal: float = 230.0
    pf_spread_deg: float = 0.5
    max_children: int = 3
    max_depth: int = 4
    base_load_kw: tuple = (2.0, 6.0)
    target_max_drop: float = 0.04
    length_km: tuple = (0.08, 0.25)
    sample_interval_s: float = 150.0
    require_all_cases: bool = True


def _random_tree(rng, n, max_children, max_depth):
    ids = [f"L{k:02d}" for k in range(n)]
    depth = {ids[0]: 0}
    n_children = {ids[0]: 0}
    lines = []
    for k in range(1, n):
        open_nodes = [x for x in ids[:k] if n_children[x] < max_children and depth[x] < max_depth]
        if not open_nodes:
            raise InvalidConfig("tree shape limits too tight for the node count")
        par = open_nodes[rng.integers(len(open_nodes))]
        lines.append(Line(par, ids[k], f"{par}-{ids[k]}"))
        depth[ids[k]] = depth[par] + 1
        n_children[ids[k]] = 0
        n_children[par] += 1
    return ids, lines


def make_aspern_like(config: AspernConfig = AspernConfig()) -> SimulationScenario:
    """Random radial LV feeder, GMDs on a ``coverage`` share of nodes.

    One cable type per feeder; load power-factor angles sit within
    ``pf_spread_deg`` of the cable's impedance angle, which is the regime
    where the Case-1/2 angle estimate is meaningful.
    """
    c = config
    if c.n_nodes < 2:
        raise InvalidConfig("need at least two nodes")
    if not 0 <= c.coverage <= 1:
        raise InvalidConfig("coverage must lie in [0, 1]")
    if c.imbalance < 0 or c.imbalance >= 1:
        raise InvalidConfig("imbalance must lie in [0, 1)")
    if not c.days > 0:
        raise InvalidConfig("days must be positive")
    rng = np.random.default_rng([c.seed, 99])
    n_meas = int(round(c.coverage * c.n_nodes))
    want_all = c.require_all_cases and 0 < n_meas < c.n_nodes
    for _ in range(500):
        ids, lines = _random_tree(rng, c.n_nodes, c.max_children, c.max_depth)
        if n_meas == 0:
            measured = set()
        else:
            others = list(rng.choice(ids[1:], size=n_meas - 1, replace=False)) if n_meas > 1 else []
            measured = {ids[0], *others}
        topo = build_topology(ids, lines, ids[0], measured)
        cases = {cl.case for cl in decompose(topo)}
        if not want_all or cases == set(LineCase):
            break
    else:
        raise InvalidConfig("could not place sensors so that all four line cases occur")

    name, r_km, k_form, s_mm, d_mm = CABLE_CATALOG[rng.integers(len(CABLE_CATALOG))]
    l_km = cable_inductance(k_form, s_mm, d_mm) * 1000.0
    line_data, true_z = {}, {}
    for ln in topo.lines:
        data = LineData(r_km, l_km, float(rng.uniform(*c.length_km)))
        line_data[ln.line_id] = data
        for ph in PHASES:
            true_z[(ln.line_id, ph)] = data.impedance()
    cable_angle = true_z[(topo.lines[0].line_id, Phase.A)][1]

    loads = {}
    spread = math.radians(c.pf_spread_deg)
    day_phase = float(rng.uniform(0, 2 * np.pi))
    for node in ids[1:]:
        base = float(rng.uniform(*c.base_load_kw)) * 1000.0
        for ph in PHASES:
            loads[(node, ph)] = LoadSpec(
                base_p_w=base * (1 + c.imbalance * float(rng.uniform(-1, 1))),
                pf_angle=cable_angle + spread * float(rng.standard_normal()),
                daily_amplitude=0.3,
                daily_phase=day_phase + 0.3 * float(rng.standard_normal()),
                walk_sigma=0.03,
                walk_theta=0.02,
            )
    offsets = {n: int(rng.integers(0, int(c.sample_interval_s))) for n in ids}
    if c.target_max_drop > 0:
        loads = _scale_to_drop(topo, true_z, loads, c)
    return SimulationScenario(
        topology=topo, true_impedances=true_z, loads=loads, duration_s=c.days * DAY_S,
        v_nominal=c.v_nominal, noise_pct=c.noise_pct, calibration_pct=c.calibration_pct,
        sample_interval_s=c.sample_interval_s, missing_rate=c.missing_rate, clock_offsets=offsets,
        seed=c.seed, line_data=line_data,
    )


def _scale_to_drop(topo, true_z, loads, c: AspernConfig) -> dict:
    """Rescale base loads so the deepest voltage drop at daily peak is ``target_max_drop``."""
    scale = 1.0
    for _ in range(4):
        worst = 0.0
        for ph in PHASES:
            z = {ln.line_id: true_z[(ln.line_id, ph)][0] * complex(math.cos(true_z[(ln.line_id, ph)][1]),
                                                                   math.sin(true_z[(ln.line_id, ph)][1]))
                 for ln in topo.lines}
            demand = {}
            for (node, lph), spec in loads.items():
                if lph == ph:
                    p = scale * spec.base_p_w * (1 + spec.daily_amplitude)
                    demand[node] = np.array([p + 1j * p * math.tan(spec.pf_angle)])
            sol = sweep(topo, z, demand, c.v_nominal, v_nominal=c.v_nominal)
            worst = max(worst, max(1 - float(np.abs(v[0])) / c.v_nominal for v in sol.voltage.values()))
        if worst <= 0:
            break
        scale *= c.target_max_drop / worst
    return {k: LoadSpec(**{**asdict(spec), "base_p_w": spec.base_p_w * scale}) for k, spec in loads.items()}


# -- scenario file -----------------------------------------------------------

def scenario_to_dict(s: SimulationScenario) -> dict:
    return {
        "topology": topology_to_dict(s.topology),
        "true_impedances": [
            {"line_id": lid, "phase": ph.value, "z_ohm": z, "delta_rad": d}
            for (lid, ph), (z, d) in sorted(s.true_impedances.items(), key=lambda kv: (kv[0][0], kv[0][1].value))
        ],
        "loads": [
            {"node": node, "phase": ph.value, **asdict(spec)}
            for (node, ph), spec in sorted(s.loads.items(), key=lambda kv: (kv[0][0], kv[0][1].value))
        ],
        "line_data": {lid: asdict(d) for lid, d in sorted(s.line_data.items())},
        "duration_s": s.duration_s,
        "v_nominal": s.v_nominal,
        "root_voltage_pu": s.root_voltage_pu,
        "noise_pct": s.noise_pct,
        "calibration_pct": s.calibration_pct,
        "sample_interval_s": s.sample_interval_s,
        "missing_rate": s.missing_rate,
        "clock_offsets": dict(sorted(s.clock_offsets.items())),
        "seed": s.seed,
        "start_epoch": s.start_epoch,
    }


def scenario_from_dict(doc: dict) -> SimulationScenario:
    try:
        topo = topology_from_dict(doc["topology"])
        true_z = {(r["line_id"], Phase(r["phase"])): (float(r["z_ohm"]), float(r["delta_rad"]))
                  for r in doc["true_impedances"]}
        loads = {}
        for r in doc.get("loads", []):
            r = dict(r)
            key = (r.pop("node"), Phase(r.pop("phase")))
            loads[key] = LoadSpec(**r)
        missing = [(ln.line_id, ph) for ln in topo.lines for ph in PHASES if (ln.line_id, ph) not in true_z]
        if missing:
            raise InvalidScenario(f"no true impedance for {missing[:3]}")
        return SimulationScenario(
            topology=topo, true_impedances=true_z, loads=loads,
            duration_s=float(doc["duration_s"]),
            v_nominal=float(doc.get("v_nominal", 230.0)),
            root_voltage_pu=float(doc.get("root_voltage_pu", 1.0)),
            noise_pct=float(doc.get("noise_pct", 0.01)),
            calibration_pct=float(doc.get("calibration_pct", 0.0)),
            sample_interval_s=float(doc.get("sample_interval_s", 150.0)),
            missing_rate=float(doc.get("missing_rate", 0.0)),
            clock_offsets={k: float(v) for k, v in doc.get("clock_offsets", {}).items()},
            seed=int(doc.get("seed", 0)),
            start_epoch=int(doc.get("start_epoch", MAY_2018)),
            line_data={k: LineData(**v) for k, v in doc.get("line_data", {}).items()},
        )
    except InvalidScenario:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidScenario(f"bad scenario document: {exc}") from exc


def load_scenario(path) -> SimulationScenario:
    with open(path, encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh))


def save_scenario(s: SimulationScenario, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(s), fh, indent=2)
        fh.write("\n")
