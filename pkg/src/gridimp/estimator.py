"""Per-case line impedance estimators and the pipeline that composes them.

All estimators work on one phase at a time from per-node sample means.
Case-1 and Case-2 lines only need their own endpoint moments; Case-3 lines
subtract already-known downstream flows from the metered injection; Case-4
lines share the equivalent impedance found at the nearest metered ancestor.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from .decomposer import LineCase, LineClassification, decompose
from .grid_model import PHASES, GridTopology, Line, Phase, children
from .measurements import (
    InsufficientData,
    MeasurementSeries,
    MeasurementSet,
    PhaseMoments,
    current_array,
    moments,
)

GRID_FREQUENCY_HZ = 50.0


class EstimationError(ValueError):
    reason = "EstimationError"


class ZeroMeanCurrent(EstimationError):
    reason = "ZeroMeanCurrent"


class WindowMismatch(EstimationError):
    reason = "WindowMismatch"


class NoMeasuredAncestor(EstimationError):
    reason = "NoMeasuredAncestor"


class UpstreamUndetermined(EstimationError):
    reason = "UpstreamUndetermined"


class NonPositiveGeometry(ValueError):
    pass


class Quality(str, enum.Enum):
    EXACT = "Exact"
    BOUNDED = "Bounded"
    EQUIVALENT_LOAD = "EquivalentLoad"
    SHARED = "Shared"
    UNDETERMINED = "Undetermined"


QUALITY_FOR_CASE = {
    LineCase.CASE1: Quality.EXACT,
    LineCase.CASE2: Quality.BOUNDED,
    LineCase.CASE3: Quality.EQUIVALENT_LOAD,
    LineCase.CASE4: Quality.SHARED,
}

SIGN_SUSPECT = "SignConventionSuspect"
ANGLE_OUT_OF_RANGE = "AngleOutOfRange"
ZERO_RESIDUAL = "ZeroResidualPower"
BAND_VIOLATION = "BandViolation"


@dataclass(frozen=True)
class FeasibleVoltageBand:
    v_nominal: float
    v_min: float | None = None
    v_max: float | None = None

    def __post_init__(self):
        if not self.v_nominal > 0:
            raise ValueError("v_nominal must be positive")
        if self.v_min is None:
            object.__setattr__(self, "v_min", 0.95 * self.v_nominal)
        if self.v_max is None:
            object.__setattr__(self, "v_max", 1.05 * self.v_nominal)
        if not self.v_min < self.v_max:
            raise ValueError("v_min must be below v_max")


@dataclass(frozen=True)
class EstimatorConfig:
    variant: str = "first_moment"  # or "second_moment"
    min_samples: int = 100
    min_overlap: float = 0.5
    case3_model: str = "split"  # or "series"

    def __post_init__(self):
        if self.variant not in ("first_moment", "second_moment"):
            raise ValueError(f"unknown estimator variant {self.variant!r}")
        if self.case3_model not in ("split", "series"):
            raise ValueError(f"unknown case-3 model {self.case3_model!r}")


DEFAULT_CONFIG = EstimatorConfig()


@dataclass(frozen=True)
class ImpedanceEstimate:
    line: Line
    phase: Phase
    case: LineCase
    quality: Quality
    z_mag: float | None = None
    delta: float | None = None
    z_lower: float | None = None
    z_upper: float | None = None
    n_samples_used: int = 0
    reason: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def determined(self) -> bool:
        return self.quality is not Quality.UNDETERMINED


@dataclass(frozen=True)
class SharingGroup:
    """One walk from a Case-4 line up to its metered ancestor.

    ``member_shares`` lines up with ``members``; the last entry is the part
    left on the head line, which itself keeps its Case-3 estimate.
    """

    head: Line
    phase: Phase
    z_equivalent: float
    delta: float
    members: tuple  # line ids, deepest first; the head line is last
    member_shares: tuple

    @property
    def n_branch(self) -> int:
        return len(self.members)

    def shares(self) -> dict:
        return dict(zip(self.members, self.member_shares))


def _reduce_angle(a: float):
    """Map into (-pi/2, pi/2]; the flag reports whether a shift was needed."""
    shifted = False
    while a <= -math.pi / 2:
        a += math.pi
        shifted = True
    while a > math.pi / 2:
        a -= math.pi
        shifted = True
    return a, shifted


def _check_samples(m: PhaseMoments, config: EstimatorConfig, what: str):
    if m.n_samples < config.min_samples:
        raise InsufficientData(f"{what}: {m.n_samples} usable samples < {config.min_samples}")


def window_overlap(a: PhaseMoments, b: PhaseMoments) -> float:
    """Fraction of the shorter observation window covered by the other one."""
    inter = min(a.t_end, b.t_end) - max(a.t_start, b.t_start)
    shorter = min(a.t_end - a.t_start, b.t_end - b.t_start)
    if shorter <= 0:
        return 1.0 if inter >= 0 else 0.0
    return max(0.0, inter) / shorter


def paired_second_moments(series_i: MeasurementSeries, series_j: MeasurementSeries, tolerance=None):
    """Pair each receiving-end sample with the nearest sending-end voltage.

    Returns ``(mean (V_i - V_j)^2, mean I_j^2, n_pairs)``. Pairs further apart
    than ``tolerance`` seconds (default: median spacing of ``series_j``) are
    dropped.
    """
    vi_ok = np.isfinite(series_i.v)
    ti, vi = series_i.timestamp[vi_ok], series_i.v[vi_ok]
    mj = series_j.complete_mask() & (series_j.v > 0)
    tj, pj, qj, vj = series_j.timestamp[mj], series_j.p[mj], series_j.q[mj], series_j.v[mj]
    if len(ti) == 0 or len(tj) == 0:
        return math.nan, math.nan, 0
    if tolerance is None:
        tolerance = float(np.median(np.diff(tj))) if len(tj) > 1 else math.inf
    k = np.clip(np.searchsorted(ti, tj), 1, max(len(ti) - 1, 1))
    left = np.maximum(k - 1, 0)
    right = np.minimum(k, len(ti) - 1)
    nearest = np.where(np.abs(ti[left] - tj) <= np.abs(ti[right] - tj), left, right)
    ok = np.abs(ti[nearest] - tj) <= tolerance
    if not ok.any():
        return math.nan, math.nan, 0
    dv = vi[nearest[ok]] - vj[ok]
    i = current_array(pj[ok], qj[ok], vj[ok])
    return float(np.mean(dv * dv)), float(np.mean(i * i)), int(ok.sum())


# -- Case 1 ------------------------------------------------------------------

def estimate_case1(m_i: PhaseMoments, m_j: PhaseMoments, *, line: Line | None = None,
                   phase=Phase.A, config: EstimatorConfig = DEFAULT_CONFIG, paired=None) -> ImpedanceEstimate:
    """Both ends metered: ``Z = (E[V_i] - E[V_j]) / E[I]`` and ``delta = E[Phi_j]``.

    ``paired`` carries the output of :func:`paired_second_moments` and is
    required for the second-moment variant, ``Z = sqrt(E[dV^2] / E[I^2])``.
    """
    _check_samples(m_i, config, "sending end")
    _check_samples(m_j, config, "receiving end")
    if window_overlap(m_i, m_j) < config.min_overlap:
        raise WindowMismatch("observation windows of the two ends overlap too little")
    reasons = []
    if config.variant == "first_moment":
        if m_j.mean_i == 0:
            raise ZeroMeanCurrent("mean current through the line is zero")
        z = (m_i.mean_v - m_j.mean_v) / m_j.mean_i
        n_used = min(m_i.n_samples, m_j.n_samples)
    else:
        if paired is None:
            raise ValueError("second-moment variant needs paired samples")
        dv2, i2, n_used = paired
        if n_used < config.min_samples:
            raise InsufficientData(f"only {n_used} paired samples")
        if not i2 > 0:
            raise ZeroMeanCurrent("mean squared current is zero")
        z = math.sqrt(dv2 / i2)
    if z < 0:
        reasons.append(SIGN_SUSPECT)
    delta, shifted = _reduce_angle(m_j.mean_phi)
    if shifted:
        reasons.append(ANGLE_OUT_OF_RANGE)
    return ImpedanceEstimate(line, Phase(phase), LineCase.CASE1, Quality.EXACT, z_mag=z, delta=delta,
                             n_samples_used=n_used, reason=";".join(reasons),
                             meta={"variant": config.variant})


# -- Case 2 ------------------------------------------------------------------

def estimate_case2(m_j: PhaseMoments, band: FeasibleVoltageBand, *, line: Line | None = None,
                   phase=Phase.A, config: EstimatorConfig = DEFAULT_CONFIG) -> ImpedanceEstimate:
    """Only the receiving end metered: bound Z by the feasible sending voltage."""
    _check_samples(m_j, config, "receiving end")
    if m_j.mean_i > 0:
        upper = (band.v_max - m_j.mean_v) / m_j.mean_i
    elif m_j.mean_i < 0:
        upper = (band.v_min - m_j.mean_v) / m_j.mean_i
    else:
        upper = math.inf
    reasons = []
    if upper < 0:
        reasons.append(BAND_VIOLATION)
    delta, shifted = _reduce_angle(m_j.mean_phi)
    if shifted:
        reasons.append(ANGLE_OUT_OF_RANGE)
    return ImpedanceEstimate(line, Phase(phase), LineCase.CASE2, Quality.BOUNDED, z_mag=None, delta=delta,
                             z_lower=0.0, z_upper=upper, n_samples_used=m_j.n_samples,
                             reason=";".join(reasons))


# -- Case 3 ------------------------------------------------------------------

@dataclass(frozen=True)
class EstimationContext:
    """Read-only view of moments and of the estimates finished so far."""

    topology: GridTopology
    moments: MappingProxyType
    estimates: MappingProxyType
    band: FeasibleVoltageBand
    config: EstimatorConfig = DEFAULT_CONFIG

    @classmethod
    def build(cls, topology, moments_map, estimates, band, config=DEFAULT_CONFIG):
        return cls(topology, MappingProxyType(dict(moments_map)), MappingProxyType(dict(estimates)), band, config)

    def extended(self, new_estimates) -> "EstimationContext":
        merged = dict(self.estimates)
        merged.update(new_estimates)
        return EstimationContext(self.topology, self.moments, MappingProxyType(merged), self.band, self.config)


def sending_end_power(ctx: EstimationContext, line: Line, phase: Phase):
    """Sending-end (P, Q) of a line whose receiving end is metered.

    Losses use the line's estimated Z when available; a bounded line
    contributes its lower bound (zero loss).
    """
    m = ctx.moments.get((line.child, phase))
    if m is None:
        return 0.0, 0.0
    est = ctx.estimates.get((line.line_id, phase))
    z, delta = 0.0, 0.0
    if est is not None and est.determined:
        if est.z_mag is not None:
            z = max(est.z_mag, 0.0)
        elif est.z_lower is not None:
            z = est.z_lower
        delta = est.delta or 0.0
    loss = m.mean_i ** 2 * z
    return loss * math.cos(delta) - m.mean_p, loss * math.sin(delta) - m.mean_q


def lower_bound_downstream(ctx: EstimationContext, node: str, phase: Phase):
    """Known power leaving ``node`` through lines whose far end is metered."""
    p = q = 0.0
    for m in sorted(children(ctx.topology, node)):
        if ctx.topology.is_measured(m):
            dp, dq = sending_end_power(ctx, ctx.topology.parent_line(m), phase)
            p += dp
            q += dq
    return p, q


def lower_bound_siblings(ctx: EstimationContext, node_i: str, node_j: str, phase: Phase):
    """Known power leaving ``node_i`` other than into ``node_j``, plus branch count.

    Every unmetered sibling is one more branch sharing the residual; what is
    known below it is still subtracted.
    """
    p = q = 0.0
    n_branch = 1
    for n in sorted(children(ctx.topology, node_i)):
        if n == node_j:
            continue
        if ctx.topology.is_measured(n):
            dp, dq = sending_end_power(ctx, ctx.topology.parent_line(n), phase)
        else:
            n_branch += 1
            dp, dq = lower_bound_downstream(ctx, n, phase)
        p += dp
        q += dq
    return p, q, n_branch


def equivalent_impedance(v_mean: float, p: float, q: float, model: str = "split"):
    """Equivalent (R, X) seen from a node at mean voltage ``v_mean`` absorbing (p, q).

    ``"split"`` uses ``R = V^2/P`` and ``X = V^2/Q``; ``"series"`` uses the
    series form ``R + jX = V^2 / conj(S)``. Returns ``None`` for a component
    whose denominator vanishes.
    """
    v2 = v_mean * v_mean
    if model == "split":
        r = v2 / p if p != 0 else None
        x = v2 / q if q != 0 else None
        return r, x
    s2 = p * p + q * q
    if s2 == 0:
        return None, None
    return v2 * p / s2, v2 * q / s2


def estimate_case3(line: Line, phase, t: GridTopology, ctx: EstimationContext) -> ImpedanceEstimate:
    """Sending end metered: residual injection shared across unmetered branches.

    The result lumps the line with everything unmetered behind it.
    """
    phase = Phase(phase)
    m_i = ctx.moments.get((line.parent, phase))
    if m_i is None:
        raise InsufficientData(f"no moments for metered node {line.parent}/{phase.value}")
    _check_samples(m_i, ctx.config, "sending end")
    # metered flow out of the node is -p; the injection into its feeders is its negation
    inj_p, inj_q = -m_i.mean_p, -m_i.mean_q
    pj, qj = lower_bound_downstream(ctx, line.child, phase)
    pi, qi, n_branch = lower_bound_siblings(ctx, line.parent, line.child, phase)
    p_res = (inj_p - pi - pj) / n_branch
    q_res = (inj_q - qi - qj) / n_branch
    r, x = equivalent_impedance(m_i.mean_v, p_res, q_res, ctx.config.case3_model)
    meta = {"p_residual": p_res, "q_residual": q_res, "n_branch": n_branch,
            "r_ohm": r, "x_ohm": x, "model": ctx.config.case3_model}
    if r is None or x is None:
        return ImpedanceEstimate(line, phase, LineCase.CASE3, Quality.UNDETERMINED,
                                 n_samples_used=m_i.n_samples, reason=ZERO_RESIDUAL, meta=meta)
    reasons = []
    if r < 0 or x < 0:
        meta["sign_r"] = int(math.copysign(1, r))
        meta["sign_x"] = int(math.copysign(1, x))
    if r < 0:
        reasons.append(SIGN_SUSPECT)
    delta = math.atan(x / r) if r != 0 else math.copysign(math.pi / 2, x)
    delta, _ = _reduce_angle(delta)
    return ImpedanceEstimate(line, phase, LineCase.CASE3, Quality.EQUIVALENT_LOAD, z_mag=math.hypot(r, x),
                             delta=delta, n_samples_used=m_i.n_samples, reason=";".join(reasons), meta=meta)


# -- Case 4 ------------------------------------------------------------------

def share_impedance(z: float, delta: float, n_branch: int):
    """Equal split of an equivalent impedance over ``n_branch`` series lines."""
    if n_branch < 1:
        raise ValueError("n_branch must be at least 1")
    return z / n_branch, delta


def case4_path(line: Line, t: GridTopology) -> list:
    """Lines from ``line`` up to and including the first one fed by a metered node."""
    path = [line]
    node = line.parent
    while not t.is_measured(node):
        up = t.parent_line(node)
        if up is None:
            raise NoMeasuredAncestor(f"no metered node above {line.line_id}")
        path.append(up)
        node = up.parent
    return path


def estimate_case4(line: Line, phase, t: GridTopology, ctx: EstimationContext, fixed=None):
    """Neither end metered: walk up to the metered ancestor and split its equivalent.

    Returns ``(estimates, group)`` where ``estimates`` covers the Case-4 lines
    on the walk not already in ``fixed`` (line id -> assigned Z). Without
    overlap each gets ``Z/N_branch`` with the ancestor's angle. Lines fixed by
    an earlier, deeper walk keep their value and the rest of ``Z`` is split
    equally over the new lines and the head, so every walk sums to ``Z``.
    """
    phase = Phase(phase)
    fixed = fixed or {}
    path = case4_path(line, t)
    head = path[-1]
    head_est = ctx.estimates.get((head.line_id, phase))
    if head_est is None:
        head_est = estimate_case3(head, phase, t, ctx)
    if not head_est.determined or head_est.z_mag is None:
        raise UpstreamUndetermined(f"equivalent impedance at {head.line_id} is undetermined ({head_est.reason})")
    z_eq = head_est.z_mag
    new = [ln for ln in path[:-1] if ln.line_id not in fixed]
    z_left = z_eq - sum(fixed[ln.line_id] for ln in path[:-1] if ln.line_id in fixed)
    z_share, delta = share_impedance(z_left, head_est.delta, len(new) + 1)
    shares = [fixed.get(ln.line_id, z_share) for ln in path[:-1]] + [z_share]
    group = SharingGroup(head, phase, z_eq, delta, tuple(ln.line_id for ln in path), tuple(shares))
    out = [
        ImpedanceEstimate(ln, phase, LineCase.CASE4, Quality.SHARED, z_mag=z_share, delta=delta,
                          n_samples_used=head_est.n_samples_used,
                          meta={"n_branch": group.n_branch, "head": head.line_id})
        for ln in new
    ]
    return out, group


# -- pipeline ----------------------------------------------------------------

@dataclass
class EstimationResult:
    classifications: list
    estimates: list
    groups: list

    def __iter__(self):
        return iter(self.estimates)

    def __len__(self):
        return len(self.estimates)

    def by_key(self) -> dict:
        return {(e.line.line_id, e.phase): e for e in self.estimates}


def _undetermined(line, phase, case, reason, n=0):
    return ImpedanceEstimate(line, phase, case, Quality.UNDETERMINED, n_samples_used=n, reason=reason)


def node_moments(t: GridTopology, series: MeasurementSet, phases=PHASES) -> dict:
    out = {}
    for node in t.measured_nodes:
        for ph in phases:
            s = series.get(node, ph)
            if s is None:
                continue
            try:
                out[(node, ph)] = moments(s)
            except InsufficientData:
                pass
    return out


def estimate_all(t: GridTopology, series: MeasurementSet, band: FeasibleVoltageBand,
                 config: EstimatorConfig = DEFAULT_CONFIG, phases=PHASES) -> EstimationResult:
    """Decompose, then run Case 1/2, Case 3 and Case 4 estimators in that order.

    A line that cannot be estimated yields an ``Undetermined`` entry with a
    reason code; the run itself never aborts.
    """
    classes = decompose(t)
    mom = node_moments(t, series, phases)
    by_case = {c: [x for x in classes if x.case == c] for c in LineCase}
    done: dict = {}
    groups = []

    def guarded(cls: LineClassification, ph, fn):
        try:
            return fn()
        except (EstimationError, InsufficientData) as exc:
            reason = getattr(exc, "reason", "InsufficientData")
            return _undetermined(cls.line, ph, cls.case, reason)

    for ph in phases:
        for cls in by_case[LineCase.CASE1]:
            ln = cls.line

            def run1(ln=ln, ph=ph):
                m_i, m_j = mom.get((ln.parent, ph)), mom.get((ln.child, ph))
                if m_i is None or m_j is None:
                    raise InsufficientData("missing measurements at a line end")
                paired = None
                if config.variant == "second_moment":
                    paired = paired_second_moments(series.get(ln.parent, ph), series.get(ln.child, ph))
                return estimate_case1(m_i, m_j, line=ln, phase=ph, config=config, paired=paired)

            done[(ln.line_id, ph)] = guarded(cls, ph, run1)
        for cls in by_case[LineCase.CASE2]:
            ln = cls.line

            def run2(ln=ln, ph=ph):
                m_j = mom.get((ln.child, ph))
                if m_j is None:
                    raise InsufficientData("missing measurements at the receiving end")
                return estimate_case2(m_j, band, line=ln, phase=ph, config=config)

            done[(ln.line_id, ph)] = guarded(cls, ph, run2)

    # Case-3 reads a frozen snapshot of the Case-1/2 results
    ctx = EstimationContext.build(t, mom, done, band, config)
    case3 = {}
    for ph in phases:
        for cls in by_case[LineCase.CASE3]:
            case3[(cls.line.line_id, ph)] = guarded(
                cls, ph, lambda cls=cls, ph=ph: estimate_case3(cls.line, ph, t, ctx))
    done.update(case3)
    ctx = ctx.extended(case3)

    case4 = {}
    for ph in phases:
        fixed = {}  # line id -> share already assigned on this phase
        for cls in by_case[LineCase.CASE4]:
            key = (cls.line.line_id, ph)
            if key in case4:
                continue
            try:
                ests, group = estimate_case4(cls.line, ph, t, ctx, fixed)
            except (EstimationError, InsufficientData) as exc:
                reason = getattr(exc, "reason", "InsufficientData")
                try:
                    path = case4_path(cls.line, t)[:-1]
                except NoMeasuredAncestor:
                    path = [cls.line]
                for ln in path:
                    case4.setdefault((ln.line_id, ph), _undetermined(ln, ph, LineCase.CASE4, reason))
                continue
            groups.append(group)
            for e in ests:
                case4[(e.line.line_id, ph)] = e
                fixed[e.line.line_id] = e.z_mag
    done.update(case4)

    estimates = [done[(c.line.line_id, ph)] for c in classes for ph in phases]
    return EstimationResult(classes, estimates, groups)


def phase_spread(estimates) -> dict:
    """Per line: (max - min) / mean of Z over phases, an imbalance indicator."""
    zs: dict = {}
    for e in estimates:
        if e.determined and e.z_mag is not None:
            zs.setdefault(e.line.line_id, []).append(e.z_mag)
    out = {}
    for lid, vals in zs.items():
        if len(vals) > 1 and np.mean(vals) != 0:
            out[lid] = float((max(vals) - min(vals)) / abs(np.mean(vals)))
    return out


# -- benchmark impedances ----------------------------------------------------

def cable_inductance(k_formation: float, s_axial_mm: float, d_conductor_mm: float) -> float:
    """Per-phase cable inductance in H/m from formation constant, spacing and diameter."""
    if not (s_axial_mm > 0 and d_conductor_mm > 0):
        raise NonPositiveGeometry("spacing and diameter must be positive")
    return (k_formation + 0.2 * math.log(2.0 * s_axial_mm / d_conductor_mm)) * 1e-6


def benchmark_impedance(r_ohm_per_km: float, l_h_per_km: float, length_km: float,
                        frequency_hz: float = GRID_FREQUENCY_HZ):
    """(|Z|, angle) of a line from data-sheet resistance and inductance."""
    r = r_ohm_per_km * length_km
    x = 2 * math.pi * frequency_hz * l_h_per_km * length_km
    return math.hypot(r, x), math.atan2(x, r)
