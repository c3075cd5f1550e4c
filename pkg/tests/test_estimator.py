import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridimp.decomposer import LineCase
from gridimp.estimator import (
    EstimationContext,
    EstimatorConfig,
    FeasibleVoltageBand,
    NoMeasuredAncestor,
    NonPositiveGeometry,
    Quality,
    WindowMismatch,
    ZeroMeanCurrent,
    benchmark_impedance,
    cable_inductance,
    estimate_all,
    estimate_case1,
    estimate_case2,
    estimate_case3,
    estimate_case4,
    paired_second_moments,
    share_impedance,
)
from gridimp.grid_model import Line, Phase, build_topology
from gridimp.measurements import InsufficientData, PhaseMoments, moments
from gridimp.synth import AspernConfig, emulate_measurements, make_aspern_like

from helpers import chain_scenario, constant_series, measurement_set, rel

BAND = FeasibleVoltageBand(230.0)


def pm(v, i, phi=0.0, n=1000, p=0.0, q=0.0, t0=0.0, t1=1.0e5):
    return PhaseMoments(mean_v=v, mean_i=i, mean_phi=phi, mean_i_sq=i * i, n_samples=n,
                        mean_p=p, mean_q=q, t_start=t0, t_end=t1)


# -- Case 1 ------------------------------------------------------------------

def test_case1_direct_arithmetic():
    e = estimate_case1(pm(230, 0), pm(228, 4, 0.2))
    assert e.z_mag == pytest.approx(0.5)
    assert e.delta == pytest.approx(0.2)
    assert e.quality is Quality.EXACT and e.case is LineCase.CASE1


def test_case1_zero_length_line():
    assert estimate_case1(pm(230, 0), pm(230, 3)).z_mag == 0


def test_case1_negative_flagged_not_clamped():
    e = estimate_case1(pm(228, 0), pm(230, 4))
    assert e.z_mag == pytest.approx(-0.5)
    assert "SignConventionSuspect" in e.reason


def test_case1_errors():
    with pytest.raises(ZeroMeanCurrent):
        estimate_case1(pm(230, 0), pm(228, 0))
    with pytest.raises(InsufficientData):
        estimate_case1(pm(230, 0, n=50), pm(228, 4))
    with pytest.raises(WindowMismatch):
        estimate_case1(pm(230, 0, t0=0, t1=10), pm(228, 4, t0=100, t1=200))


def test_case1_two_bus_synthetic():
    sc = chain_scenario(1, z=0.10, delta=0.45, days=2)
    ms = emulate_measurements(sc)
    e = estimate_case1(moments(ms.get("R", Phase.A)), moments(ms.get("N1", Phase.A)))
    assert rel(e.z_mag, 0.10) < 0.01
    assert abs(e.delta - 0.45) < 0.01


@settings(max_examples=30, deadline=None)
@given(st.floats(0.2, 5.0), st.integers(0, 1000))
def test_case1_scale_invariance(k, seed):
    rng = np.random.default_rng(seed)
    n = 200
    p = -rng.uniform(500, 3000, n)
    q = -rng.uniform(0, 1500, n)
    vi, vj = rng.uniform(229, 231, n), rng.uniform(224, 227, n)
    si, sj = constant_series("I", Phase.A, n, 0, 0, vi), constant_series("J", Phase.A, n, p, q, vj)
    base = estimate_case1(moments(si), moments(sj))
    scaled = estimate_case1(moments(constant_series("I", Phase.A, n, 0, 0, k * vi)),
                            moments(constant_series("J", Phase.A, n, k * k * p, k * k * q, k * vj)))
    assert scaled.z_mag == pytest.approx(base.z_mag, rel=1e-9)
    assert scaled.delta == pytest.approx(base.delta, abs=1e-12)


def test_case1_second_moment_variant_on_constant_data():
    si = constant_series("I", Phase.A, 200, 0, 0, 230)
    sj = constant_series("J", Phase.A, 200, -920, 0, 228)
    paired = paired_second_moments(si, sj)
    cfg = EstimatorConfig(variant="second_moment")
    e = estimate_case1(moments(si), moments(sj), config=cfg, paired=paired)
    assert e.z_mag == pytest.approx(2 / (920 / 228))
    assert e.meta["variant"] == "second_moment"


# -- Case 2 ------------------------------------------------------------------

@pytest.mark.parametrize("v, i, upper", [(235, 5, 1.3), (225, -5, 1.3), (228, 0, math.inf)])
def test_case2_upper_bound(v, i, upper):
    e = estimate_case2(pm(v, i, 0.3), BAND)
    assert e.z_upper == pytest.approx(upper)
    assert e.z_lower == 0 and e.z_mag is None
    assert e.delta == pytest.approx(0.3)
    assert e.quality is Quality.BOUNDED


def test_band_defaults():
    assert (BAND.v_min, BAND.v_max) == pytest.approx((218.5, 241.5))
    with pytest.raises(ValueError):
        FeasibleVoltageBand(230, 240, 220)


# -- Case 3 ------------------------------------------------------------------

def _two_node_ctx(p, q, v=230.0, model="split"):
    t = build_topology(["I", "J"], [Line("I", "J", "I-J")], "I", {"I"})
    mom = {("I", Phase.A): pm(v, 0, p=p, q=q)}
    return t, EstimationContext.build(t, mom, {}, BAND, EstimatorConfig(case3_model=model))


def test_case3_zero_reactive_residual():
    t, ctx = _two_node_ctx(-4600, 0)
    e = estimate_case3(t.line("I-J"), Phase.A, t, ctx)
    assert e.quality is Quality.UNDETERMINED
    assert e.reason == "ZeroResidualPower"
    assert e.meta["r_ohm"] == pytest.approx(230 ** 2 / 4600)


def test_case3_negative_residual_arithmetic():
    # injection into the feeder is the negated metered flow, so -529 W/var residual
    t, ctx = _two_node_ctx(529, 529)
    e = estimate_case3(t.line("I-J"), Phase.A, t, ctx)
    assert e.meta["r_ohm"] == pytest.approx(-100) and e.meta["x_ohm"] == pytest.approx(-100)
    assert e.z_mag == pytest.approx(141.42, abs=0.01)
    assert e.delta == pytest.approx(math.pi / 4)
    assert (e.meta["sign_r"], e.meta["sign_x"]) == (-1, -1)


def test_case3_series_model_matches_line_plus_load():
    sc = chain_scenario(1, z=0.1, delta=0.3, base_p=2000.0, pf=0.2, kind="impedance", measured={"R"})
    ms = emulate_measurements(sc)
    t = sc.topology
    ctx = EstimationContext.build(t, {("R", Phase.A): moments(ms.get("R", Phase.A))}, {}, BAND,
                                  EstimatorConfig(case3_model="series"))
    e = estimate_case3(t.line("R-N1"), Phase.A, t, ctx)
    s_load = 2000.0 * complex(1, math.tan(0.2))
    z_total = 0.1 * complex(math.cos(0.3), math.sin(0.3)) + 230.0 ** 2 / s_load.conjugate()
    assert rel(e.z_mag, abs(z_total)) < 0.02
    assert e.delta == pytest.approx(np.angle(z_total), abs=0.01)


def test_case3_subtracts_metered_child():
    # I feeds J (unmetered), J feeds K (metered). The residual drops K's demand.
    t = build_topology(["I", "J", "K"], [Line("I", "J", "I-J"), Line("J", "K", "J-K")], "I", {"I", "K"})
    mom = {("I", Phase.A): pm(230, 0, p=-3000, q=-1000), ("K", Phase.A): pm(228, 5, p=-1000, q=-400)}
    ctx = EstimationContext.build(t, mom, {}, BAND)
    e = estimate_case3(t.line("I-J"), Phase.A, t, ctx)
    assert e.meta["p_residual"] == pytest.approx(2000)
    assert e.meta["q_residual"] == pytest.approx(600)


# -- Case 4 ------------------------------------------------------------------

def test_case4_chain_shares_head_equivalent():
    t = build_topology(["R", "A", "B"], [Line("R", "A", "R-A"), Line("A", "B", "A-B")], "R", {"R"})
    ctx = EstimationContext.build(t, {("R", Phase.A): pm(230, 0, p=-2000, q=-800)}, {}, BAND)
    head = estimate_case3(t.line("R-A"), Phase.A, t, ctx)
    ests, group = estimate_case4(t.line("A-B"), Phase.A, t, ctx)
    assert group.n_branch == 2 and group.members == ("A-B", "R-A")
    assert [e.line.line_id for e in ests] == ["A-B"]
    assert ests[0].z_mag == pytest.approx(head.z_mag / 2)
    assert ests[0].delta == head.delta and ests[0].quality is Quality.SHARED
    assert sum(group.shares().values()) == pytest.approx(head.z_mag, rel=1e-12)
    assert group.member_shares == pytest.approx((head.z_mag / 2,) * 2)


def test_share_impedance_equal_split():
    assert share_impedance(2.0, 0.3, 2) == (1.0, 0.3)
    with pytest.raises(ValueError):
        share_impedance(2.0, 0.3, 0)


def test_case4_island_without_meter():
    t = build_topology(["R", "A"], [Line("R", "A", "R-A")], "R", set())
    ctx = EstimationContext.build(t, {}, {}, BAND)
    with pytest.raises(NoMeasuredAncestor):
        estimate_case4(t.line("R-A"), Phase.A, t, ctx)


# -- whole pipeline ----------------------------------------------------------

def test_estimate_all_fully_metered_chain():
    sc = chain_scenario(3, days=1)
    res = estimate_all(sc.topology, emulate_measurements(sc), BAND)
    assert len(res) == 9
    assert all(e.quality is Quality.EXACT for e in res)
    assert all(rel(e.z_mag, 0.1) < 0.02 for e in res)


def test_estimate_all_without_sensors():
    sc = chain_scenario(3, measured=set())
    res = estimate_all(sc.topology, measurement_set(), BAND)
    assert all(e.quality is Quality.UNDETERMINED and e.reason == "NoMeasuredAncestor" for e in res)


def test_estimate_all_insufficient_data_is_undetermined():
    sc = chain_scenario(1, days=0.1)  # 57 samples
    res = estimate_all(sc.topology, emulate_measurements(sc), BAND)
    assert all(e.reason == "InsufficientData" for e in res)


def test_estimate_all_aspern_coverage():
    sc = make_aspern_like(AspernConfig(days=2, seed=3))
    res = estimate_all(sc.topology, emulate_measurements(sc), BAND)
    assert len(res) == 3 * len(sc.topology.lines)
    assert {e.case for e in res} == set(LineCase)
    for e in res:
        assert e.determined or e.reason
        if e.z_mag is not None and e.determined:
            assert -math.pi / 2 < e.delta <= math.pi / 2


# -- benchmark geometry ------------------------------------------------------

def test_cable_inductance_examples():
    assert cable_inductance(0.5, 5.0, 10.0) == pytest.approx(0.5e-6)
    assert cable_inductance(0.0, 7.0, 7.0) == pytest.approx(1.3862943611198906e-07, rel=1e-12)
    with pytest.raises(NonPositiveGeometry):
        cable_inductance(0.5, 0.0, 1.0)


def test_cable_inductance_continuity():
    assert cable_inductance(0.5, 5.0, 10.0 - 1e-9) == pytest.approx(0.5e-6, rel=1e-9)


def test_benchmark_impedance():
    z, d = benchmark_impedance(0.2, 0.25e-3, 0.1)
    x = 2 * math.pi * 50 * 0.25e-4
    assert z == pytest.approx(math.hypot(0.02, x))
    assert d == pytest.approx(math.atan2(x, 0.02))


def test_case4_overlapping_walks_each_sum_to_equivalent():
    # R(metered) -> A -> B -> D and A -> C: the walks from D and from C overlap on R-A
    nodes = ["R", "A", "B", "C", "D"]
    lines = [Line("R", "A", "R-A"), Line("A", "B", "A-B"), Line("A", "C", "A-C"), Line("B", "D", "B-D")]
    t = build_topology(nodes, lines, "R", {"R"})
    mom = {("R", Phase.A): pm(230, 0, p=-4000, q=-1500)}
    ctx = EstimationContext.build(t, mom, {}, BAND)
    head = estimate_case3(t.line("R-A"), Phase.A, t, ctx)
    deep, g1 = estimate_case4(t.line("B-D"), Phase.A, t, ctx)
    assert [e.z_mag for e in deep] == pytest.approx([head.z_mag / 3] * 2)
    fixed = {e.line.line_id: e.z_mag for e in deep}
    side, g2 = estimate_case4(t.line("A-C"), Phase.A, t, ctx, fixed)
    assert [e.line.line_id for e in side] == ["A-C"]
    for g in (g1, g2):
        assert math.fsum(g.member_shares) == pytest.approx(head.z_mag, rel=1e-12)
