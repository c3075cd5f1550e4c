import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridimp.grid_model import Phase
from gridimp.measurements import (
    EmptyInput,
    InsufficientData,
    NonPositiveVoltage,
    UnreadableStream,
    ZeroApparentPower,
    compute_current,
    compute_phi,
    ingest_csv,
    moments,
    write_csv,
)
from helpers import constant_series, measurement_set

HEADER = "timestamp,node,phase,p_w,q_var,v_v\n"

finite = st.floats(-1e6, 1e6, allow_nan=False).filter(lambda x: abs(x) > 1e-6)


def csv_bytes(*rows):
    return io.BytesIO((HEADER + "".join(r + "\n" for r in rows)).encode())


def test_phi_examples():
    assert compute_phi(3, 4) == pytest.approx(math.acos(3 / 5))
    assert compute_phi(3, 4) > 0
    assert math.degrees(compute_phi(3, 4)) == pytest.approx(53.130102, abs=1e-6)
    assert compute_phi(5, 0) == 0.0
    with pytest.raises(ZeroApparentPower):
        compute_phi(0, 0)


def test_phi_sign_is_independent_of_metering_direction():
    # consuming inductive node: both reported negative
    assert compute_phi(-3, -4) == pytest.approx(compute_phi(3, 4))
    assert compute_phi(-3, 4) == pytest.approx(-compute_phi(3, 4))


def test_current_examples():
    assert compute_current(-300, -400, 100) == pytest.approx(5.0)
    assert compute_current(300, 400, 100) == pytest.approx(-5.0)
    assert compute_current(0, 0, 230) == 0.0
    with pytest.raises(NonPositiveVoltage):
        compute_current(1, 1, 0)


@given(finite, finite, st.floats(1e-3, 1e3))
def test_phi_scale_invariant(p, q, k):
    assert compute_phi(k * p, k * q) == pytest.approx(compute_phi(p, q), abs=1e-12)
    assert -math.pi / 2 <= compute_phi(p, q) <= math.pi / 2


@given(finite, finite, st.floats(1.0, 1e3))
def test_current_sign_flips_with_p(p, q, v):
    a, b = compute_current(p, q, v), compute_current(-p, q, v)
    assert a == pytest.approx(-b)
    assert abs(a) == pytest.approx(math.hypot(p, q) / v)


def test_moments_constant_series():
    m = moments(constant_series("L09", Phase.A, 10, -230, 0, 230))
    assert (m.mean_v, m.mean_i, m.mean_phi, m.mean_i_sq, m.n_samples) == (230, 1, 0, 1, 10)
    assert m.mean_i_sq == m.mean_i ** 2


def test_moments_alternating_voltage():
    m = moments(constant_series("L09", Phase.A, 2, -230, 0, [229, 231]))
    expected = (230 / 229 + 230 / 231) / 2  # per-sample current, then averaged
    assert m.mean_v == pytest.approx(230)
    assert m.mean_i == pytest.approx(expected, rel=1e-14)


def test_moments_empty_and_all_missing():
    with pytest.raises(InsufficientData):
        moments(constant_series("X", Phase.A, 0, 0, 0, 0))
    with pytest.raises(InsufficientData):
        moments(constant_series("X", Phase.A, 3, -1, 0, np.nan))


def test_moments_drop_incomplete_rows():
    s = constant_series("X", Phase.B, 4, [-100, np.nan, -100, -100], 0, [100, 100, np.nan, 100])
    assert moments(s).n_samples == 2


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_moments_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    n = 50
    s = constant_series("X", Phase.A, n, -rng.uniform(100, 900, n), -rng.uniform(0, 300, n), rng.uniform(220, 240, n))
    perm = rng.permutation(n)
    rows = [HEADER] + [f"{int(s.timestamp[k])},X,A,{float(s.p[k])!r},{float(s.q[k])!r},{float(s.v[k])!r}\n" for k in perm]
    shuffled = ingest_csv(io.StringIO("".join(rows))).get("X", "A")
    a, b = moments(s), moments(shuffled)
    assert a.n_samples == b.n_samples
    for f in ("mean_v", "mean_i", "mean_phi", "mean_i_sq"):
        assert getattr(a, f) == pytest.approx(getattr(b, f), rel=1e-12)


def test_ingest_three_rows():
    ms = ingest_csv(csv_bytes("1,L09,A,-1,0,230", "2,L09,A,-1,0,230", "3,L09,A,-1,0,230"))
    assert len(ms) == 1 and len(ms.get("L09", "A")) == 3
    assert ms.report.skipped == 0


def test_ingest_nan_voltage_is_missing():
    ms = ingest_csv(csv_bytes("1,L09,A,-1,0,NaN", "2,L09,A,-1,0,230"))
    assert ms.report.missing_v == 1
    assert np.isnan(ms.get("L09", "A").v[0])


def test_ingest_duplicate_keeps_first():
    ms = ingest_csv(csv_bytes("1,L09,A,-1,0,230", "1,L09,A,-5,0,231"))
    assert ms.report.skipped == 1 and ms.report.duplicates == 1
    assert ms.get("L09", "A").p.tolist() == [-1.0]


def test_ingest_skips_malformed_rows():
    ms = ingest_csv(csv_bytes(
        "1,L09,A,-1,0,230",
        "2,L09,D,-1,0,230",        # bad phase
        "3,L09,A,1'000,0,230",     # thousands separator
        "x,L09,A,-1,0,230",        # bad timestamp
        "5,L09,A,-1,0,-3",         # non-positive voltage
        "6,L09,A,-1,,230",         # missing q is fine
    ))
    assert ms.report.malformed == 4
    assert ms.report.missing_q == 1
    assert len(ms.get("L09", "A")) == 2


def test_ingest_iso_timestamps_and_sorting():
    ms = ingest_csv(csv_bytes("2018-05-01T00:02:30Z,L01,b,-1,0,230", "2018-05-01T00:00:00Z,L01,B,-2,0,230"))
    s = ms.get("L01", Phase.B)
    assert s.timestamp.tolist() == [1525132800.0, 1525132950.0]
    assert s.p.tolist() == [-2.0, -1.0]


def test_ingest_errors():
    with pytest.raises(EmptyInput):
        ingest_csv(csv_bytes())
    with pytest.raises(EmptyInput):
        ingest_csv(csv_bytes("x,L,A,1,1,1"))
    with pytest.raises(UnreadableStream):
        ingest_csv(io.BytesIO(b"a,b\n1,2\n"))
    with pytest.raises(UnreadableStream):
        ingest_csv(io.BytesIO(b"\xff\xfe\x00garbage"))


def test_csv_round_trip():
    rng = np.random.default_rng(1)
    a = constant_series("N1", Phase.A, 5, rng.normal(size=5), rng.normal(size=5), 230 + rng.normal(size=5))
    a.v[2] = np.nan
    b = constant_series("N2", Phase.C, 3, -1.5, 0.25, 229.75, t0=7)
    buf = io.StringIO()
    write_csv(measurement_set(a, b), buf)
    back = ingest_csv(io.StringIO(buf.getvalue()))
    for s in (a, b):
        r = back.get(s.node, s.phase)
        np.testing.assert_array_equal(r.timestamp, s.timestamp)
        np.testing.assert_array_equal(r.p, s.p)
        np.testing.assert_array_equal(r.v, s.v)
