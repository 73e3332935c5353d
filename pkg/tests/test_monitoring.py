import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dstsd.anomaly import build_spline_basis
from dstsd.metamodels import ConvLSTM, ConvWaveNet
from dstsd.monitoring import (CalibrationError, MonitoringRecord, RunRecord, StreamSetup,
                              arl_estimate, buffer_window_sweep, calibrate_control_limit,
                              hotelling_monitor, hotelling_t2, lrt_statistic, monitor_stream,
                              otsu_support, otsu_threshold, relabel, residual_monitor,
                              support_from_field, write_monitoring_csv)


# ---------------------------------------------------------------- statistics


def test_lrt_examples():
    B = np.eye(3)
    assert lrt_statistic([1.0, 0, 0], [2.0, 0, 0], B) == 3.0  # 4 - 1
    assert lrt_statistic([0.0, 0, 0], [5.0, 1, 1], B) == 0.0
    # theta equal to the projection of r gives ||B theta||^2
    assert lrt_statistic([1.0, -2.0, 0], [1.0, -2.0, 0], B) == 5.0
    with pytest.raises(ValueError):
        lrt_statistic([1.0, 0], [1.0, 0, 0], B)


def test_support_from_field():
    assert support_from_field(np.array([0.0, 0.2, 1.0, -0.8, 0.4])) == (2, 3)
    assert support_from_field(np.zeros(4)) == ()


def between_class(v, cut):
    a, b = v[v <= cut], v[v > cut]
    if a.size == 0 or b.size == 0:
        return 0.0
    return a.size * b.size * (a.mean() - b.mean()) ** 2


def exhaustive_otsu(v, bins=256):
    """Best between-class score over all histogram edges, by direct split."""
    edges = np.histogram_bin_edges(v, bins=bins)
    return max(between_class(v, e) for e in edges[1:-1])


@given(arrays(np.float64, st.integers(2, 60), elements=st.floats(-50, 50)))
@settings(max_examples=60, deadline=None)
def test_otsu_matches_exhaustive_search(v):
    if v.min() == v.max():
        assert otsu_threshold(v) == v.min()
        return
    # ties between equally good edges are common, so compare the achieved score
    best = exhaustive_otsu(v)
    assert between_class(v, otsu_threshold(v)) >= best * (1 - 1e-9) - 1e-9


def test_otsu_separates_two_clusters(rng):
    v = np.concatenate([rng.normal(0, 0.1, 200), rng.normal(5, 0.1, 10)])
    thr = otsu_threshold(v)
    assert v[:200].max() <= thr < v[200:].min()
    r = np.zeros(50)
    r[[7, 8, 9]] = [3.0, -3.2, 2.9]
    r += rng.normal(0, 0.05, 50)
    assert otsu_support(r) == (7, 8, 9)


@given(arrays(np.float64, st.integers(3, 40), elements=st.floats(-10, 10)), st.floats(-100, 100))
@settings(max_examples=40, deadline=None)
def test_otsu_is_shift_equivariant(v, c):
    if v.max() - v.min() < 1e-3:
        return
    assert otsu_threshold(v + c) == pytest.approx(otsu_threshold(v) + c, abs=1e-6)


def test_hotelling_constant_and_chi2(rng):
    stats, _ = hotelling_t2(np.ones((30, 4)), 10)
    assert np.all(stats == 0.0)
    p = 20
    y = np.cumsum(rng.normal(size=(4000, p)), axis=0)  # differences are iid N(0, 1)
    stats, _ = hotelling_t2(y, 2000)
    assert stats[2001:].mean() == pytest.approx(p, rel=0.05)
    y[3000, 5] += 30.0
    stats, z = hotelling_t2(y, 2000)
    assert int(np.argmax(stats)) in (3000, 3001)
    assert np.argmax(np.abs(z[3000])) == 5
    with pytest.raises(ValueError):
        hotelling_t2(y, 1)


# ---------------------------------------------------------------- run lengths


@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(0, 10)), st.floats(-1, 11))
@settings(max_examples=80, deadline=None)
def test_run_length_matches_linear_scan(s, L):
    rl, cens = RunRecord.of(s).run_length(L)
    hits = np.nonzero(s > L)[0]
    if hits.size:
        assert (rl, cens) == (hits[0] + 1, False)
    else:
        assert (rl, cens) == (s.size, True)


def test_arl_estimate_example():
    recs = [RunRecord.of([0, 0, 5]), RunRecord.of([0, 0, 0, 0])]
    arl, se = arl_estimate(recs, 1.0)
    assert arl == 7.0  # 3 + 4 frames observed, one alarm
    assert arl_estimate(recs, 10.0)[0] == math.inf


def test_calibration_hits_target_and_is_monotone(rng):
    streams = [rng.exponential(size=500) for _ in range(400)]
    limits = [calibrate_control_limit(streams, t) for t in (20, 50, 100)]
    for lim in limits:
        assert abs(lim.arl - lim.target) <= 0.02 * lim.target
    assert limits[0].L < limits[1].L < limits[2].L
    assert limits[0].se < limits[2].se


def test_calibration_edge_cases(rng):
    streams = [rng.normal(size=50) for _ in range(5)]
    low = calibrate_control_limit(streams, 1.0)
    assert all(RunRecord.of(s).run_length(low.L) == (1, False) for s in streams)
    with pytest.raises(CalibrationError):
        calibrate_control_limit(streams, 1e6)
    with pytest.raises(CalibrationError):
        calibrate_control_limit([[]], 10)
    with pytest.raises(ValueError):
        calibrate_control_limit(lambda g: g.normal(size=5), 10)


# ---------------------------------------------------------------- stream monitors


def stream(rng, p=12, n=40, warmup=8, bump=None):
    y = rng.normal(0, 0.1, size=(n, p))
    if bump is not None:
        y[bump, 4:7] += 3.0
    return StreamSetup(y, np.zeros((n, p)), warmup)


@pytest.fixture
def lstm():
    return ConvLSTM(hidden=3, kernel=5, head_channels=2, seed=0)


def test_setup_validation():
    with pytest.raises(ValueError):
        StreamSetup(np.zeros((10, 3)), np.zeros((10, 4)))
    with pytest.raises(ValueError):
        StreamSetup(np.zeros((5, 3)), np.zeros((5, 3)), warmup=8)


def test_alarms_shrink_as_limit_grows(rng, lstm):
    s = stream(rng, bump=20)
    basis = build_spline_basis(12, 6)
    recs = monitor_stream(s, lstm, basis, math.inf, (0, 1), gamma=0.05, step=0.05)
    assert [r.t for r in recs] == list(range(8, 39))
    assert not any(r.alarm for r in recs)
    stats = np.array([r.stat for r in recs])
    counts = [sum(r.alarm for r in relabel(recs, L)) for L in np.linspace(0, stats.max(), 8)]
    assert counts == sorted(counts, reverse=True)
    top = relabel(recs, 0.5 * stats.max())
    fired = [r for r in top if r.alarm]
    assert fired and all(r.w_used in (0, 1) and r.support for r in fired)


def test_huge_gamma_never_alarms(rng, lstm):
    s = stream(rng, bump=20)
    recs = monitor_stream(s, lstm, build_spline_basis(12, 6), 0.0, (0,), gamma=1e9)
    assert all(r.stat == 0.0 and not r.alarm for r in recs)


def test_statistic_path_is_limit_free(rng, lstm):
    s = stream(rng, bump=15)
    basis = build_spline_basis(12, 6)
    a = monitor_stream(s, lstm, basis, math.inf, (1,), gamma=0.05, step=0.05)
    b = monitor_stream(s, lstm, basis, 0.1, (1,), gamma=0.05, step=0.05)
    assert [r.stat for r in a] == [r.stat for r in b]
    assert [r.alarm for r in relabel(a, 0.1)] == [r.alarm for r in b]


def test_zero_width_sweep_needs_exceedance(rng, lstm):
    s = stream(rng, bump=20)
    basis = build_spline_basis(12, 6)
    carry = lstm.start(s.y[0])
    for j in range(19):
        carry, _ = lstm.step(carry, s.y[j], s.stim[j + 1])
    hit = buffer_window_sweep(s, 20, carry, s.y[19], lstm, basis, 1e-3, 0, gamma=0.05, step=0.05)
    assert hit is not None and hit[0] == 0
    assert buffer_window_sweep(s, 20, carry, s.y[19], lstm, basis, 1e9, 2, gamma=0.05,
                               step=0.05) is None


def test_residual_and_hotelling_flag_the_bump(rng, lstm):
    s = stream(rng, n=60, bump=40)
    res = residual_monitor(s, lstm)
    hot = hotelling_monitor(s)
    assert len(res) == len(hot) == 52
    assert max(hot, key=lambda r: r.stat).t in (40, 41)
    flagged = hotelling_monitor(s, L=hot[40 - 8].stat - 1e-9)
    assert set(flagged[40 - 8].support) >= {4, 5, 6}


def test_record_relabel_and_csv(tmp_path):
    r = MonitoringRecord(50, 7.0, False, (), -1, ((0, 2.0, (1,)), (2, 7.0, (3, 4))))
    assert r.under(1.0).w_used == 0 and r.under(1.0).support == (1,)
    assert r.under(5.0).w_used == 2
    assert not r.under(7.0).alarm
    write_monitoring_csv(tmp_path / "m.csv", [r.under(5.0), r.under(9.0)])
    with open(tmp_path / "m.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows == [["t", "T_t", "alarm", "w_used", "support"],
                    ["50", "7.0", "1", "2", "3;4"], ["50", "7.0", "0", "-1", ""]]


def test_without_buffer_a_small_step_change_is_never_caught():
    # g = 0 and identity basis: an anomaly in frame 20 leaves a permanent shift.
    # Each single frame carries too little evidence to leave the origin under
    # the prox threshold; a 3-frame window pools enough of it.
    p, n = 6, 40
    model = ConvWaveNet(depth=1, channels=1, kernel=3, seed=0)
    model.zero_()
    y = np.zeros((n, p))
    y[20:, 2] = 1.0
    s = StreamSetup(y, np.zeros((n, p)), warmup=8)
    basis = build_spline_basis(p, p, identity=True)
    kw = dict(gamma=1.0, step=0.1, epochs=5)
    blind = monitor_stream(s, model, basis, 0.0, (0,), **kw)
    assert not any(r.alarm for r in blind)
    buffered = monitor_stream(s, model, basis, 0.0, (2,), **kw)
    fired = [r for r in buffered if r.alarm]
    assert fired[0].t == 20 and fired[0].support == (2,)
