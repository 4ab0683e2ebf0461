import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from edgescale.series import (EventLog, MinMaxScaler, SimConfig, TargetStats, TimeSeries,
                              adjustment_factor, count_per_window, cubic_spline_interpolate,
                              ingest_event_log, load_series, match_statistics, minmax_normalize,
                              save_series, simulate_iot_load, synthetic_base, train_test_split)


def natural_spline_oracle(xs, ys, q):
    """Textbook natural cubic spline: solve the tridiagonal system for second derivatives."""
    n = len(xs)
    h = np.diff(xs)
    A = np.zeros((n, n))
    r = np.zeros(n)
    A[0, 0] = A[-1, -1] = 1.0
    for i in range(1, n - 1):
        A[i, i - 1] = h[i - 1]
        A[i, i] = 2 * (h[i - 1] + h[i])
        A[i, i + 1] = h[i]
        r[i] = 6 * ((ys[i + 1] - ys[i]) / h[i] - (ys[i] - ys[i - 1]) / h[i - 1])
    M = np.linalg.solve(A, r)
    k = min(max(np.searchsorted(xs, q) - 1, 0), n - 2)
    a, b = xs[k], xs[k + 1]
    hk = b - a
    return (M[k] * (b - q) ** 3 / (6 * hk) + M[k + 1] * (q - a) ** 3 / (6 * hk)
            + (ys[k] / hk - M[k] * hk / 6) * (b - q) + (ys[k + 1] / hk - M[k + 1] * hk / 6) * (q - a))


# ---- ingestion ----------------------------------------------------------

def test_event_log_sorted(tmp_path):
    p = tmp_path / "ev.csv"
    p.write_text("10\n5\n20\n")
    assert list(ingest_event_log(p).timestamps) == [5, 10, 20]


def test_event_log_empty(tmp_path):
    p = tmp_path / "ev.csv"
    p.write_text("")
    with pytest.raises(ValueError, match="no events"):
        ingest_event_log(p)


def test_event_log_header_and_iso(tmp_path):
    p = tmp_path / "ev.csv"
    p.write_text("pickup_time,fare\n2016-01-01T00:01:00,3\n2016-01-01T00:00:00,4\n")
    log = ingest_event_log(p)
    assert len(log) == 2
    assert log.timestamps[1] - log.timestamps[0] == 60


def test_event_log_bad_line_named(tmp_path):
    p = tmp_path / "ev.csv"
    p.write_text("1\n2\nbanana\n")
    with pytest.raises(ValueError, match="line 3"):
        ingest_event_log(p)


def test_event_log_large_cardinality(tmp_path):
    rng = np.random.default_rng(0)
    n = 200_000
    p = tmp_path / "big.csv"
    np.savetxt(p, rng.integers(0, 10**9, n), fmt="%d")
    with open(p) as fh:
        lines = sum(1 for _ in fh)
    assert len(ingest_event_log(p)) == lines == n


# ---- windowing ----------------------------------------------------------

def test_count_per_window_hand():
    s = count_per_window(EventLog([0, 10, 70, 130, 140, 150]), 60)
    assert list(s.values) == [2, 1, 3]


def test_count_single():
    assert list(count_per_window(EventLog([42.0]), 60).values) == [1]


def test_count_conservation():
    rng = np.random.default_rng(3)
    s = count_per_window(EventLog(rng.uniform(0, 600, 1000)), 60)
    assert s.values.sum() == 1000
    assert len(s) <= 11


@settings(max_examples=50, deadline=None)
@given(arrays(float, st.integers(1, 200), elements=st.floats(0, 1e5)), st.sampled_from([1.0, 7.0, 60.0]))
def test_count_conservation_property(ts, rate):
    assert count_per_window(EventLog(ts), rate).values.sum() == ts.size


# ---- spline -------------------------------------------------------------

def test_spline_linear():
    xs = np.arange(5.0)
    assert cubic_spline_interpolate(xs, 2 * xs, [1.5])[0] == pytest.approx(3.0, abs=1e-12)


def test_spline_knot_exact():
    xs = np.array([0.0, 1.0, 2.5, 4.0])
    ys = np.array([3.0, -1.0, 7.25, 2.0])
    assert np.array_equal(cubic_spline_interpolate(xs, ys, xs), ys)


def test_spline_matches_tridiagonal_oracle():
    xs = np.linspace(0, 3, 7)
    ys = xs ** 3
    for q in (1.5, 0.1, 2.9, 0.75):
        assert cubic_spline_interpolate(xs, ys, [q])[0] == pytest.approx(natural_spline_oracle(xs, ys, q), abs=1e-9)


def test_spline_errors():
    with pytest.raises(ValueError):
        cubic_spline_interpolate([0, 1, 1], [0, 1, 2], [0.5])
    with pytest.raises(ValueError):
        cubic_spline_interpolate([0, 1, 2], [0, 1, 2], [3.0])


# ---- simulated load -----------------------------------------------------

def test_adjustment_factor():
    assert adjustment_factor(300, 60, 1.0) == pytest.approx(5.0)
    assert adjustment_factor(300, 300, 2.0) == pytest.approx(2.0)


def test_simulate_constant_noiseless():
    base = TimeSeries(0, 300, np.full(20, 100.0))
    out = simulate_iot_load(base, SimConfig(300, noise_fraction=0.0, seed=1))
    assert np.all(out.values == 100)


def test_simulate_noise_bound():
    base = synthetic_base(n=100)
    cfg = SimConfig(120, noise_fraction=0.10, seed=5)
    raw = simulate_iot_load(base, cfg, cast=False)
    clean = simulate_iot_load(base, SimConfig(120, noise_fraction=0.0, seed=5), cast=False)
    assert np.all(np.abs(raw.values - clean.values) <= 0.10 * np.abs(clean.values) + 1e-12)
    assert len(raw) > len(base)


def test_simulate_deterministic():
    base = synthetic_base(n=100)
    a = simulate_iot_load(base, SimConfig(60, seed=9))
    b = simulate_iot_load(base, SimConfig(60, seed=9))
    assert np.array_equal(a.values, b.values)


def test_simulate_outputs_nonnegative_integers():
    base = TimeSeries(0, 300, np.array([0.0, 1.0, 0.0, 2.0, 0.0]))
    out = simulate_iot_load(base, SimConfig(60, seed=0))
    assert np.all(out.values >= 0)
    assert np.all(out.values == np.round(out.values))


# ---- statistics matching ------------------------------------------------

def test_match_hand_oracle():
    out = match_statistics(TimeSeries(0, 60, np.array([1.0, 2.0, 3.0])), TargetStats(10, 2))
    z = np.sqrt(1.5)
    np.testing.assert_allclose(out.values, [10 - 2 * z, 10, 10 + 2 * z], atol=1e-9)
    assert out.values[0] == pytest.approx(7.5505, abs=1e-4)


def test_match_identity():
    v = np.random.default_rng(0).normal(5, 3, 50)
    out = match_statistics(TimeSeries(0, 60, v), TargetStats(v.mean(), v.std()))
    np.testing.assert_allclose(out.values, v, atol=1e-9)


def test_match_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        match_statistics(TimeSeries(0, 60, np.ones(5)), TargetStats(0, 1))


@settings(max_examples=100, deadline=None)
@given(arrays(float, st.integers(3, 100), elements=st.floats(-1e4, 1e4)),
       st.floats(-1e3, 1e3), st.floats(0.01, 1e3))
def test_match_postcondition(v, mu, sigma):
    if v.std() < 1e-6 * max(1.0, np.abs(v).max()):
        return
    out = match_statistics(TimeSeries(0, 60, v), TargetStats(mu, sigma)).values
    assert abs(out.mean() - mu) <= 1e-9 * max(1.0, abs(mu), sigma)
    assert abs(out.std() - sigma) <= 1e-9 * max(1.0, sigma)


# ---- split / normalization ---------------------------------------------

@pytest.mark.parametrize("n,frac,expect", [(10, 0.8, (8, 2)), (2, 0.5, (1, 1)), (30, 0.8, (24, 6))])
def test_split_lengths(n, frac, expect):
    tr, te = train_test_split(TimeSeries(0, 60, np.arange(n, dtype=float)), frac)
    assert (len(tr), len(te)) == expect
    assert te.t0 == tr.t0 + len(tr) * 60


def test_split_empty_part():
    with pytest.raises(ValueError):
        train_test_split(TimeSeries(0, 60, np.arange(3.0)), 0.1)


def test_minmax():
    s, sc = minmax_normalize(TimeSeries(0, 60, np.array([0.0, 5.0, 10.0])))
    assert list(s.values) == [0, 0.5, 1]
    v = np.random.default_rng(1).normal(size=30)
    sc = MinMaxScaler.fit(v)
    np.testing.assert_allclose(sc.inverse(sc.transform(v)), v, atol=1e-12)


def test_minmax_train_only():
    ramp = TimeSeries(0, 60, np.arange(100.0))
    tr, te = train_test_split(ramp, 0.8)
    sc = MinMaxScaler.fit(tr.values)
    assert sc.transform(te.values).max() > 1.0


def test_minmax_constant():
    with pytest.raises(ValueError):
        MinMaxScaler.fit(np.ones(4))
    sc = MinMaxScaler.fit(np.full(4, 5.0), allow_constant=True)
    assert np.all(sc.transform(np.full(4, 5.0)) == 0)


def test_save_load_roundtrip(tmp_path):
    s = simulate_iot_load(synthetic_base(n=50), SimConfig(120, seed=2))
    save_series(s, tmp_path / "s.csv")
    back = load_series(tmp_path / "s.csv")
    assert np.array_equal(back.values, s.values)
    assert back.sampling_rate == s.sampling_rate and back.t0 == s.t0
