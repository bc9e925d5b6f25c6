import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pdvfs.errors import ParameterError
from pdvfs.workload import (LengthDistribution, Request, Trace, downsample_trace, gen_gamma_trace, join_windows,
                            load_trace, log_window_grid, make_trace, peak_rps, predict_next_window, save_trace,
                            scale_to_rate, split_windows, time_dilate, variance_time_curve, window_counts)

FIXED = LengthDistribution.fixed(100, 10)

arrival_lists = st.lists(st.floats(0, 50_000, allow_nan=False), min_size=0, max_size=60).map(sorted)


def trace_from(arrivals, duration=None):
    return make_trace(arrivals, [(10, 5)] * len(arrivals), duration_ms=duration)


def test_request_validation():
    with pytest.raises(ParameterError):
        Request(0, -1.0, 10, 10)
    with pytest.raises(ParameterError):
        Request(0, 0.0, 0, 10)


def test_trace_rejects_unsorted_and_duplicates():
    with pytest.raises(ParameterError):
        Trace((Request(0, 5.0, 1, 1), Request(1, 1.0, 1, 1)), 10.0)
    with pytest.raises(ParameterError):
        Trace((Request(0, 1.0, 1, 1), Request(0, 2.0, 1, 1)), 10.0)
    with pytest.raises(ParameterError):
        Trace((Request(0, 20.0, 1, 1),), 10.0)


@pytest.mark.parametrize("bad", [dict(mean_rps=0), dict(shape=0), dict(duration_ms=-1)])
def test_gamma_rejects_nonpositive(bad):
    kw = dict(mean_rps=1.0, shape=0.5, duration_ms=1000.0, lengths=FIXED, seed=0) | bad
    with pytest.raises(ParameterError):
        gen_gamma_trace(**kw)


@pytest.mark.parametrize("shape", [0.5, 1.0, 4.0])
def test_gamma_rate_matches_request(shape):
    t = gen_gamma_trace(10.0, shape, 2_000_000, FIXED, seed=1)
    assert t.mean_rps == pytest.approx(10.0, rel=0.05)
    assert all(r.arrival < 2_000_000 for r in t.requests)


def test_gamma_shape_controls_burstiness():
    # renewal process: squared CV of gaps is 1/shape
    for shape in (0.5, 1.0, 2.0):
        gaps = np.diff(gen_gamma_trace(20.0, shape, 3_000_000, FIXED, seed=2).arrivals)
        cv2 = gaps.var() / gaps.mean() ** 2
        assert cv2 == pytest.approx(1 / shape, rel=0.1)


def test_gamma_deterministic():
    a = gen_gamma_trace(5.0, 0.5, 60_000, LengthDistribution(), seed=3)
    b = gen_gamma_trace(5.0, 0.5, 60_000, LengthDistribution(), seed=3)
    assert a == b
    assert a != gen_gamma_trace(5.0, 0.5, 60_000, LengthDistribution(), seed=4)


def test_length_caps_and_samples(tmp_path):
    rng = np.random.default_rng(0)
    inp, out = LengthDistribution(max_input=300, max_output=50).sample(rng, 1000)
    assert inp.max() <= 300 and out.max() <= 50 and inp.min() >= 1
    p = tmp_path / "lens.csv"
    p.write_text("input_len,output_len\n7,3\n9,4\n")
    inp, out = LengthDistribution.from_file(p).sample(rng, 200)
    assert set(zip(inp.tolist(), out.tolist())) <= {(7, 3), (9, 4)}


@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0), st.integers(0, 1000))
def test_downsample_nested(p1, p2, seed):
    t = gen_gamma_trace(20.0, 0.5, 20_000, FIXED, seed=11)
    lo, hi = sorted((p1, p2))
    small = {r.id for r in downsample_trace(t, lo, seed).requests}
    big = {r.id for r in downsample_trace(t, hi, seed).requests}
    assert small <= big


def test_downsample_identity_and_errors(small_trace):
    assert downsample_trace(small_trace, 1.0, 0) is small_trace
    for p in (0.0, 1.5):
        with pytest.raises(ParameterError):
            downsample_trace(small_trace, p, 0)


def test_downsample_rate():
    t = gen_gamma_trace(50.0, 1.0, 200_000, FIXED, seed=5)
    assert len(downsample_trace(t, 0.3, 9).requests) == pytest.approx(0.3 * len(t.requests), rel=0.05)


def test_time_dilate_and_scale(small_trace):
    d = time_dilate(small_trace, 2.0)
    assert d.duration_ms == 2 * small_trace.duration_ms
    assert d.mean_rps == pytest.approx(small_trace.mean_rps / 2)
    assert scale_to_rate(small_trace, 12.0).mean_rps == pytest.approx(12.0)


@given(arrival_lists, st.floats(100, 20_000))
def test_split_join_roundtrip(arrivals, window):
    t = trace_from(arrivals, duration=max(arrivals, default=0.0) + 1.0)
    wins = split_windows(t, window)
    assert sum(len(w.requests) for w in wins) == len(t.requests)
    for w in wins:
        assert all(0 <= r.arrival < window for r in w.requests)
    back = join_windows(wins, window)
    assert [r.id for r in back.requests] == [r.id for r in t.requests]
    assert np.allclose(back.arrivals, t.arrivals, rtol=0, atol=1e-6)


def test_split_boundary_goes_to_next_window():
    t = trace_from([0.0, 999.999, 1000.0], duration=1500.0)
    wins = split_windows(t, 1000.0)
    assert [len(w.requests) for w in wins] == [2, 1]
    assert wins[1].requests[0].arrival == 0.0


def test_predict_next_window_is_trailing_copy():
    t = trace_from([100.0, 1500.0, 2500.0], duration=3000.0)
    p = predict_next_window(t, 2000.0)
    assert p.duration_ms == 2000.0
    assert [r.arrival for r in p.requests] == [500.0, 1500.0]
    assert predict_next_window(t) == Trace(t.requests, t.duration_ms, t.seed)
    with pytest.raises(ParameterError):
        predict_next_window(trace_from([], duration=10.0))


@given(arrival_lists)
def test_peak_rps_brute_force(arrivals):
    t = trace_from(arrivals, duration=max(arrivals, default=0.0))
    best = 0
    for k in range(int(max(arrivals, default=0.0) // 10_000) + 1):
        best = max(best, sum(1 for a in arrivals if k * 10_000 <= a < (k + 1) * 10_000))
    assert peak_rps(t, 10.0) == best / 10.0


def test_window_counts_complete_only():
    t = trace_from([0.0, 500.0, 1200.0, 2500.0], duration=2600.0)
    assert window_counts(t, 1.0).tolist() == [2, 1]


def test_variance_time_periodic_is_zero():
    t = trace_from(np.arange(0, 100_000, 100.0), duration=100_000.0)
    curve = variance_time_curve(t, [0.1, 0.5, 1.0, 5.0, 10.0])
    assert all(v == pytest.approx(0.0, abs=1e-12) for v in curve.normalized_variance)


def test_variance_time_short_trace_is_nan():
    t = trace_from([0.0, 10.0], duration=1000.0)
    curve = variance_time_curve(t, [0.5, 1.0])
    assert math.isnan(curve.normalized_variance[1])
    with pytest.raises(ParameterError):
        variance_time_curve(t, [1.0, 0.5])


def test_log_window_grid():
    g = log_window_grid(0.1, 10_000, 4)
    assert len(g) == 21 and g[0] == pytest.approx(0.1) and g[-1] == pytest.approx(10_000)
    assert all(b > a for a, b in zip(g, g[1:]))


@pytest.mark.parametrize("suffix", [".csv", ".jsonl"])
def test_save_load_roundtrip(tmp_path, small_trace, suffix):
    p = tmp_path / f"t{suffix}"
    save_trace(small_trace, p)
    back = load_trace(p, duration_ms=small_trace.duration_ms)
    assert back.requests == small_trace.requests


def test_load_trace_missing_columns(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("arrival_ms,input_len\n1,2\n")
    with pytest.raises(ParameterError):
        load_trace(p)
