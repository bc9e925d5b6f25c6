import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pdvfs.errors import ModelError, ParameterError
from pdvfs.perfmodel import (FULL_AXES, BatchFeatures, FrequencyLadder, IdlePowerModel, LatencyTable, PowerTable,
                             load_models, predict_idle_power, predict_latency, predict_power, synth_latency,
                             synth_model, synth_model_set, save_models, validate_model, DEFAULT_PARAMS)

FREQS = np.array([1000.0, 1500.0, 2000.0])


def freq_table(values, cls=LatencyTable, freqs=FREQS):
    """A table that depends only on frequency (every other axis has one knot)."""
    v = np.asarray(values, dtype=float).reshape(1, 1, 1, -1)
    return cls("prefill", FULL_AXES, ([100.0], [1.0], [1.0], freqs), v)


def feats(total=100, n=1):
    return BatchFeatures(n, total, total / n, 0.0)


def test_batch_features_from_lengths():
    f = BatchFeatures.from_lengths([1, 3])
    assert (f.n_requests, f.sum_len, f.mean_len, f.std_len) == (2, 4, 2.0, 1.0)
    with pytest.raises(ParameterError):
        BatchFeatures.from_lengths([])


def test_ladder_subset_keeps_ends():
    lad = FrequencyLadder((990, 1100, 1200, 1300, 1400, 1500, 1600, 1700))
    sub = lad.subset(3)
    assert sub.freqs_mhz[0] == 990 and sub.freqs_mhz[-1] == 1700 and len(sub) == 3
    assert lad.subset(100) == lad and lad.subset(1).freqs_mhz == (1700.0,)
    assert 1200 in lad and 1250 not in lad


def test_knot_query_returns_stored_value():
    t = freq_table([30.0, 20.0, 10.0])
    for f, v in zip(FREQS, [30.0, 20.0, 10.0]):
        assert predict_latency(t, feats(), 1, f) == v


def test_midpoint_is_linear():
    t = freq_table([20.0, 10.0, 5.0])
    assert predict_latency(t, feats(), 1, 1250.0) == pytest.approx(15.0)
    p = freq_table([100.0, 200.0, 300.0], PowerTable)
    assert predict_power(p, feats(), 1, 1250.0) == pytest.approx(150.0)


def test_out_of_range_clamps_and_counts():
    t = freq_table([30.0, 20.0, 10.0])
    assert predict_latency(t, feats(), 1, 5000.0) == 10.0
    assert predict_latency(t, feats(), 1, 10.0) == 30.0
    assert t.clamp_count >= 2


def test_dense_inverse_frequency_table():
    freqs = np.linspace(800, 2000, 61)
    t = freq_table(5e4 / freqs, freqs=freqs)
    for f in np.random.default_rng(0).uniform(800, 2000, 200):
        assert predict_latency(t, feats(), 1, f) == pytest.approx(5e4 / f, rel=0.01)


@given(st.floats(1, 1e6), st.floats(1, 4096), st.floats(1, 4), st.floats(990, 1980))
def test_multilinear_reproduces_multilinear_function(s, n, tp, f):
    # an affine function of each axis separately is interpolated exactly
    knots = ([1.0, 1e6], [1.0, 4096.0], [1.0, 2.0, 4.0], [990.0, 1485.0, 1980.0])
    g = lambda S, N, T, F: 1 + 2e-4 * S + 3e-3 * N + 0.5 * T - 1e-3 * F + 1e-9 * S * F
    grid = np.array(np.meshgrid(*knots, indexing="ij"))
    table = LatencyTable("decode", FULL_AXES, knots, g(*grid))
    x = BatchFeatures(int(n), int(s), s / max(int(n), 1), 0.0)
    assert table.predict(x, tp, f) == pytest.approx(g(int(s), int(n), tp, f), rel=1e-9)


def test_idle_power_lookup():
    m = IdlePowerModel({1: np.array([1000.0, 2000.0])}, {1: np.array([40.0, 60.0])})
    assert predict_idle_power(m, 1, 1000.0) == 40.0
    assert predict_idle_power(m, 1, 1500.0) == pytest.approx(50.0)
    with pytest.raises(ModelError):
        predict_idle_power(m, 2, 1500.0)


def test_power_monotone_in_freq_on_random_points(models):
    rng = np.random.default_rng(1)
    for _ in range(1000):
        x = BatchFeatures(int(rng.integers(1, 300)), int(rng.integers(1, 200_000)), 1.0, 0.0)
        tp = int(rng.choice([1, 2]))
        fa, fb = sorted(rng.uniform(990, 1980, 2))
        for ph in (models.prefill, models.decode):
            assert ph.power_w(x, tp, fa) <= ph.power_w(x, tp, fb)
            assert ph.idle_w(tp, fa) <= ph.power_w(x, tp, fa)


def test_validate_monotone_table_is_clean(models):
    for ph in (models.prefill, models.decode):
        assert validate_model(ph.latency) == [] and validate_model(ph.power) == []


def test_validate_reports_inverted_pair():
    t = freq_table([30.0, 20.0, 25.0])
    v = validate_model(t)
    assert len(v) == 1 and v[0].kind == "monotonicity" and v[0].index == (0, 0, 0, 2)


def test_validate_reports_nonpositive_and_structure():
    assert [x.kind for x in validate_model(freq_table([30.0, 0.0, -1.0]))].count("positivity") == 2
    empty = LatencyTable("prefill", FULL_AXES, ([], [1.0], [1.0], FREQS), np.zeros((0, 1, 1, 3)))
    assert validate_model(empty)[0].kind == "structure"


def test_compute_bound_halves_with_double_freq(ladder):
    lat, _, _ = synth_model("compute-bound", FrequencyLadder((990.0, 1980.0)), [1])
    x = feats(1000)
    assert lat.predict(x, 1, 990.0) == pytest.approx(2 * lat.predict(x, 1, 1980.0), rel=1e-12)


def test_memory_bound_flat_above_knee():
    p = DEFAULT_PARAMS["decode"]
    a = synth_latency("memory-bound", p, 5000, 1, 1300.0)
    b = synth_latency("memory-bound", p, 5000, 1, 1900.0)
    assert abs(a - b) <= 1e-9
    assert synth_latency("memory-bound", p, 5000, 1, 1000.0) > a


def test_unknown_family():
    with pytest.raises(ParameterError):
        synth_latency("disk-bound", DEFAULT_PARAMS["decode"], 1, 1, 1000.0)


def test_model_file_roundtrip(tmp_path, models):
    p = tmp_path / "m.json"
    save_models(models, p)
    back = load_models(p)
    assert back.digest() == models.digest()
    x = feats(777, 3)
    for f in (990.0, 1234.5, 1980.0):
        assert back.decode.latency_ms(x, 2, f) == models.decode.latency_ms(x, 2, f)


def test_tp_scaling_is_sublinear(ladder):
    ms = synth_model_set(ladder, [1, 2, 4])
    x = feats(4000)
    l1, l2, l4 = (ms.prefill.latency_ms(x, tp, 1980.0) for tp in (1, 2, 4))
    assert l1 > l2 > l4 > l1 / 4
    assert not math.isnan(l4)
