import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdvfs.dvfs import (DecodePolicyConfig, MpcConfig, PrefillMpcController, SafetyState, _Evaluator,
                        apply_safety_overrides, brute_force_select, decode_choice, greedy_freq_select, meets_slo,
                        on_arrival_trigger, project_batches, select_decode_freq, time_weighted_power)
from pdvfs.metrics import SLOSpec
from pdvfs.perfmodel import (FULL_AXES, BatchFeatures, FrequencyLadder, IdlePowerModel, LatencyTable,
                             PhaseModels, PowerTable, synth_model_set)
from pdvfs.simulator import (BatchMember, InstanceConfig, KVCacheState, QueueSnapshot, RunningBatch,
                             SchedulerPolicy, SimOptions, WaitingEntry, simulate_instance)
from pdvfs.workload import make_trace


def queue(lengths, arrivals=None, now=0.0, freq=1980.0, running=None):
    arrivals = arrivals or [0.0] * len(lengths)
    w = tuple(WaitingEntry(i, a, n, n) for i, (n, a) in enumerate(zip(lengths, arrivals)))
    return QueueSnapshot(now, w, running, freq)


def freq_only_models(freqs, lat, pw):
    """Phase models whose latency and power depend only on frequency."""
    freqs = np.asarray(freqs, dtype=float)
    shape = (1, 1, 1, len(freqs))
    knots = ([1.0], [1.0], [1.0], freqs)
    return PhaseModels(LatencyTable("prefill", FULL_AXES, knots, np.reshape(lat, shape)),
                       PowerTable("prefill", FULL_AXES, knots, np.reshape(pw, shape)),
                       IdlePowerModel({1: freqs}, {1: np.full(len(freqs), 10.0)}))


def test_projection_examples():
    pol = SchedulerPolicy(max_batch_tokens=100)
    assert len(project_batches(queue([]), pol, 8)) == 0
    p = project_batches(queue([50, 50, 50]), pol, 8)
    assert [(b.n_requests, b.sum_len) for b in p.batches] == [(2, 100), (1, 50)]
    feats = BatchFeatures.from_lengths([70])
    run = RunningBatch((BatchMember(9, 0.0, 70, True),), feats, 5.0, 0.4, 1980.0)
    p = project_batches(queue([], running=run), pol, 8)
    assert p.batches == (feats,) and p.fractions == (0.4,)


def test_projection_respects_horizon():
    p = project_batches(queue([50] * 20), SchedulerPolicy(max_batch_tokens=100), 3)
    assert len(p) == 3


def test_meets_slo_infinite_bound(cb_models):
    q = queue([4000] * 5)
    proj = project_batches(q, SchedulerPolicy(), 8)
    slo = SLOSpec(ttft_ms=math.inf)
    assert meets_slo([990.0] * len(proj), proj, q, cb_models.prefill, slo, 1)


def test_meets_slo_exact_bound():
    m = freq_only_models([1000.0, 2000.0], [900.0, 600.0], [100.0, 300.0])
    q = queue([10])
    proj = project_batches(q, SchedulerPolicy(), 8)
    assert meets_slo([2000.0], proj, q, m, SLOSpec(), 1)
    assert not meets_slo([1000.0], proj, q, m, SLOSpec(), 1)


def test_all_max_feasibility_matches_simulation(cb_models):
    rng = np.random.default_rng(4)
    pol = SchedulerPolicy(max_batch_tokens=2048)
    for _ in range(30):
        lens = rng.integers(50, 2000, size=int(rng.integers(1, 8))).tolist()
        q = queue(lens)
        proj = project_batches(q, pol, 64)
        slo = SLOSpec(ttft_ms=float(rng.uniform(50, 600)))
        pred = meets_slo([1980.0] * len(proj), proj, q, cb_models.prefill, slo, 1)
        t = make_trace([0.0] * len(lens), [(n, 1) for n in lens], duration_ms=0.0)
        sim = simulate_instance(t, InstanceConfig("prefill", 1, 1980.0), pol, cb_models)
        assert pred == all(r.ttft_ms <= slo.ttft_ms for r in sim.requests)


def test_one_rung_ladder(cb_models):
    cfg = MpcConfig(FrequencyLadder((1500.0,)), ladder_N=1)
    g = greedy_freq_select(queue([300, 300]), cfg, cb_models.prefill, SchedulerPolicy(), 1)
    assert set(g.assignment) == {1500.0}


def test_two_rung_ladder_picks_low_when_feasible():
    m = freq_only_models([1000.0, 2000.0], [100.0, 50.0], [100.0, 300.0])
    cfg = MpcConfig(FrequencyLadder((1000.0, 2000.0)), ladder_N=2, switch_latency_ms=0.0)
    g = greedy_freq_select(queue([10]), cfg, m, SchedulerPolicy(), 1)
    assert g.assignment == (1000.0,) and g.feasible


def test_infeasible_all_max_is_flagged(cb_models, ladder):
    cfg = MpcConfig(ladder, SLOSpec(ttft_ms=1.0))
    g = greedy_freq_select(queue([4000]), cfg, cb_models.prefill, SchedulerPolicy(), 1)
    assert not g.feasible and g.assignment == (1980.0,)


@settings(max_examples=40)
@given(st.lists(st.integers(20, 3000), min_size=1, max_size=6), st.integers(0, 10_000),
       st.sampled_from([0.0, 30.0]), st.floats(100, 900))
def test_greedy_between_optimum_and_all_max(lengths, seed, switch, ttft):
    lad = FrequencyLadder((990.0, 1485.0, 1980.0))
    m = synth_model_set(lad, [1], "compute-bound", "compute-bound").prefill
    rng = np.random.default_rng(seed)
    q = queue(lengths, sorted((-rng.uniform(0, 300, len(lengths))).tolist()))
    cfg = MpcConfig(lad, SLOSpec(ttft_ms=ttft), horizon_K=4, ladder_N=3, switch_latency_ms=switch)
    pol = SchedulerPolicy(max_batch_tokens=1024)
    g = greedy_freq_select(q, cfg, m, pol, 1)
    b = brute_force_select(q, cfg, m, pol, 1)
    proj = project_batches(q, pol, 4)
    top = [1980.0] * len(proj)
    all_max_ok = meets_slo(top, proj, q, m, cfg.slo, 1, switch, cfg.latency_margin)
    assert g.feasible == all_max_ok == b.feasible
    if all_max_ok:
        assert meets_slo(g.assignment, proj, q, m, cfg.slo, 1, switch, cfg.latency_margin)
        og = time_weighted_power(g.assignment, proj, m, 1)
        assert time_weighted_power(b.assignment, proj, m, 1) <= og <= time_weighted_power(top, proj, m, 1)
    assert all(c == 3 ** k - 1 for c, k in zip(g.mutation_counts, g.level_sizes))


@given(st.lists(st.integers(20, 3000), min_size=1, max_size=8), st.integers(0, 1000))
def test_vectorized_check_matches_scalar(lengths, seed):
    lad = FrequencyLadder((990.0, 1320.0, 1650.0, 1980.0))
    m = synth_model_set(lad, [1], "compute-bound", "compute-bound").prefill
    rng = np.random.default_rng(seed)
    q = queue(lengths, sorted((-rng.uniform(0, 500, len(lengths))).tolist()), freq=1650.0)
    proj = project_batches(q, SchedulerPolicy(max_batch_tokens=1500), 8)
    freqs = np.array(lad.freqs_mhz[::-1])
    ev = _Evaluator(proj, q, m, 1, freqs, SLOSpec(), 30.0, 0.05)
    idx = rng.integers(0, len(freqs), size=(20, len(proj)))
    feas, obj = ev(idx)
    for row, ok, o in zip(idx, feas, obj):
        a = [float(freqs[i]) for i in row]
        assert ok == meets_slo(a, proj, q, m, SLOSpec(), 1, 30.0, 0.05)
        assert o == pytest.approx(time_weighted_power(a, proj, m, 1), rel=1e-12)


def test_arrival_trigger_idempotent_and_burst_raises(cb_models, ladder):
    cfg = MpcConfig(ladder, switch_latency_ms=0.0)
    pol = SchedulerPolicy()
    calm = queue([200])
    a = on_arrival_trigger(calm, cfg, cb_models.prefill, pol, 1)
    assert on_arrival_trigger(calm, cfg, cb_models.prefill, pol, 1).assignment == a.assignment
    burst = queue([200] + [1500] * 12)
    b = on_arrival_trigger(burst, cfg, cb_models.prefill, pol, 1)
    assert b.assignment[0] > a.assignment[0]


def test_prefill_controller_logs_decisions(small_trace, models, ladder):
    ctl = PrefillMpcController(models.prefill, MpcConfig(ladder), SchedulerPolicy(), 1)
    sim = simulate_instance(small_trace, InstanceConfig("prefill", 1, 1980.0), SchedulerPolicy(), models,
                            controller=ctl, opts=SimOptions(max_freq_mhz=1980.0))
    assert ctl.decisions and {d.trigger for d in ctl.decisions} <= {"boundary", "arrival"}
    assert not [d for d in sim.decisions if d.trigger == "safety"]


# -- decode ----------------------------------------------------------------

def test_decode_unbounded_picks_minimum(models, ladder):
    cfg = DecodePolicyConfig(ladder, tbt_slo_ms=math.inf)
    x = BatchFeatures.from_lengths([500] * 10)
    assert select_decode_freq(x, KVCacheState(10_000, 100, 0.9), cfg, models.decode, 1) == ladder.min


def test_decode_kv_override(models, ladder):
    cfg = DecodePolicyConfig(ladder, tbt_slo_ms=math.inf, kv_threshold=0.9)
    x = BatchFeatures.from_lengths([500])
    assert select_decode_freq(x, KVCacheState(100, 99, 0.9), cfg, models.decode, 1) == ladder.max


def test_decode_second_from_top():
    lad = FrequencyLadder((1000.0, 1500.0, 1800.0, 2000.0))
    m = freq_only_models(lad.freqs_mhz, [150.0, 120.0, 95.0, 80.0], [1.0, 2.0, 3.0, 4.0])
    f, ok, evals = decode_choice(BatchFeatures.from_lengths([1]), None, DecodePolicyConfig(lad), m, 1)
    assert (f, ok, evals) == (1800.0, True, 3)


# -- safety ----------------------------------------------------------------

def test_safety_examples():
    assert apply_safety_overrides(100.0, 100.0) is None
    s = SafetyState()
    assert apply_safety_overrides(110.0, 100.0, s, 0.05) == "max"
    assert apply_safety_overrides(200.0, 100.0, s, 0.05) is None  # once per batch
    s.clear()
    assert apply_safety_overrides(104.0, 100.0, s, 0.05) is None


def test_brute_force_enumerates_everything(cb_models):
    lad = FrequencyLadder((990.0, 1485.0, 1980.0))
    cfg = MpcConfig(lad, horizon_K=4, ladder_N=3)
    q = queue([1024] * 4)
    res = brute_force_select(q, cfg, cb_models.prefill, SchedulerPolicy(max_batch_tokens=1024), 1)
    assert res.evaluations == 3 ** 4
    assert len(res.assignment) == 4 and res.feasible
