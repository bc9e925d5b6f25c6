"""Per-iteration frequency control.

Prefill uses a receding-horizon controller: project the queue into future
batches, then search frequency vectors with a greedy two-rung expansion and
keep the SLO-feasible one with the lowest time-weighted power. Decode picks,
per iteration, the lowest rung whose predicted latency meets the TBT bound.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ParameterError
from .metrics import SLOSpec
from .perfmodel import BatchFeatures, FrequencyLadder, PhaseModels
from .simulator import (Decision, KVCacheState, QueueSnapshot, SchedulerPolicy, WaitingEntry,
                        batch_features, form_prefill_batch)


@dataclass(frozen=True)
class MpcConfig:
    ladder: FrequencyLadder
    slo: SLOSpec = SLOSpec()
    horizon_K: int = 8
    ladder_N: int = 7
    switch_latency_ms: float = 30.0
    latency_margin: float = 0.05

    def __post_init__(self):
        if self.horizon_K < 1 or self.ladder_N < 1:
            raise ParameterError("horizon_K and ladder_N must be >= 1")

    @property
    def candidates(self) -> FrequencyLadder:
        return self.ladder.subset(self.ladder_N)


@dataclass(frozen=True)
class DecodePolicyConfig:
    ladder: FrequencyLadder
    tbt_slo_ms: float = 100.0
    kv_threshold: float = 0.9
    latency_margin: float = 0.0

    def __post_init__(self):
        if not self.tbt_slo_ms > 0:
            raise ParameterError("tbt_slo_ms must be > 0")
        if not 0 < self.kv_threshold < 1:
            raise ParameterError("kv_threshold must be in (0, 1)")


@dataclass(frozen=True)
class Projection:
    batches: tuple[BatchFeatures, ...]
    fractions: tuple[float, ...]  # remaining work; below 1 only for an in-flight batch
    completions: tuple[tuple[tuple[int, float], ...], ...]  # (id, arrival) finishing prefill in each batch

    def __len__(self):
        return len(self.batches)

    def deadlines(self, ttft_ms: float) -> np.ndarray:
        return np.array([min((a for _, a in c), default=math.inf) + ttft_ms for c in self.completions])


def project_batches(q: QueueSnapshot, policy: SchedulerPolicy, horizon_K: int) -> Projection:
    """Replay the prefill scheduler on a frozen queue, up to ``horizon_K`` batches."""
    feats, fracs, comps = [], [], []
    if q.running is not None:
        feats.append(q.running.features)
        fracs.append(q.running.remaining_fraction)
        comps.append(tuple((m.id, m.arrival) for m in q.running.members if m.completes))
    waiting = list(q.waiting)
    while waiting and len(feats) < horizon_K:
        members = form_prefill_batch(waiting, policy)
        rest = waiting[len(members):]
        last = members[-1]
        if not last.completes:
            head = waiting[len(members) - 1]
            rest.insert(0, WaitingEntry(head.id, head.arrival, head.input_len, head.remaining - last.tokens))
        waiting = rest
        feats.append(batch_features(members))
        fracs.append(1.0)
        comps.append(tuple((m.id, m.arrival) for m in members if m.completes))
    return Projection(tuple(feats[:horizon_K]), tuple(fracs[:horizon_K]), tuple(comps[:horizon_K]))


def meets_slo(assignment: Sequence[float], projection: Projection, q: QueueSnapshot, models: PhaseModels,
              slo: SLOSpec, tp: int, switch_latency_ms: float = 0.0, latency_margin: float = 0.0) -> bool:
    """Whether every request finishing inside the horizon meets its TTFT bound."""
    if len(assignment) != len(projection):
        raise ParameterError("assignment and projection lengths differ")
    t = q.now_ms
    prev = q.current_freq_mhz
    for f, feats, frac, done in zip(assignment, projection.batches, projection.fractions, projection.completions):
        t += frac * models.latency_ms(feats, tp, f) * (1 + latency_margin)
        if f != prev:
            t += switch_latency_ms
        prev = f
        for _, arrival in done:
            if t - arrival - slo.ttft_ms > _TOL:
                return False
    return True


def time_weighted_power(assignment: Sequence[float], projection: Projection, models: PhaseModels, tp: int) -> float:
    lat = [frac * models.latency_ms(b, tp, f) for f, b, frac in zip(assignment, projection.batches, projection.fractions)]
    pw = [models.power_w(b, tp, f) for f, b in zip(assignment, projection.batches)]
    total = sum(lat)
    return sum(l * p for l, p in zip(lat, pw)) / total if total > 0 else 0.0


_TOL = 1e-9  # ms of slack granted to float round-off in deadline checks


@dataclass
class GreedyResult:
    assignment: tuple[float, ...]
    feasible: bool
    objective: float
    evaluations: int
    mutation_counts: list[int] = field(default_factory=list)
    level_sizes: list[int] = field(default_factory=list)  # positions on the source rung per level


class _Evaluator:
    """Vectorized feasibility and objective over many frequency vectors."""

    def __init__(self, projection: Projection, q: QueueSnapshot, models: PhaseModels, tp: int,
                 freqs: np.ndarray, slo: SLOSpec, switch_ms: float, margin: float):
        fr = np.array(projection.fractions)[:, None]
        self.lat = fr * np.array([[models.latency_ms(b, tp, f) for f in freqs] for b in projection.batches])
        self.pow = np.array([[models.power_w(b, tp, f) for f in freqs] for b in projection.batches])
        self.freqs = freqs
        self.deadline = projection.deadlines(slo.ttft_ms)
        self.now = q.now_ms
        self.cur = q.current_freq_mhz
        self.switch_ms = switch_ms
        self.margin = margin
        self.count = 0

    def __call__(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx = np.atleast_2d(idx)
        self.count += len(idx)
        rows = np.arange(idx.shape[1])
        L = self.lat[rows, idx]
        F = self.freqs[idx]
        prevF = np.concatenate([np.full((len(idx), 1), self.cur), F[:, :-1]], axis=1)
        step = L * (1 + self.margin) + self.switch_ms * (F != prevF)
        done = self.now + np.cumsum(step, axis=1)
        feasible = np.all(done - self.deadline[None, :] <= _TOL, axis=1)
        tot = L.sum(axis=1)
        obj = np.divide((L * self.pow[rows, idx]).sum(axis=1), tot, out=np.zeros(len(idx)), where=tot > 0)
        return feasible, obj


def _mutations(base: np.ndarray, positions: np.ndarray, options: Sequence[int]) -> np.ndarray:
    """Every way to re-assign ``positions`` among ``options`` except the identity."""
    combos = np.array(list(itertools.product(range(len(options)), repeat=len(positions))), dtype=np.int64)
    combos = combos[1:]  # first row keeps every position on options[0] (unchanged)
    out = np.repeat(base[None, :], len(combos), axis=0)
    out[:, positions] = np.asarray(options)[combos]
    return out


def _pick(idx: np.ndarray, obj: np.ndarray, freqs: np.ndarray) -> int:
    """Row with the smallest objective; ties go to the lexicographically lowest freq vector."""
    best = obj.min()
    ties = np.flatnonzero(obj == best)
    if len(ties) == 1:
        return int(ties[0])
    return int(min(ties, key=lambda r: tuple(freqs[idx[r]])))


def greedy_from_projection(projection: Projection, q: QueueSnapshot, cfg: MpcConfig, models: PhaseModels,
                           tp: int) -> GreedyResult:
    if len(projection) == 0:
        return GreedyResult((), True, 0.0, 0)
    freqs = np.array(sorted(cfg.candidates.freqs_mhz, reverse=True))  # freqs[0] is the top rung
    ev = _Evaluator(projection, q, models, tp, freqs, cfg.slo, cfg.switch_latency_ms, cfg.latency_margin)
    cur = np.zeros(len(projection), dtype=np.int64)
    feas, obj = ev(cur)
    if not feas[0]:
        return GreedyResult(tuple(freqs[cur]), False, float(obj[0]), ev.count)
    best, best_obj = cur.copy(), float(obj[0])
    n = len(freqs)
    if n == 1:
        levels = []
    elif n == 2:
        levels = [(0, (1,))]
    else:
        # rung j-1 may move to rungs j or j+1
        levels = [(j - 1, (j, j + 1)) for j in range(1, n - 1)]
    counts, sizes = [], []
    for src, dsts in levels:
        pos = np.flatnonzero(cur == src)
        sizes.append(len(pos))
        if len(pos) == 0:
            counts.append(0)
            continue
        cand = _mutations(cur, pos, (src,) + dsts)
        counts.append(len(cand))
        feas, obj = ev(cand)
        if not feas.any():
            break
        ok = np.flatnonzero(feas)
        k = ok[_pick(cand[ok], obj[ok], freqs)]
        cur = cand[k]
        o = float(obj[k])
        if o < best_obj or (o == best_obj and tuple(freqs[cur]) < tuple(freqs[best])):
            best, best_obj = cur.copy(), o
    return GreedyResult(tuple(float(x) for x in freqs[best]), True, best_obj, ev.count, counts, sizes)


def greedy_freq_select(q: QueueSnapshot, cfg: MpcConfig, models: PhaseModels, policy: SchedulerPolicy,
                       tp: int) -> GreedyResult:
    return greedy_from_projection(project_batches(q, policy, cfg.horizon_K), q, cfg, models, tp)


def on_arrival_trigger(q: QueueSnapshot, cfg: MpcConfig, models: PhaseModels, policy: SchedulerPolicy,
                       tp: int) -> GreedyResult:
    """Re-plan mid-batch; the in-flight batch is projected with its remaining work."""
    return greedy_freq_select(q, cfg, models, policy, tp)


def brute_force_select(q: QueueSnapshot, cfg: MpcConfig, models: PhaseModels, policy: SchedulerPolicy,
                       tp: int) -> GreedyResult:
    """Exhaustive search over every candidate vector; small instances only."""
    proj = project_batches(q, policy, cfg.horizon_K)
    if len(proj) == 0:
        return GreedyResult((), True, 0.0, 0)
    freqs = np.array(sorted(cfg.candidates.freqs_mhz, reverse=True))
    best = None
    count = 0
    for combo in itertools.product(range(len(freqs)), repeat=len(proj)):
        a = [float(freqs[i]) for i in combo]
        count += 1
        if not meets_slo(a, proj, q, models, cfg.slo, tp, cfg.switch_latency_ms, cfg.latency_margin):
            continue
        o = time_weighted_power(a, proj, models, tp)
        if best is None or o < best[0] or (o == best[0] and tuple(a) < best[1]):
            best = (o, tuple(a))
    if best is None:
        return GreedyResult(tuple(float(freqs[0]) for _ in proj.batches), False, math.nan, count)
    return GreedyResult(best[1], True, best[0], count)


# -- decode ----------------------------------------------------------------

def decode_choice(batch: BatchFeatures, kv: KVCacheState | None, cfg: DecodePolicyConfig, models: PhaseModels,
                  tp: int) -> tuple[float, bool, int]:
    """(frequency, feasible, latency evaluations) for one decode iteration."""
    if kv is not None and kv.utilization > cfg.kv_threshold:
        return cfg.ladder.max, True, 0
    evals = 0
    for f in cfg.ladder:
        evals += 1
        if models.latency_ms(batch, tp, f) * (1 + cfg.latency_margin) <= cfg.tbt_slo_ms:
            return f, True, evals
    return cfg.ladder.max, False, evals


def select_decode_freq(batch: BatchFeatures, kv: KVCacheState | None, cfg: DecodePolicyConfig,
                       models: PhaseModels, tp: int) -> float:
    return decode_choice(batch, kv, cfg, models, tp)[0]


# -- safety ----------------------------------------------------------------

@dataclass
class SafetyState:
    fired: bool = False

    def clear(self) -> None:
        self.fired = False


def apply_safety_overrides(observed_latency: float, predicted_latency: float, state: SafetyState | None = None,
                           margin: float = 0.05) -> str | None:
    """``"max"`` when the batch has overrun its prediction by more than ``margin``.

    Fires at most once per batch; call ``state.clear()`` at the next boundary.
    """
    state = state if state is not None else SafetyState()
    if state.fired:
        return None
    if observed_latency > predicted_latency * (1 + margin):
        state.fired = True
        return "max"
    return None


# -- controllers plugged into the simulator --------------------------------

class PrefillMpcController:
    def __init__(self, models: PhaseModels, cfg: MpcConfig, policy: SchedulerPolicy, tp: int, name: str = "prefill"):
        self.models = models
        self.cfg = cfg
        self.policy = policy
        self.tp = tp
        self.name = name
        self.decisions: list[Decision] = []
        self.last: GreedyResult | None = None

    def _decide(self, q: QueueSnapshot, trigger: str) -> float:
        res = greedy_freq_select(q, self.cfg, self.models, self.policy, self.tp)
        self.last = res
        f = res.assignment[0] if res.assignment else self.cfg.ladder.max
        self.decisions.append(Decision(q.now_ms, self.name, trigger, f, res.feasible, res.evaluations))
        return f

    def on_boundary(self, q: QueueSnapshot) -> float:
        return self._decide(q, "boundary")

    def on_arrival(self, q: QueueSnapshot) -> float | None:
        return self._decide(q, "arrival")


class DecodeFreqController:
    def __init__(self, models: PhaseModels, cfg: DecodePolicyConfig, tp: int, name: str = "decode"):
        self.models = models
        self.cfg = cfg
        self.tp = tp
        self.name = name
        self.decisions: list[Decision] = []

    @property
    def kv_threshold(self) -> float:
        return self.cfg.kv_threshold

    def on_boundary(self, q: QueueSnapshot) -> float:
        f, ok, n = decode_choice(q.running.features, q.kv, self.cfg, self.models, self.tp)
        self.decisions.append(Decision(q.now_ms, self.name, "boundary", f, ok, n))
        return f

    def on_arrival(self, q: QueueSnapshot) -> float | None:
        return None
