"""Iteration-level simulation of prefill and decode instances.

Time is in milliseconds, power in watts, energy in joules. A prefill instance
runs FCFS token-budget batches (optionally chunking long prompts); a decode
instance runs continuous batching where every resident request emits one
token per iteration. Frequency changes take ``switch_latency_ms`` to land;
until then the old frequency stays in force and the batch progresses at the
old rate (remaining-work fraction model).
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

from .errors import AccountingError, ConfigurationError, ParameterError, SimulationError
from .perfmodel import BatchFeatures, IdlePowerModel, ModelSet, PhaseModels, predict_idle_power
from .workload import Request, Trace


@dataclass(frozen=True)
class InstanceConfig:
    phase: str
    tp: int
    base_freq_mhz: float

    def __post_init__(self):
        if self.phase not in ("prefill", "decode"):
            raise ParameterError(f"unknown phase {self.phase!r}")
        if self.tp < 1:
            raise ParameterError("tp must be >= 1")

    def label(self) -> str:
        return f"{self.phase}-tp{self.tp}-{self.base_freq_mhz:g}"


@dataclass(frozen=True)
class SchedulerPolicy:
    max_batch_tokens: int = 4096
    max_batch_requests: int = 256
    chunking: bool = True
    kv_tokens_per_gpu: int = 100_000

    def __post_init__(self):
        if self.max_batch_tokens < 1 or self.max_batch_requests < 1 or self.kv_tokens_per_gpu < 1:
            raise ParameterError("scheduler budgets must be >= 1")

    def kv_capacity(self, tp: int) -> int:
        return self.kv_tokens_per_gpu * tp


@dataclass(frozen=True)
class SimOptions:
    switch_latency_ms: float = 30.0
    safety_margin: float = 0.05  # observed/predicted slack before reverting to max
    max_freq_mhz: float | None = None  # target of safety reverts; defaults to the base freq
    arrival_trigger: bool = True
    truth: ModelSet | None = None  # execution models when they differ from the controller's


@dataclass(frozen=True)
class KVCacheState:
    capacity_tokens: int
    used_tokens: int
    threshold: float = 0.9

    @property
    def utilization(self) -> float:
        return self.used_tokens / self.capacity_tokens


@dataclass(frozen=True)
class WaitingEntry:
    id: int
    arrival: float
    input_len: int
    remaining: int  # prefill tokens still to process


@dataclass(frozen=True)
class BatchMember:
    id: int
    arrival: float
    tokens: int
    completes: bool


@dataclass(frozen=True)
class RunningBatch:
    members: tuple[BatchMember, ...]
    features: BatchFeatures
    elapsed_ms: float
    remaining_fraction: float
    freq_mhz: float


@dataclass(frozen=True)
class QueueSnapshot:
    now_ms: float
    waiting: tuple[WaitingEntry, ...]
    running: RunningBatch | None
    current_freq_mhz: float
    kv: KVCacheState | None = None


@dataclass(frozen=True)
class BatchRecord:
    start_ms: float
    end_ms: float
    features: BatchFeatures
    freq_mhz: float
    power_w: float
    energy_j: float
    members: tuple[int, ...]
    batch_index: int
    segment: int = 0  # > 0 when a frequency change split the batch


@dataclass(frozen=True)
class Decision:
    time_ms: float
    instance: str
    trigger: str  # boundary | arrival | safety
    freq_mhz: float
    feasible: bool
    eval_count: int


class FrequencyController(Protocol):
    decisions: list

    def on_boundary(self, q: QueueSnapshot) -> float: ...

    def on_arrival(self, q: QueueSnapshot) -> float | None: ...


@dataclass
class RequestRecord:
    id: int
    arrival: float
    input_len: int
    output_len: int
    prefill_done_ms: float | None = None
    decode_admit_ms: float | None = None
    token_times: list[float] = field(default_factory=list)
    prefill_instance: int | None = None
    decode_instance: int | None = None

    @property
    def ttft_ms(self) -> float | None:
        return None if self.prefill_done_ms is None else self.prefill_done_ms - self.arrival

    @property
    def tpot_ms(self) -> float | None:
        """Mean gap between decode tokens; None with fewer than two tokens."""
        n = len(self.token_times)
        if n < 2:
            return None
        tt = self.token_times
        return math.fsum(b - a for a, b in zip(tt, tt[1:])) / (n - 1)

    @property
    def decode_queue_ms(self) -> float | None:
        if self.decode_admit_ms is None or self.prefill_done_ms is None:
            return None
        return self.decode_admit_ms - self.prefill_done_ms

    @property
    def completed(self) -> bool:
        return len(self.token_times) == self.output_len


@dataclass
class InstanceResult:
    index: int
    config: InstanceConfig
    batches: list[BatchRecord]
    freq_changes: list[tuple[float, float]]
    idle_watts: Callable[[float], float]
    kv_capacity: int | None = None
    kv_peak: int = 0
    span: tuple[float, float] = (0.0, 0.0)
    busy_energy_j: float = 0.0
    idle_energy_j: float = 0.0
    decisions: list[Decision] = field(default_factory=list)
    clamp_events: int = 0

    @property
    def energy_j(self) -> float:
        return self.busy_energy_j + self.idle_energy_j

    @property
    def phase(self) -> str:
        return self.config.phase

    def idle_intervals(self) -> list[tuple[float, float, float]]:
        return idle_intervals(self.batches, self.span, self.freq_changes)


@dataclass
class SimResult:
    requests: list[RequestRecord]
    instances: list[InstanceResult]
    span: tuple[float, float]
    issue_end_ms: float  # end of request issuance (trace duration)

    @property
    def energy_j(self) -> float:
        return sum(i.energy_j for i in self.instances)

    def phase_energy(self, phase: str) -> float:
        return sum(i.energy_j for i in self.instances if i.phase == phase)

    def phase_instances(self, phase: str) -> list[InstanceResult]:
        return [i for i in self.instances if i.phase == phase]

    @property
    def completed_requests(self) -> int:
        phases = {i.phase for i in self.instances}
        if "decode" in phases:
            return sum(1 for r in self.requests if r.completed)
        return sum(1 for r in self.requests if r.prefill_done_ms is not None)

    @property
    def generated_tokens(self) -> int:
        return sum(len(r.token_times) for r in self.requests)

    @property
    def decisions(self) -> list[Decision]:
        out = [d for i in self.instances for d in i.decisions]
        out.sort(key=lambda d: (d.time_ms, d.instance))
        return out


# -- scheduling ------------------------------------------------------------

def form_prefill_batch(waiting: Sequence[WaitingEntry], policy: SchedulerPolicy) -> list[BatchMember]:
    """FCFS token-budget batch from the head of ``waiting``.

    A prompt larger than the remaining budget is chunked when chunking is on;
    with chunking off it waits for the next batch, unless the batch is empty
    in which case it runs alone so the queue always drains.
    """
    budget = policy.max_batch_tokens
    out: list[BatchMember] = []
    for e in waiting:
        if len(out) >= policy.max_batch_requests or budget <= 0:
            break
        if e.remaining <= budget:
            out.append(BatchMember(e.id, e.arrival, e.remaining, True))
            budget -= e.remaining
        elif policy.chunking:
            out.append(BatchMember(e.id, e.arrival, budget, False))
            break
        else:
            if not out:
                out.append(BatchMember(e.id, e.arrival, e.remaining, True))
            break
    return out


def batch_features(members: Sequence[BatchMember]) -> BatchFeatures:
    return BatchFeatures.from_lengths([m.tokens for m in members])


# -- frequency state and batch execution -----------------------------------

class _FreqState:
    def __init__(self, freq: float, switch_ms: float):
        self.cur = freq
        self.switch_ms = switch_ms
        self.pending: tuple[float, float] | None = None  # (target, effective time)
        self.changes: list[tuple[float, float]] = [(0.0, freq)]

    @property
    def target(self) -> float:
        return self.pending[0] if self.pending else self.cur

    def request(self, target: float, now: float) -> None:
        if target == self.target:
            return
        if target == self.cur:
            self.pending = None
            return
        if self.switch_ms <= 0:
            self._apply(target, now)
        else:
            self.pending = (target, now + self.switch_ms)

    def advance(self, now: float) -> None:
        if self.pending and now >= self.pending[1]:
            target, at = self.pending
            self.pending = None
            self._apply(target, at)

    def _apply(self, freq: float, at: float) -> None:
        self.cur = freq
        if self.changes and self.changes[-1][0] == at:
            self.changes[-1] = (at, freq)
        else:
            self.changes.append((at, freq))


def planned_duration(latency_at: Callable[[float], float], freq: _FreqState, now: float,
                     fraction: float) -> float:
    """Time to finish ``fraction`` of a batch given the pending switch, if any."""
    l_cur = latency_at(freq.cur)
    if freq.pending is None:
        return fraction * l_cur
    target, at = freq.pending
    dt = at - now
    if fraction * l_cur <= dt:
        return fraction * l_cur
    return dt + (fraction - dt / l_cur) * latency_at(target)


class _Engine:
    """Shared per-instance machinery: frequency state, records, safety."""

    def __init__(self, index: int, cfg: InstanceConfig, models: PhaseModels, truth: PhaseModels,
                 controller, opts: SimOptions):
        self.index = index
        self.cfg = cfg
        self.models = models
        self.truth = truth
        self.controller = controller
        self.opts = opts
        self.freq = _FreqState(cfg.base_freq_mhz, opts.switch_latency_ms)
        self.records: list[BatchRecord] = []
        self.decisions: list[Decision] = []
        self.n_batches = 0
        self.max_freq = opts.max_freq_mhz if opts.max_freq_mhz is not None else cfg.base_freq_mhz
        self.name = f"{cfg.phase}{index}"

    def execute(self, t: float, members: Sequence[BatchMember], feats: BatchFeatures,
                next_arrival: Callable[[], float], on_arrival: Callable[[float, RunningBatch], float | None] | None,
                ids: tuple[int, ...] | None = None) -> float:
        """Run one batch starting at ``t``; returns its end time.

        ``ids`` may be given instead of ``members`` when no arrival hook needs them.
        """
        tp = self.cfg.tp
        truth_lat = lambda f: self.truth.latency_ms(feats, tp, f)
        pred_lat = lambda f: self.models.latency_ms(feats, tp, f)
        start = t
        w = 1.0
        self.freq.advance(t)
        deadline = math.inf
        if self.controller is not None:
            deadline = start + planned_duration(pred_lat, self.freq, t, 1.0) * (1 + self.opts.safety_margin)
        fired = False
        segs: list[list[float]] = []  # [start, end, freq]
        while True:
            self.freq.advance(t)
            f = self.freq.cur
            lf = truth_lat(f)
            t_fin = t + w * lf
            ev_switch = self.freq.pending[1] if self.freq.pending else math.inf
            ev_arr = next_arrival() if on_arrival is not None else math.inf
            ev_safe = deadline if not fired else math.inf
            e = min(ev_switch, ev_arr, ev_safe)
            if e >= t_fin:
                self._segment(segs, t, t_fin, f)
                t = t_fin
                break
            e = max(e, t)
            self._segment(segs, t, e, f)
            w = max(w - (e - t) / lf, 0.0)
            t = e
            if e == ev_safe:
                fired = True
                self.freq.request(self.max_freq, t)
                self.decisions.append(Decision(t, self.name, "safety", self.max_freq, True, 0))
            elif e == ev_arr:
                run = RunningBatch(tuple(members), feats, t - start, w, self.freq.cur)
                target = on_arrival(t, run)
                if target is not None:
                    self.freq.request(target, t)
                    if not fired:
                        deadline = t + planned_duration(pred_lat, self.freq, t, w) * (1 + self.opts.safety_margin)
        self._emit(segs, feats, ids if ids is not None else tuple(m.id for m in members))
        return t

    @staticmethod
    def _segment(segs, a, b, f):
        if b <= a:
            return
        if segs and segs[-1][2] == f and segs[-1][1] == a:
            segs[-1][1] = b
        else:
            segs.append([a, b, f])

    def _emit(self, segs, feats, ids):
        for k, (a, b, f) in enumerate(segs):
            p = self.truth.power_w(feats, self.cfg.tp, f)
            self.records.append(BatchRecord(a, b, feats, f, p, p * (b - a) / 1000.0, ids, self.n_batches, k))
        self.n_batches += 1

    def result(self, kv_capacity=None, kv_peak=0) -> InstanceResult:
        tp = self.cfg.tp
        idle = self.truth.idle
        log = list(self.decisions)
        if self.controller is not None:
            for d in getattr(self.controller, "decisions", []):
                log.append(Decision(d.time_ms, self.name, d.trigger, d.freq_mhz, d.feasible, d.eval_count))
            log.sort(key=lambda d: d.time_ms)
        clamps = self.truth.latency.clamp_count + self.truth.power.clamp_count
        return InstanceResult(self.index, self.cfg, self.records, list(self.freq.changes),
                              lambda f: predict_idle_power(idle, tp, f), kv_capacity, kv_peak,
                              decisions=log, clamp_events=clamps)


def _phase_truth(models: ModelSet, opts: SimOptions, phase: str) -> tuple[PhaseModels, PhaseModels]:
    m = models.phase(phase)
    return m, (opts.truth.phase(phase) if opts.truth is not None else m)


def _run_prefill(index, trace_reqs: Sequence[Request], cfg, policy, models, controller, opts,
                 recs: dict[int, RequestRecord]) -> InstanceResult:
    m, truth = _phase_truth(models, opts, "prefill")
    eng = _Engine(index, cfg, m, truth, controller, opts)
    arrivals = list(trace_reqs)
    n = len(arrivals)
    ai = 0
    waiting: deque[WaitingEntry] = deque()
    t = 0.0

    def admit(now):
        nonlocal ai
        while ai < n and arrivals[ai].arrival <= now:
            r = arrivals[ai]
            waiting.append(WaitingEntry(r.id, r.arrival, r.input_len, r.input_len))
            ai += 1

    def next_arrival():
        return arrivals[ai].arrival if ai < n else math.inf

    def on_arrival(now, run: RunningBatch):
        admit(now)
        if controller is None or not opts.arrival_trigger:
            return None
        snap = QueueSnapshot(now, tuple(waiting), run, eng.freq.target)
        return controller.on_arrival(snap)

    while ai < n or waiting:
        admit(t)
        if not waiting:
            t = arrivals[ai].arrival
            continue
        if controller is not None:
            snap = QueueSnapshot(t, tuple(waiting), None, eng.freq.target)
            eng.freq.request(controller.on_boundary(snap), t)
        members = form_prefill_batch(waiting, policy)
        for mem in members:
            head = waiting.popleft()
            if not mem.completes:
                waiting.appendleft(WaitingEntry(head.id, head.arrival, head.input_len, head.remaining - mem.tokens))
        feats = batch_features(members)
        hook = on_arrival if (controller is not None and opts.arrival_trigger) else None
        end = eng.execute(t, members, feats, next_arrival, hook)
        for mem in members:
            if mem.completes:
                recs[mem.id].prefill_done_ms = end
                recs[mem.id].prefill_instance = index
        t = end
    return eng.result()


@dataclass
class _Resident:
    id: int
    input_len: int
    output_len: int
    generated: int = 0


def _run_decode(index, trace_reqs: Sequence[Request], cfg, policy, models, controller, opts,
                recs: dict[int, RequestRecord]) -> InstanceResult:
    m, truth = _phase_truth(models, opts, "decode")
    eng = _Engine(index, cfg, m, truth, controller, opts)
    capacity = policy.kv_capacity(cfg.tp)
    threshold = getattr(controller, "kv_threshold", 0.9)
    arrivals = list(trace_reqs)
    n = len(arrivals)
    for r in arrivals:
        if r.input_len + r.output_len > capacity:
            raise SimulationError(f"request {r.id} needs {r.input_len + r.output_len} KV tokens, "
                                  f"capacity is {capacity}")
    ai = 0
    waiting: deque[Request] = deque()
    residents: list[_Resident] = []
    reserved = 0
    kv_peak = 0
    t = 0.0
    while ai < n or waiting or residents:
        while ai < n and arrivals[ai].arrival <= t:
            waiting.append(arrivals[ai])
            ai += 1
        while waiting and len(residents) < policy.max_batch_requests:
            r = waiting[0]
            need = r.input_len + r.output_len
            if reserved + need > capacity:
                break
            waiting.popleft()
            residents.append(_Resident(r.id, r.input_len, r.output_len))
            reserved += need
            recs[r.id].decode_admit_ms = t
            recs[r.id].decode_instance = index
        if not residents:
            t = arrivals[ai].arrival
            continue
        lens = [x.input_len + x.generated for x in residents]
        feats = BatchFeatures.from_lengths(lens)
        if controller is not None:
            members = tuple(BatchMember(x.id, 0.0, 1, x.generated + 1 == x.output_len) for x in residents)
            kv = KVCacheState(capacity, feats.sum_len, threshold)
            run = RunningBatch(members, feats, 0.0, 1.0, eng.freq.target)
            eng.freq.request(controller.on_boundary(QueueSnapshot(t, (), run, eng.freq.target, kv)), t)
        end = eng.execute(t, (), feats, lambda: math.inf, None, ids=tuple(x.id for x in residents))
        still = []
        for x in residents:
            x.generated += 1
            recs[x.id].token_times.append(end)
            if x.generated < x.output_len:
                still.append(x)
            else:
                reserved -= x.input_len + x.output_len
        residents = still
        # occupancy once this iteration's tokens land, before finished requests free their slots
        kv_peak = max(kv_peak, feats.sum_len + feats.n_requests)
        t = end
    return eng.result(capacity, kv_peak)


# -- energy accounting -----------------------------------------------------

def idle_intervals(records: Sequence[BatchRecord], span: tuple[float, float],
                   freq_changes: Sequence[tuple[float, float]] | None = None) -> list[tuple[float, float, float]]:
    """Gaps of ``span`` not covered by a batch, split where the frequency changes.

    Returns ``(start, end, freq)`` triples. Without ``freq_changes`` a gap takes
    the frequency of the batch before it (or after it, for a leading gap).
    """
    s0, s1 = span
    recs = sorted(records, key=lambda r: r.start_ms)
    gaps = []
    cur = s0
    for r in recs:
        if r.start_ms > cur:
            gaps.append((cur, r.start_ms))
        cur = max(cur, r.end_ms)
    if s1 > cur:
        gaps.append((cur, s1))
    out = []
    for a, b in gaps:
        if freq_changes:
            pts = [(t, f) for t, f in freq_changes]
            f_at = pts[0][1]
            for t, f in pts:
                if t <= a:
                    f_at = f
            x = a
            for t, f in pts:
                if a < t < b:
                    out.append((x, t, f_at))
                    x, f_at = t, f
            out.append((x, b, f_at))
        else:
            before = [r for r in recs if r.end_ms <= a]
            ref = before[-1] if before else (recs[0] if recs else None)
            out.append((a, b, ref.freq_mhz if ref else math.nan))
    return out


def account_energy(records: Sequence[BatchRecord], idle, span: tuple[float, float],
                   tp: int | None = None, freq_changes: Sequence[tuple[float, float]] | None = None,
                   base_freq: float | None = None) -> tuple[float, float, float]:
    """(busy, idle, total) joules over ``span``.

    ``idle`` is either constant watts, an :class:`IdlePowerModel` (needs
    ``tp``), or a callable mapping frequency to watts.
    """
    recs = sorted(records, key=lambda r: r.start_ms)
    s0, s1 = span
    prev_end = -math.inf
    for r in recs:
        if r.end_ms <= r.start_ms:
            raise AccountingError(f"empty or reversed batch record at {r.start_ms}")
        if r.start_ms < prev_end - 1e-9:
            raise AccountingError(f"overlapping batch records at {r.start_ms}")
        if r.start_ms < s0 - 1e-9 or r.end_ms > s1 + 1e-9:
            raise AccountingError(f"batch record [{r.start_ms}, {r.end_ms}] outside span {span}")
        prev_end = r.end_ms
    if isinstance(idle, IdlePowerModel):
        if tp is None:
            raise ParameterError("tp required with an idle power model")
        model = idle
        idle = lambda f: predict_idle_power(model, tp, f)
    if callable(idle):
        watts_at = idle
    else:
        const = float(idle)
        watts_at = lambda f: const
    if not freq_changes and base_freq is not None:
        freq_changes = [(s0, base_freq)]
    busy = math.fsum(r.power_w * (r.end_ms - r.start_ms) for r in recs) / 1000.0
    idle_j = math.fsum(watts_at(f) * (b - a) for a, b, f in idle_intervals(recs, span, freq_changes)) / 1000.0
    return busy, idle_j, busy + idle_j


def _finalize(inst: InstanceResult, span: tuple[float, float]) -> None:
    inst.span = span
    busy, idle, _ = account_energy(inst.batches, inst.idle_watts, span, freq_changes=inst.freq_changes)
    inst.busy_energy_j = busy
    inst.idle_energy_j = idle


# -- public entry points ---------------------------------------------------

def _records_for(reqs: Sequence[Request]) -> dict[int, RequestRecord]:
    return {r.id: RequestRecord(r.id, r.arrival, r.input_len, r.output_len) for r in reqs}


def simulate_instance(trace: Trace, cfg: InstanceConfig, policy: SchedulerPolicy, models: ModelSet,
                      controller=None, opts: SimOptions | None = None) -> SimResult:
    """Simulate one instance on ``trace``.

    For a decode instance the trace arrivals are the times requests become
    ready for decode.
    """
    opts = opts or SimOptions()
    recs = _records_for(trace.requests)
    run = _run_prefill if cfg.phase == "prefill" else _run_decode
    inst = run(0, trace.requests, cfg, policy, models, controller, opts, recs)
    end = max([trace.duration_ms] + [b.end_ms for b in inst.batches])
    _finalize(inst, (0.0, end))
    return SimResult([recs[r.id] for r in trace.requests], [inst], (0.0, end), trace.duration_ms)


@dataclass
class RouterState:
    assigned: list[float]
    total: float = 0.0

    @classmethod
    def fresh(cls, n: int) -> RouterState:
        return cls([0.0] * n)


def request_load(r: Request, phase: str) -> float:
    return float(r.input_len) if phase == "prefill" else 1.0


def route_request(r: Request, weights: Sequence[float], phase: str, state: RouterState) -> int:
    """Deficit-weighted assignment: pick the instance furthest below its share."""
    if any(w <= 0 for w in weights) or not math.isclose(sum(weights), 1.0, rel_tol=1e-9, abs_tol=1e-9):
        raise ParameterError("routing weights must be positive and sum to 1")
    load = request_load(r, phase)
    state.total += load
    best, best_def = 0, -math.inf
    for i, w in enumerate(weights):
        d = w * state.total - state.assigned[i]
        if d > best_def:
            best, best_def = i, d
    state.assigned[best] += load
    return best


def simulate_cluster(trace: Trace, plan, policy: SchedulerPolicy, models: ModelSet,
                     controllers: Callable[[int, InstanceConfig], object] | None = None,
                     opts: SimOptions | None = None) -> SimResult:
    """Route ``trace`` through the plan's prefill pool then its decode pool.

    ``plan.instances`` is a sequence of objects with ``config`` and ``weight``;
    instance indices follow that order. KV hand-off is instantaneous.
    """
    opts = opts or SimOptions()
    insts = list(plan.instances)
    pre = [i for i, p in enumerate(insts) if p.config.phase == "prefill"]
    dec = [i for i, p in enumerate(insts) if p.config.phase == "decode"]
    if not pre or not dec:
        raise ConfigurationError("plan needs at least one prefill and one decode instance")
    recs = _records_for(trace.requests)
    results: dict[int, InstanceResult] = {}

    def make_ctrl(i):
        return controllers(i, insts[i].config) if controllers is not None else None

    state = RouterState.fresh(len(pre))
    pw = _normalized([insts[i].weight for i in pre])
    shards: dict[int, list[Request]] = {i: [] for i in pre}
    for r in trace.requests:
        shards[pre[route_request(r, pw, "prefill", state)]].append(r)
    for i in pre:
        results[i] = _run_prefill(i, shards[i], insts[i].config, policy, models, make_ctrl(i), opts, recs)

    ready = sorted((recs[r.id].prefill_done_ms, r.id) for r in trace.requests)
    by_id = {r.id: r for r in trace.requests}
    state = RouterState.fresh(len(dec))
    dw = _normalized([insts[i].weight for i in dec])
    dshards: dict[int, list[Request]] = {i: [] for i in dec}
    for t_ready, rid in ready:
        r = by_id[rid]
        moved = Request(r.id, t_ready, r.input_len, r.output_len)
        dshards[dec[route_request(moved, dw, "decode", state)]].append(moved)
    for i in dec:
        results[i] = _run_decode(i, dshards[i], insts[i].config, policy, models, make_ctrl(i), opts, recs)

    end = max([trace.duration_ms] + [b.end_ms for res in results.values() for b in res.batches])
    ordered = [results[i] for i in range(len(insts))]
    for inst in ordered:
        _finalize(inst, (0.0, end))
    return SimResult([recs[r.id] for r in trace.requests], ordered, (0.0, end), trace.duration_ms)


def _normalized(ws: Sequence[float]) -> list[float]:
    s = float(sum(ws))
    if s <= 0:
        raise ConfigurationError("routing weights must be positive")
    return [w / s for w in ws]


# -- export ----------------------------------------------------------------

REQUEST_COLUMNS = ("id", "arrival_ms", "input_len", "output_len", "ttft_ms", "tpot_ms",
                   "decode_queue_ms", "prefill_instance", "decode_instance")
BATCH_COLUMNS = ("instance", "phase", "batch", "segment", "start_ms", "end_ms", "freq_mhz",
                 "power_w", "energy_j", "n_requests", "sum_len")


def _fmt(x) -> str:
    if x is None:
        return "nan"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_requests_csv(sim: SimResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REQUEST_COLUMNS)
        for r in sim.requests:
            w.writerow([_fmt(x) for x in (r.id, r.arrival, r.input_len, r.output_len, r.ttft_ms, r.tpot_ms,
                                          r.decode_queue_ms, r.prefill_instance, r.decode_instance)])


def write_batches_csv(sim: SimResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BATCH_COLUMNS)
        for inst in sim.instances:
            for b in inst.batches:
                w.writerow([_fmt(x) for x in (inst.index, inst.phase, b.batch_index, b.segment, b.start_ms,
                                              b.end_ms, b.freq_mhz, b.power_w, b.energy_j,
                                              b.features.n_requests, b.features.sum_len)])


DECISION_COLUMNS = ("time_ms", "instance", "trigger", "chosen_freq", "feasible_flag", "eval_count")


def write_decisions_csv(decisions: Sequence[Decision], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DECISION_COLUMNS)
        for d in decisions:
            w.writerow([_fmt(d.time_ms), d.instance, d.trigger, _fmt(d.freq_mhz), int(d.feasible), d.eval_count])
