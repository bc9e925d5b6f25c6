"""Frequency-aware provisioning.

Each candidate (phase, TP, frequency) is simulated on a reference trace to
find its maximum SLO-feasible request rate and its energy per request. An
integer program then picks instance counts that minimize the summed power at
capacity (energy per request times rate) under a GPU budget, with each phase
covering the target rate plus a safety margin.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import InfeasibleError, ParameterError, SimulationError
from .metrics import SLOSpec
from .perfmodel import FrequencyLadder, ModelSet
from .simulator import InstanceConfig, SchedulerPolicy, SimOptions, SimResult, simulate_instance
from .workload import Trace, downsample_trace, peak_rps, predict_next_window

PLAN_FILE_VERSION = 1


@dataclass(frozen=True)
class SearchParams:
    lo_rps: float = 0.05
    tol_rps: float = 0.05
    seed: int = 0
    probes: int = 1  # seeds per probe rate; a rate is feasible only if every seed is
    max_iter: int = 64


@dataclass(frozen=True)
class ConfigTableEntry:
    config: InstanceConfig
    R_c: float
    E_c: float
    G_c: int
    error: str | None = None

    @property
    def usable(self) -> bool:
        return self.R_c > 0 and self.error is None and math.isfinite(self.E_c)

    @property
    def phase(self) -> str:
        return self.config.phase


# -- goodput search --------------------------------------------------------

def slo_feasible(sim: SimResult, phase: str, slo: SLOSpec) -> bool:
    """Zero-violation check used by the goodput search.

    Prefill: every TTFT within bound. Decode: every gap between consecutive
    decode tokens, and every wait from hand-off to first decode iteration,
    within the TPOT bound.
    """
    if phase == "prefill":
        return all(r.ttft_ms is not None and r.ttft_ms <= slo.ttft_ms for r in sim.requests)
    for r in sim.requests:
        # a decode-only run has no prefill record; its arrival is the hand-off time
        ready = r.prefill_done_ms if r.prefill_done_ms is not None else r.arrival
        if r.decode_admit_ms is None or r.decode_admit_ms - ready > slo.tpot_ms:
            return False
        tt = r.token_times
        for a, b in zip(tt, tt[1:]):
            if b - a > slo.tpot_ms:
                return False
    return True


def probe(cfg: InstanceConfig, base_trace: Trace, rate: float, slo: SLOSpec, models: ModelSet,
          policy: SchedulerPolicy, search: SearchParams) -> bool:
    """Whether ``cfg`` serves ``base_trace`` down-sampled to ``rate`` without violations."""
    keep = min(rate / base_trace.mean_rps, 1.0)
    for k in range(search.probes):
        t = downsample_trace(base_trace, keep, search.seed + k)
        sim = simulate_instance(t, cfg, policy, models, opts=SimOptions(switch_latency_ms=0.0))
        if not slo_feasible(sim, cfg.phase, slo):
            return False
    return True


@dataclass
class GoodputSearch:
    rate: float
    capped: bool  # the whole reference trace was feasible
    history: list[tuple[float, bool]] = field(default_factory=list)


def goodput_search(cfg: InstanceConfig, base_trace: Trace, slo: SLOSpec, models: ModelSet,
                   policy: SchedulerPolicy, search: SearchParams = SearchParams()) -> GoodputSearch:
    if not base_trace.requests:
        raise ParameterError("reference trace is empty")
    top = base_trace.mean_rps
    hist = []

    def ok(rate):
        res = probe(cfg, base_trace, rate, slo, models, policy, search)
        hist.append((rate, res))
        return res

    if ok(top):
        return GoodputSearch(top, True, hist)
    lo = min(search.lo_rps, top)
    if not ok(lo):
        return GoodputSearch(0.0, False, hist)
    hi = top
    for _ in range(search.max_iter):
        if hi - lo <= search.tol_rps:
            break
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return GoodputSearch(lo, False, hist)


def max_goodput(cfg: InstanceConfig, base_trace: Trace, slo: SLOSpec, models: ModelSet,
                policy: SchedulerPolicy, search: SearchParams = SearchParams()) -> float:
    """Highest SLO-feasible rate (requests/s) found by binary search over down-sampling."""
    return goodput_search(cfg, base_trace, slo, models, policy, search).rate


def energy_per_request(sim: SimResult, include_idle: bool | None = None) -> float:
    """Joules per completed request; idle energy counts for prefill by default."""
    n = sim.completed_requests
    if n == 0:
        return math.nan
    phases = {i.phase for i in sim.instances}
    if include_idle is None:
        include_idle = phases == {"prefill"}
    busy = sum(i.busy_energy_j for i in sim.instances)
    idle = sum(i.idle_energy_j for i in sim.instances)
    return (busy + (idle if include_idle else 0.0)) / n


def _table_entry(args) -> ConfigTableEntry:
    cfg, base_trace, slo, models, policy, search, decode_idle = args
    try:
        rate = max_goodput(cfg, base_trace, slo, models, policy, search)
        if rate <= 0:
            return ConfigTableEntry(cfg, 0.0, math.nan, cfg.tp)
        t = downsample_trace(base_trace, min(rate / base_trace.mean_rps, 1.0), search.seed)
        sim = simulate_instance(t, cfg, policy, models, opts=SimOptions(switch_latency_ms=0.0))
        e = energy_per_request(sim, True if (cfg.phase == "decode" and decode_idle) else None)
        return ConfigTableEntry(cfg, rate, e, cfg.tp)
    except (SimulationError, Exception) as exc:  # noqa: BLE001 - recorded per candidate
        return ConfigTableEntry(cfg, 0.0, math.nan, cfg.tp, f"{type(exc).__name__}: {exc}")


def build_config_table(candidates: Sequence[InstanceConfig], base_trace: Trace, slo: SLOSpec, models: ModelSet,
                       policy: SchedulerPolicy, search: SearchParams = SearchParams(), decode_idle: bool = False,
                       jobs: int = 1) -> list[ConfigTableEntry]:
    if not candidates:
        raise ParameterError("no candidate configurations")
    work = [(c, base_trace, slo, models, policy, search, decode_idle) for c in candidates]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_table_entry, work))
    return [_table_entry(w) for w in work]


def candidate_configs(ladder: FrequencyLadder, tp_options: Sequence[int],
                      phases: Sequence[str] = ("prefill", "decode")) -> list[InstanceConfig]:
    return [InstanceConfig(ph, int(tp), f) for ph in phases for tp in tp_options for f in ladder]


# -- integer program -------------------------------------------------------

@dataclass(frozen=True)
class PlacementProblem:
    table: tuple[ConfigTableEntry, ...]
    G: int
    R: float
    alpha: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "table", tuple(self.table))
        if self.G < 1 or not self.R > 0 or self.alpha < 0:
            raise ParameterError("need G >= 1, R > 0 and alpha >= 0")

    @property
    def demand(self) -> float:
        return (1 + self.alpha) * self.R


@dataclass(frozen=True)
class PlannedInstance:
    config: InstanceConfig
    weight: float
    entry: int  # index into the config table


@dataclass
class PlacementPlan:
    counts: tuple[int, ...]
    table: tuple[ConfigTableEntry, ...]
    G: int
    R: float
    alpha: float
    objective: float
    instances: list[PlannedInstance] = field(default_factory=list)
    system: str = "place-only"

    def capacity(self, phase: str) -> float:
        return sum(n * e.R_c for n, e in zip(self.counts, self.table) if e.phase == phase)

    @property
    def gpus(self) -> int:
        return sum(n * e.G_c for n, e in zip(self.counts, self.table))

    def slack(self) -> dict[str, float]:
        need = (1 + self.alpha) * self.R
        return {"gpu": self.G - self.gpus, "prefill": self.capacity("prefill") - need,
                "decode": self.capacity("decode") - need}

    def violations(self) -> list[str]:
        """Constraint breaches, re-derived from the plan alone."""
        out = []
        s = self.slack()
        if s["gpu"] < 0:
            out.append("gpu_capacity")
        for ph in ("prefill", "decode"):
            if s[ph] < -1e-9 * max(1.0, self.R):
                out.append(f"{ph}_goodput")
            ws = [i.weight for i in self.instances if i.config.phase == ph]
            if not ws or any(w <= 0 for w in ws) or not math.isclose(sum(ws), 1.0, abs_tol=1e-9):
                out.append(f"{ph}_weights")
        return out


def plan_objective(counts: Sequence[int], table: Sequence[ConfigTableEntry]) -> float:
    """Summed E_c * R_c over chosen instances, accumulated in table order."""
    total = 0.0
    for n, e in zip(counts, table):
        if n:
            total += n * e.E_c * e.R_c
    return total


def _fractional_cover(deficit: float, items: list[tuple[float, float]]) -> float | None:
    """Cheapest fractional cover of ``deficit`` by (unit cost, max amount) items, or None."""
    if deficit <= 0:
        return 0.0
    cost = 0.0
    for unit, cap in sorted(items):
        take = min(cap, deficit)
        cost += unit * take
        deficit -= take
        if deficit <= 1e-12:
            return cost
    return None


def solve_placement(p: PlacementProblem) -> PlacementPlan:
    """Exact minimum of the provisioning integer program by branch and bound.

    Variables are visited in table order with counts ascending; the bound is
    the LP relaxation with the GPU budget replaced by per-variable count
    limits, plus a fractional GPU-feasibility test. Among equal optima the
    lexicographically smallest count vector wins.
    """
    table = p.table
    n = len(table)
    usable = [e.usable for e in table]
    for ph in ("prefill", "decode"):
        if not any(u and e.phase == ph for u, e in zip(usable, table)):
            raise InfeasibleError(f"{ph}_goodput", f"no usable {ph} configuration in the table")
    need = p.demand
    ub = [p.G // e.G_c if u else 0 for u, e in zip(usable, table)]
    unit = [e.E_c * e.R_c if u else 0.0 for u, e in zip(usable, table)]
    phase_of = [e.phase for e in table]

    best: list = [math.inf, None]
    counts = [0] * n

    def bound(k: int, cost: float, gpus_left: int, cap: dict) -> float:
        extra = 0.0
        gpu_need = 0.0
        for ph in ("prefill", "decode"):
            deficit = need - cap[ph]
            if deficit <= 0:
                continue
            items = [(table[j].E_c, min(ub[j], gpus_left // table[j].G_c) * table[j].R_c)
                     for j in range(k, n) if usable[j] and phase_of[j] == ph]
            c = _fractional_cover(deficit, items)
            if c is None:
                return math.inf
            extra += c
            g = _fractional_cover(deficit, [(table[j].G_c / table[j].R_c, cap_j) for j, (_, cap_j) in
                                            zip([j for j in range(k, n) if usable[j] and phase_of[j] == ph], items)])
            gpu_need += g if g is not None else math.inf
        if gpu_need > gpus_left + 1e-9:
            return math.inf
        return cost + extra

    def dfs(k: int, cost: float, gpus_left: int, cap: dict) -> None:
        lb = bound(k, cost, gpus_left, cap)
        if lb > best[0] + 1e-9 * max(1.0, abs(best[0])) and best[1] is not None:
            return
        if lb == math.inf:
            return
        if k == n:
            if cap["prefill"] >= need and cap["decode"] >= need:
                obj = plan_objective(counts, table)
                if obj < best[0] or (obj == best[0] and tuple(counts) < best[1]):
                    best[0], best[1] = obj, tuple(counts)
            return
        e = table[k]
        top = min(ub[k], gpus_left // e.G_c) if usable[k] else 0
        for v in range(top + 1):
            counts[k] = v
            if v:
                cap[e.phase] += e.R_c
            dfs(k + 1, cost + v * unit[k], gpus_left - v * e.G_c, cap)
        if usable[k]:
            cap[e.phase] -= top * e.R_c
        counts[k] = 0

    dfs(0, 0.0, p.G, {"prefill": 0.0, "decode": 0.0})
    if best[1] is None:
        raise InfeasibleError("gpu_capacity", f"{p.G} GPUs cannot cover {need:.4g} req/s in both phases")
    return make_plan(best[1], p, best[0])


def make_plan(counts: Sequence[int], p: PlacementProblem, objective: float | None = None,
              system: str = "place-only") -> PlacementPlan:
    counts = tuple(int(c) for c in counts)
    obj = plan_objective(counts, p.table) if objective is None else objective
    plan = PlacementPlan(counts, p.table, p.G, p.R, p.alpha, obj, system=system)
    plan.instances = derive_routing_weights(counts, p.table)
    return plan


def derive_routing_weights(counts: Sequence[int], table: Sequence[ConfigTableEntry]) -> list[PlannedInstance]:
    """Expand counts into instances weighted by capacity share within their phase."""
    out = []
    totals = {"prefill": 0.0, "decode": 0.0}
    for c, e in zip(counts, table):
        totals[e.phase] += c * e.R_c
    for j, (c, e) in enumerate(zip(counts, table)):
        for _ in range(c):
            out.append(PlannedInstance(e.config, e.R_c / totals[e.phase], j))
    return out


def _top_freq_indices(table: Sequence[ConfigTableEntry]) -> list[int]:
    top: dict[tuple[str, int], float] = {}
    for e in table:
        key = (e.phase, e.config.tp)
        top[key] = max(top.get(key, -math.inf), e.config.base_freq_mhz)
    return [j for j, e in enumerate(table) if e.usable and e.config.base_freq_mhz == top[(e.phase, e.config.tp)]]


def _phase_combos(table: Sequence[ConfigTableEntry], idx: Sequence[int], phase: str, G: int, need: float
                  ) -> list[tuple[int, float, dict[int, int]]]:
    """Every (gpus, capacity, counts) for one phase within ``G`` GPUs covering ``need``."""
    js = [j for j in idx if table[j].phase == phase]
    out = []

    def rec(i, gpus, cap, chosen):
        if i == len(js):
            if cap >= need and gpus > 0:
                out.append((gpus, cap, dict(chosen)))
            return
        e = table[js[i]]
        v = 0
        while gpus + v * e.G_c <= G:
            chosen[js[i]] = v
            rec(i + 1, gpus + v * e.G_c, cap + v * e.R_c, chosen)
            v += 1
        chosen.pop(js[i], None)

    rec(0, 0, 0.0, {})
    return out


def solve_distserve(p: PlacementProblem) -> PlacementPlan:
    """Max-frequency baseline: maximize served rate per GPU, then fewest GPUs.

    Only the table's top-frequency entries per (phase, TP) are considered.
    """
    idx = _top_freq_indices(p.table)
    need = p.demand
    combos = {}
    for ph in ("prefill", "decode"):
        combos[ph] = _phase_combos(p.table, idx, ph, p.G, need)
        if not combos[ph]:
            has = any(p.table[j].phase == ph for j in idx)
            raise InfeasibleError("gpu_capacity" if has else f"{ph}_goodput",
                                  f"no max-frequency {ph} placement covers {need:.4g} req/s")
    best = None
    for gp, cp, ch_p in combos["prefill"]:
        for gd, cd, ch_d in combos["decode"]:
            g = gp + gd
            if g > p.G:
                continue
            counts = [0] * len(p.table)
            for j, v in {**ch_p, **ch_d}.items():
                counts[j] = v
            key = (-min(cp, cd) / g, g, tuple(counts))
            if best is None or key < best:
                best = key
    if best is None:
        raise InfeasibleError("gpu_capacity", f"{p.G} GPUs cannot host a max-frequency placement")
    return make_plan(best[2], p, system="maxfreq-distserve")


def cluster_saturation(table: Sequence[ConfigTableEntry], G: int) -> float:
    """Largest rate a max-frequency placement on ``G`` GPUs can serve (no margin)."""
    idx = _top_freq_indices(table)
    best = 0.0
    pre = _phase_combos(table, idx, "prefill", G, 0.0)
    dec = _phase_combos(table, idx, "decode", G, 0.0)
    for gp, cp, _ in pre:
        for gd, cd, _ in dec:
            if gp + gd <= G:
                best = max(best, min(cp, cd))
    return best


# -- window planning -------------------------------------------------------

def target_rate(predicted: Trace, peak_window_s: float = 10.0) -> float:
    return peak_rps(predicted, peak_window_s)


def plan_window(history: Trace, cluster_gpus: int, slo: SLOSpec, models: ModelSet, policy: SchedulerPolicy,
                ladder: FrequencyLadder, tp_options: Sequence[int], alpha: float = 0.05,
                peak_window_s: float = 10.0, search: SearchParams = SearchParams(),
                system: str = "place-only", table: Sequence[ConfigTableEntry] | None = None,
                reference: Trace | None = None, window_ms: float | None = None) -> PlacementPlan:
    """Forecast the next window from ``history`` and provision for its peak rate.

    ``reference`` overrides the trace used to build the configuration table
    (the forecast by default); ``table`` skips table construction entirely.
    """
    predicted = predict_next_window(history, window_ms)
    R = target_rate(predicted, peak_window_s)
    if table is None:
        cands = candidate_configs(ladder, tp_options)
        table = build_config_table(cands, reference or predicted, slo, models, policy, search)
    prob = PlacementProblem(tuple(table), cluster_gpus, R, alpha)
    if system == "maxfreq-distserve":
        return solve_distserve(prob)
    plan = solve_placement(prob)
    plan.system = system
    return plan


# -- files -----------------------------------------------------------------

def plan_to_dict(plan: PlacementPlan) -> dict:
    return {
        "version": PLAN_FILE_VERSION,
        "system": plan.system,
        "G": plan.G, "R": plan.R, "alpha": plan.alpha, "objective": plan.objective,
        "counts": list(plan.counts),
        "instances": [{"phase": i.config.phase, "tp": i.config.tp, "freq_mhz": i.config.base_freq_mhz,
                       "weight": i.weight} for i in plan.instances],
        "table": [entry_to_dict(e) for e in plan.table],
    }


def entry_to_dict(e: ConfigTableEntry) -> dict:
    return {"phase": e.config.phase, "tp": e.config.tp, "freq_mhz": e.config.base_freq_mhz,
            "R_c": e.R_c, "E_c": None if math.isnan(e.E_c) else e.E_c, "G_c": e.G_c, "error": e.error}


def entry_from_dict(d: dict) -> ConfigTableEntry:
    return ConfigTableEntry(InstanceConfig(d["phase"], int(d["tp"]), float(d["freq_mhz"])), float(d["R_c"]),
                            math.nan if d.get("E_c") is None else float(d["E_c"]), int(d["G_c"]), d.get("error"))


def plan_from_dict(d: dict) -> PlacementPlan:
    if d.get("version") != PLAN_FILE_VERSION:
        raise ParameterError(f"unsupported plan file version {d.get('version')!r}")
    table = tuple(entry_from_dict(e) for e in d.get("table", []))
    plan = PlacementPlan(tuple(d.get("counts", [])), table, int(d["G"]), float(d["R"]), float(d["alpha"]),
                         float(d["objective"]), system=d.get("system", "place-only"))
    plan.instances = [PlannedInstance(InstanceConfig(i["phase"], int(i["tp"]), float(i["freq_mhz"])),
                                      float(i["weight"]), -1) for i in d["instances"]]
    return plan


def save_plan(plan: PlacementPlan, path: str | Path) -> None:
    Path(path).write_text(json.dumps(plan_to_dict(plan), indent=1, sort_keys=True))


def load_plan(path: str | Path) -> PlacementPlan:
    return plan_from_dict(json.loads(Path(path).read_text()))


def trace_digest(t: Trace) -> str:
    h = hashlib.sha256()
    for r in t.requests:
        h.update(f"{r.arrival!r},{r.input_len},{r.output_len};".encode())
    h.update(repr(t.duration_ms).encode())
    return h.hexdigest()[:16]


class TableCache:
    """Config tables on disk keyed by (models, trace, SLO, scheduler, search, candidates)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def key(self, models: ModelSet, trace: Trace, slo: SLOSpec, policy: SchedulerPolicy, search: SearchParams,
            candidates: Sequence[InstanceConfig]) -> str:
        blob = json.dumps({"models": models.digest(), "trace": trace_digest(trace), "slo": asdict(slo),
                           "policy": asdict(policy), "search": asdict(search),
                           "cands": [asdict(c) for c in candidates]}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:24]

    def get_or_build(self, candidates: Sequence[InstanceConfig], trace: Trace, slo: SLOSpec, models: ModelSet,
                     policy: SchedulerPolicy, search: SearchParams = SearchParams(), jobs: int = 1
                     ) -> list[ConfigTableEntry]:
        path = self.root / f"table-{self.key(models, trace, slo, policy, search, candidates)}.json"
        if path.exists():
            return [entry_from_dict(e) for e in json.loads(path.read_text())]
        table = build_config_table(candidates, trace, slo, models, policy, search, jobs=jobs)
        self.root.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps([entry_to_dict(e) for e in table], indent=1))
        return table
