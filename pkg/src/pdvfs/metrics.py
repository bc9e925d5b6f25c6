"""Evaluation metrics: nearest-rank percentiles, energy normalization, trimming."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .errors import ComparisonError, ParameterError
from .simulator import BatchRecord, SimResult, account_energy


@dataclass(frozen=True)
class SLOSpec:
    ttft_ms: float = 600.0
    tpot_ms: float = 100.0
    percentile: float = 0.99

    def __post_init__(self):
        if not (self.ttft_ms > 0 and self.tpot_ms > 0):
            raise ParameterError("SLO bounds must be > 0")
        if not 0 < self.percentile <= 1:
            raise ParameterError("percentile must be in (0, 1]")


def nearest_rank(values: Sequence[float], p: float) -> float:
    """The ceil(p*n)-th smallest value; nan for an empty population."""
    if not 0 < p <= 1:
        raise ParameterError("percentile must be in (0, 1]")
    vals = sorted(values)
    if not vals:
        return math.nan
    # guard against p*n landing a hair above an integer in binary floating point
    k = max(1, math.ceil(p * len(vals) - 1e-9))
    return vals[k - 1]


def p99_ttft(sim: SimResult, p: float = 0.99) -> float:
    return nearest_rank([r.ttft_ms for r in sim.requests if r.ttft_ms is not None], p)


def mean_tpots(sim: SimResult) -> list[float]:
    return [r.tpot_ms for r in sim.requests if r.tpot_ms is not None]


def p99_mean_tpot(sim: SimResult, p: float = 0.99) -> float:
    return nearest_rank(mean_tpots(sim), p)


def _clip_records(records: Sequence[BatchRecord], a: float, b: float) -> list[BatchRecord]:
    out = []
    for r in records:
        s, e = max(r.start_ms, a), min(r.end_ms, b)
        if e <= s:
            continue
        if s == r.start_ms and e == r.end_ms:
            out.append(r)
        else:
            out.append(replace(r, start_ms=s, end_ms=e, energy_j=r.power_w * (e - s) / 1000.0))
    return out


def trim_steady_state(sim: SimResult, rampup_s: float = 30.0, span: tuple[float, float] | None = None
                      ) -> SimResult:
    """Drop the ramp-up and ramp-down regions.

    The retained span defaults to ``[rampup, end of request issuance]``;
    requests arriving before the ramp-up ends are excluded and batch energy is
    clipped to the retained span.
    """
    if span is None:
        span = (rampup_s * 1000.0, sim.issue_end_ms)
    a, b = span
    if b <= a:
        raise ParameterError(f"retained span [{a}, {b}] is empty")
    reqs = [r for r in sim.requests if a <= r.arrival < b or (r.arrival == b == sim.issue_end_ms)]
    insts = []
    for inst in sim.instances:
        recs = _clip_records(inst.batches, a, b)
        # frequency in force at the start of the retained span
        f0 = inst.freq_changes[0][1]
        for t, f in inst.freq_changes:
            if t <= a:
                f0 = f
        changes = [(a, f0)] + [(t, f) for t, f in inst.freq_changes if a < t < b]
        busy, idle, _ = account_energy(recs, inst.idle_watts, (a, b), freq_changes=changes)
        insts.append(replace(inst, batches=recs, freq_changes=changes, span=(a, b),
                             busy_energy_j=busy, idle_energy_j=idle))
    return SimResult(reqs, insts, (a, b), min(sim.issue_end_ms, b))


@dataclass(frozen=True)
class MetricsReport:
    window: int
    system: str
    n_requests: int
    p99_ttft_ms: float
    p99_mean_tpot_ms: float
    prefill_energy_j: float
    decode_energy_j: float
    prefill_completions: int
    generated_tokens: int
    energy_per_first_token_j: float
    energy_per_output_token_j: float
    prefill_avg_power_w: float
    decode_avg_power_w: float
    slo_violation_count: int


def _safe_div(a: float, b: float) -> float:
    return a / b if b else math.nan


def build_report(sim: SimResult, slo: SLOSpec, window: int = 0, system: str = "") -> MetricsReport:
    """Metrics over ``sim`` (usually a trimmed view).

    Prefill energy is normalized by prefill completions inside the span and
    decode energy by tokens emitted inside the span.
    """
    a, b = sim.span
    pre_e = sim.phase_energy("prefill")
    dec_e = sim.phase_energy("decode")
    done = _count_in_span(sim, a, b)
    tokens = _tokens_in_span(sim, a, b)
    dur_s = (b - a) / 1000.0
    viol = 0
    for r in sim.requests:
        bad_ttft = r.ttft_ms is not None and r.ttft_ms > slo.ttft_ms
        bad_tpot = r.tpot_ms is not None and r.tpot_ms > slo.tpot_ms
        viol += bad_ttft or bad_tpot
    return MetricsReport(
        window=window, system=system, n_requests=len(sim.requests),
        p99_ttft_ms=p99_ttft(sim, slo.percentile), p99_mean_tpot_ms=p99_mean_tpot(sim, slo.percentile),
        prefill_energy_j=pre_e, decode_energy_j=dec_e, prefill_completions=done, generated_tokens=tokens,
        energy_per_first_token_j=_safe_div(pre_e, done), energy_per_output_token_j=_safe_div(dec_e, tokens),
        prefill_avg_power_w=_safe_div(pre_e, dur_s), decode_avg_power_w=_safe_div(dec_e, dur_s),
        slo_violation_count=int(viol))


def _count_in_span(sim: SimResult, a: float, b: float) -> int:
    return sum(1 for r in sim.requests if r.prefill_done_ms is not None and a <= r.prefill_done_ms <= b)


def _tokens_in_span(sim: SimResult, a: float, b: float) -> int:
    return sum(1 for r in sim.requests for t in r.token_times if a <= t <= b)


REPORT_COLUMNS = ("window", "system", "phase", "n_requests", "p99_ttft_ms", "p99_mean_tpot_ms",
                  "energy_j", "units", "energy_per_unit_j", "avg_power_w",
                  "energy_per_first_token_j", "energy_per_output_token_j", "slo_violation_count")


def report_rows(rep: MetricsReport) -> list[dict]:
    rows = []
    for phase in ("prefill", "decode"):
        pre = phase == "prefill"
        rows.append({
            "window": rep.window, "system": rep.system, "phase": phase, "n_requests": rep.n_requests,
            "p99_ttft_ms": rep.p99_ttft_ms, "p99_mean_tpot_ms": rep.p99_mean_tpot_ms,
            "energy_j": rep.prefill_energy_j if pre else rep.decode_energy_j,
            "units": rep.prefill_completions if pre else rep.generated_tokens,
            "energy_per_unit_j": rep.energy_per_first_token_j if pre else rep.energy_per_output_token_j,
            "avg_power_w": rep.prefill_avg_power_w if pre else rep.decode_avg_power_w,
            "energy_per_first_token_j": rep.energy_per_first_token_j,
            "energy_per_output_token_j": rep.energy_per_output_token_j,
            "slo_violation_count": rep.slo_violation_count,
        })
    return rows


def _fmt(x) -> str:
    return repr(x) if isinstance(x, float) else str(x)


def write_reports_csv(reports: Sequence[MetricsReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for rep in reports:
            for row in report_rows(rep):
                w.writerow({k: _fmt(v) for k, v in row.items()})


@dataclass(frozen=True)
class ComparisonRow:
    window: int
    system: str
    phase: str
    energy_per_unit_j: float
    delta_pct: float  # relative to the baseline; negative means savings
    ttft_pass: bool
    tpot_pass: bool


def pct_delta(value: float, baseline: float) -> float:
    return _safe_div(value - baseline, baseline) * 100.0


def compare_runs(reports: Sequence[MetricsReport], baseline: str, slo: SLOSpec) -> list[ComparisonRow]:
    """Per-phase normalized-energy deltas against the ``baseline`` system."""
    if len(reports) < 2:
        raise ComparisonError("need at least two reports")
    windows = {r.window for r in reports}
    if len(windows) != 1:
        raise ComparisonError(f"reports span several windows: {sorted(windows)}")
    base = [r for r in reports if r.system == baseline]
    if len(base) != 1:
        raise ComparisonError(f"baseline {baseline!r} must appear exactly once")
    base = base[0]
    rows = []
    for r in reports:
        for phase, val, ref in (("prefill", r.energy_per_first_token_j, base.energy_per_first_token_j),
                                ("decode", r.energy_per_output_token_j, base.energy_per_output_token_j)):
            rows.append(ComparisonRow(r.window, r.system, phase, val, pct_delta(val, ref),
                                      r.p99_ttft_ms <= slo.ttft_ms, r.p99_mean_tpot_ms <= slo.tpot_ms))
    return rows
