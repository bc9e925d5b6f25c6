"""Command-line entry points for traces, models, planning and windowed runs.

Exit codes: 0 success, 2 bad parameters, 3 missing or unwritable files,
4 infeasible placement, 5 two-tier run missed a latency target.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import math
import platform
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .dvfs import DecodeFreqController, DecodePolicyConfig, MpcConfig, PrefillMpcController
from .errors import InfeasibleError, ParameterError, PdvfsError
from .metrics import (MetricsReport, SLOSpec, build_report, compare_runs, trim_steady_state,
                      write_reports_csv)
from .perfmodel import FAMILIES, FrequencyLadder, ModelSet, load_models, save_models, synth_model_set
from .placement import (PlacementPlan, PlacementProblem, SearchParams, TableCache, candidate_configs,
                        entry_to_dict, save_plan, solve_distserve, solve_placement, target_rate)
from .simulator import (SchedulerPolicy, SimOptions, simulate_cluster, write_batches_csv, write_decisions_csv,
                        write_requests_csv)
from .workload import (LengthDistribution, Trace, gen_gamma_trace, load_trace, log_window_grid,
                       predict_next_window, save_trace, scale_to_rate, split_windows, variance_time_curve)

EXIT_OK, EXIT_PARAM, EXIT_IO, EXIT_INFEASIBLE, EXIT_SLO = 0, 2, 3, 4, 5
POLICIES = ("maxfreq-distserve", "place-only", "two-tier")
BASELINE = "maxfreq-distserve"


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a windowed run needs; loaded from an INI file's ``[experiment]`` section."""

    # workload: read ``trace_path`` if set, otherwise generate a Gamma trace
    trace_path: str = ""
    trace_mean_rps: float = 10.0
    trace_shape: float = 0.5
    trace_duration_s: float = 600.0
    trace_seed: int = 0
    max_input: int = 2048
    max_output: int = 1024
    # performance models: read ``models_path`` if set, otherwise synthesize
    models_path: str = ""
    prefill_family: str = "compute-bound"
    decode_family: str = "memory-bound"
    # targets and cluster
    ttft_ms: float = 600.0
    tpot_ms: float = 100.0
    percentile: float = 0.99
    cluster_gpus: int = 16
    tp_options: tuple[int, ...] = (1, 2)
    ladder_mhz: tuple[float, ...] = (990.0, 1188.0, 1386.0, 1584.0, 1782.0, 1980.0)
    # planning
    window_ms: float = 300_000.0
    windows: tuple[int, ...] = ()  # empty means every window
    policies: tuple[str, ...] = POLICIES
    alpha: float = 0.05
    peak_window_s: float = 10.0
    search_lo_rps: float = 0.05
    search_tol_rps: float = 0.1
    reference_rps: float = 0.0  # 0 means four times the forecast peak
    reference_duration_s: float = 60.0
    jobs: int = 1
    # control
    horizon_K: int = 8
    ladder_N: int = 7
    switch_latency_ms: float = 30.0
    safety_margin: float = 0.05
    kv_threshold: float = 0.9
    # scheduler
    max_batch_tokens: int = 4096
    max_batch_requests: int = 256
    kv_tokens_per_gpu: int = 100_000
    # run
    rampup_s: float = 30.0
    seed: int = 0
    output_dir: str = "out"

    def __post_init__(self):
        if not self.policies:
            raise ParameterError("at least one policy is required")
        bad = [p for p in self.policies if p not in POLICIES]
        if bad:
            raise ParameterError(f"unknown policies {bad}; choose from {list(POLICIES)}")
        if not self.window_ms > 0:
            raise ParameterError("window_ms must be > 0")
        if self.cluster_gpus < 1 or not self.tp_options:
            raise ParameterError("need cluster_gpus >= 1 and at least one tp option")
        for fam in (self.prefill_family, self.decode_family):
            if fam not in FAMILIES:
                raise ParameterError(f"unknown model family {fam!r}")

    @property
    def slo(self) -> SLOSpec:
        return SLOSpec(self.ttft_ms, self.tpot_ms, self.percentile)

    @property
    def ladder(self) -> FrequencyLadder:
        return FrequencyLadder(self.ladder_mhz)

    @property
    def scheduler(self) -> SchedulerPolicy:
        return SchedulerPolicy(self.max_batch_tokens, self.max_batch_requests, True, self.kv_tokens_per_gpu)

    @property
    def search(self) -> SearchParams:
        return SearchParams(self.search_lo_rps, self.search_tol_rps, self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _parse_value(default, raw: str):
    raw = raw.strip()
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


_TUPLE_TYPES = {"tp_options": int, "ladder_mhz": float, "windows": int, "policies": str}


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str  # keys are case-sensitive field names
    if not cp.read(path):
        raise FileNotFoundError(path)
    return config_from_mapping(dict(cp["experiment"]) if cp.has_section("experiment") else {}, overrides)


def config_from_mapping(values: dict, overrides: dict | None = None) -> ExperimentConfig:
    defaults = ExperimentConfig()
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    kw = {}
    for k, raw in {**values, **(overrides or {})}.items():
        if k not in known:
            raise ParameterError(f"unknown config key {k!r}")
        default = getattr(defaults, k)
        if not isinstance(raw, str):
            kw[k] = raw
        elif k in _TUPLE_TYPES:
            kw[k] = tuple(_TUPLE_TYPES[k](x.strip()) for x in raw.split(",") if x.strip())
        else:
            kw[k] = _parse_value(default, raw)
    try:
        return ExperimentConfig(**kw)
    except ValueError as exc:
        raise ParameterError(str(exc)) from exc


def write_config(cfg: ExperimentConfig, path: str | Path) -> None:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["experiment"] = {k: ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
                        for k, v in cfg.to_dict().items()}
    with open(path, "w") as fh:
        cp.write(fh)


# -- shared plumbing -------------------------------------------------------

def _lengths(cfg: ExperimentConfig) -> LengthDistribution:
    return LengthDistribution(max_input=cfg.max_input, max_output=cfg.max_output)


def experiment_trace(cfg: ExperimentConfig) -> Trace:
    if cfg.trace_path:
        return load_trace(cfg.trace_path)
    return gen_gamma_trace(cfg.trace_mean_rps, cfg.trace_shape, cfg.trace_duration_s * 1000.0, _lengths(cfg),
                           cfg.trace_seed)


def experiment_models(cfg: ExperimentConfig) -> ModelSet:
    if cfg.models_path:
        return load_models(cfg.models_path)
    return synth_model_set(cfg.ladder, cfg.tp_options, cfg.prefill_family, cfg.decode_family)


def _head(t: Trace, duration_ms: float) -> Trace:
    if t.duration_ms <= duration_ms:
        return t
    return Trace(tuple(r for r in t.requests if r.arrival < duration_ms), duration_ms, t.seed)


def window_inputs(trace: Trace, cfg: ExperimentConfig, w: int) -> tuple[Trace, Trace | None, float]:
    """(actual window, table reference trace, target rate) for window ``w``.

    The forecast is the previous window replayed; window 0 has no history and
    is planned from itself.
    """
    wins = split_windows(trace, cfg.window_ms)
    if not 0 <= w < len(wins):
        raise ParameterError(f"window {w} out of range (trace has {len(wins)})")
    history = wins[w - 1] if w > 0 else wins[0]
    predicted = predict_next_window(history, cfg.window_ms) if history.requests else history
    R = target_rate(predicted, cfg.peak_window_s) if predicted.requests else 0.0
    if R <= 0:
        return wins[w], None, 0.0
    ref_rps = cfg.reference_rps if cfg.reference_rps > 0 else 4.0 * R
    ref = _head(scale_to_rate(predicted, ref_rps), cfg.reference_duration_s * 1000.0)
    return wins[w], ref, R


def config_table(cfg: ExperimentConfig, models: ModelSet, ref: Trace, cache_dir: Path):
    cands = candidate_configs(cfg.ladder, cfg.tp_options)
    return TableCache(cache_dir).get_or_build(cands, ref, cfg.slo, models, cfg.scheduler, cfg.search, cfg.jobs)


def make_plan(cfg: ExperimentConfig, policy: str, table, R: float) -> PlacementPlan:
    prob = PlacementProblem(tuple(table), cfg.cluster_gpus, R, cfg.alpha)
    if policy == BASELINE:
        return solve_distserve(prob)
    plan = solve_placement(prob)
    plan.system = policy
    return plan


def controllers_for(cfg: ExperimentConfig, models: ModelSet):
    mpc = MpcConfig(cfg.ladder, cfg.slo, cfg.horizon_K, cfg.ladder_N, cfg.switch_latency_ms, cfg.safety_margin)
    dec = DecodePolicyConfig(cfg.ladder, cfg.tpot_ms, cfg.kv_threshold)

    def make(i, icfg):
        if icfg.phase == "prefill":
            return PrefillMpcController(models.prefill, mpc, cfg.scheduler, icfg.tp, f"prefill{i}")
        return DecodeFreqController(models.decode, dec, icfg.tp, f"decode{i}")
    return make


def empty_report(window: int, system: str) -> MetricsReport:
    nan = math.nan
    return MetricsReport(window, system, 0, nan, nan, 0.0, 0.0, 0, 0, nan, nan, nan, nan, 0)


def run_policy(cfg: ExperimentConfig, models: ModelSet, trace: Trace, plan: PlacementPlan, policy: str):
    if policy == "two-tier":
        opts = SimOptions(cfg.switch_latency_ms, cfg.safety_margin, cfg.ladder.max)
        sim = simulate_cluster(trace, plan, cfg.scheduler, models, controllers_for(cfg, models), opts)
    else:
        sim = simulate_cluster(trace, plan, cfg.scheduler, models, None, SimOptions(cfg.switch_latency_ms))
    return sim


def steady(sim, cfg: ExperimentConfig):
    a = cfg.rampup_s * 1000.0
    if sim.issue_end_ms <= a:
        return sim  # too short to trim; keep everything
    return trim_steady_state(sim, cfg.rampup_s)


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(outdir: Path, cfg: ExperimentConfig | None, extra: dict | None = None) -> Path:
    files = sorted(p for p in outdir.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config_digest": cfg.digest() if cfg is not None else None,
        "files": {str(p.relative_to(outdir)): _sha(p) for p in files},
        **(extra or {}),
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


# -- commands --------------------------------------------------------------

def cmd_gen_trace(args) -> int:
    if args.from_trace:
        t = load_trace(args.from_trace)
        if args.scale_rps:
            t = scale_to_rate(t, args.scale_rps)
    else:
        lengths = LengthDistribution(max_input=args.max_input, max_output=args.max_output)
        t = gen_gamma_trace(args.mean_rps, args.shape, args.duration * 1000.0, lengths, args.seed)
    save_trace(t, args.out)
    print(f"wrote {len(t.requests)} requests over {t.duration_ms / 1000:.1f} s to {args.out}")
    return EXIT_OK


def cmd_synth_model(args) -> int:
    ladder = FrequencyLadder(tuple(args.ladder))
    ms = synth_model_set(ladder, args.tp, args.prefill_family, args.decode_family)
    save_models(ms, args.out)
    print(f"wrote models ({args.prefill_family} prefill, {args.decode_family} decode) to {args.out}")
    return EXIT_OK


def _overrides(args) -> dict:
    out = {}
    for kv in getattr(args, "set", None) or []:
        if "=" not in kv:
            raise ParameterError(f"--set expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        out[k.strip()] = v
    return out


def cmd_build_table(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    trace, models = experiment_trace(cfg), experiment_models(cfg)
    _, ref, R = window_inputs(trace, cfg, args.window)
    if ref is None:
        raise ParameterError(f"window {args.window} has no forecast traffic")
    table = config_table(cfg, models, ref, Path(cfg.output_dir) / "cache")
    Path(args.out).write_text(json.dumps([entry_to_dict(e) for e in table], indent=1))
    print(f"{sum(e.usable for e in table)}/{len(table)} usable configurations; target rate {R:.3f} req/s")
    return EXIT_OK


def cmd_plan(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    trace, models = experiment_trace(cfg), experiment_models(cfg)
    _, ref, R = window_inputs(trace, cfg, args.window)
    if ref is None:
        raise ParameterError(f"window {args.window} has no forecast traffic")
    table = config_table(cfg, models, ref, Path(cfg.output_dir) / "cache")
    plan = make_plan(cfg, args.policy, table, R)
    save_plan(plan, args.out)
    slack = plan.slack()
    print(f"objective {plan.objective:.6g}  target {R:.4g} req/s  gpus {plan.gpus}/{plan.G}")
    print("slack " + "  ".join(f"{k}={v:.4g}" for k, v in slack.items()))
    for inst in plan.instances:
        print(f"  {inst.config.label()}  weight {inst.weight:.4f}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    outdir = Path(args.out or cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    trace, models = experiment_trace(cfg), experiment_models(cfg)
    save_trace(trace, outdir / "trace.csv")
    save_models(models, outdir / "models.json")
    write_config(cfg, outdir / "config.ini")
    n_windows = len(split_windows(trace, cfg.window_ms))
    wins = cfg.windows or tuple(range(n_windows))
    reports: list[MetricsReport] = []
    failed_slo = infeasible = False
    for w in wins:
        actual, ref, R = window_inputs(trace, cfg, w)
        if ref is None or not actual.requests:
            reports.extend(empty_report(w, p) for p in cfg.policies)
            continue
        table = config_table(cfg, models, ref, outdir / "cache")
        plans: dict[str, PlacementPlan] = {}
        for policy in cfg.policies:
            key = BASELINE if policy == BASELINE else "ilp"
            try:
                if key not in plans:
                    plans[key] = make_plan(cfg, policy, table, R)
            except InfeasibleError as exc:
                print(f"window {w} {policy}: infeasible ({exc.binding}): {exc}", file=sys.stderr)
                infeasible = True
                reports.append(empty_report(w, policy))
                continue
            plan = plans[key]
            plan.system = policy
            save_plan(plan, outdir / f"plan_w{w}_{policy}.json")
            sim = run_policy(cfg, models, actual, plan, policy)
            tag = f"w{w}_{policy}"
            write_requests_csv(sim, outdir / f"requests_{tag}.csv")
            write_batches_csv(sim, outdir / f"batches_{tag}.csv")
            if policy == "two-tier":
                write_decisions_csv(sim.decisions, outdir / f"decisions_{tag}.csv")
            rep = build_report(steady(sim, cfg), cfg.slo, w, policy)
            reports.append(rep)
            if policy == "two-tier" and not (rep.p99_ttft_ms <= cfg.ttft_ms and rep.p99_mean_tpot_ms <= cfg.tpot_ms):
                failed_slo = True
            print(f"window {w} {policy:18s} energy {rep.prefill_energy_j + rep.decode_energy_j:12.1f} J  "
                  f"p99 ttft {rep.p99_ttft_ms:8.1f} ms  p99 tpot {rep.p99_mean_tpot_ms:7.1f} ms")
    write_reports_csv(reports, outdir / "reports.csv")
    _write_comparison(reports, cfg, outdir / "comparison.csv")
    write_manifest(outdir, cfg, {"windows": list(wins), "policies": list(cfg.policies)})
    if infeasible:
        return EXIT_INFEASIBLE
    return EXIT_SLO if failed_slo else EXIT_OK


def _write_comparison(reports: Sequence[MetricsReport], cfg: ExperimentConfig, path: Path) -> None:
    cols = ("window", "system", "phase", "energy_per_unit_j", "delta_pct", "ttft_pass", "tpot_pass")
    rows = []
    if BASELINE in cfg.policies and len(cfg.policies) > 1:
        for w in sorted({r.window for r in reports}):
            group = [r for r in reports if r.window == w]
            if any(r.n_requests for r in group):
                rows.extend(compare_runs(group, BASELINE, cfg.slo))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for r in rows:
            wr.writerow([r.window, r.system, r.phase, repr(r.energy_per_unit_j), repr(r.delta_pct),
                         int(r.ttft_pass), int(r.tpot_pass)])


def cmd_analyze(args) -> int:
    t = load_trace(args.trace)
    sizes = log_window_grid(args.lo_s, args.hi_s, args.per_decade)
    curve = variance_time_curve(t, sizes)
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(("window_s", "normalized_variance"))
        for w, v in curve.rows():
            wr.writerow((repr(w), "nan" if math.isnan(v) else repr(v)))
    short = sum(math.isnan(v) for v in curve.normalized_variance)
    if short:
        print(f"{short} window sizes had fewer than two complete windows (written as nan)")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pdvfs", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-trace", help="generate a Gamma-arrival trace or rescale an existing one")
    g.add_argument("--mean-rps", type=float, default=5.0)
    g.add_argument("--shape", type=float, default=0.5)
    g.add_argument("--duration", type=float, default=600.0, help="seconds")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-input", type=int, default=None)
    g.add_argument("--max-output", type=int, default=None)
    g.add_argument("--from-trace", default=None, help="rescale this trace instead of generating")
    g.add_argument("--scale-rps", type=float, default=None)
    g.add_argument("--out", default="trace.csv")
    g.set_defaults(func=cmd_gen_trace)

    m = sub.add_parser("synth-model", help="write closed-form performance/power tables")
    m.add_argument("--ladder", type=float, nargs="+", default=list(ExperimentConfig.ladder_mhz))
    m.add_argument("--tp", type=int, nargs="+", default=[1, 2])
    m.add_argument("--prefill-family", choices=FAMILIES, default="compute-bound")
    m.add_argument("--decode-family", choices=FAMILIES, default="memory-bound")
    m.add_argument("--out", default="models.json")
    m.set_defaults(func=cmd_synth_model)

    for name, func, hlp in (("build-table", cmd_build_table, "goodput/energy table for one window"),
                            ("plan", cmd_plan, "solve the placement for one window")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--config", required=True)
        p.add_argument("--window", type=int, default=0)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", default="table.json" if name == "build-table" else "plan.json")
        if name == "plan":
            p.add_argument("--policy", choices=POLICIES, default="place-only")
        p.set_defaults(func=func)

    r = sub.add_parser("run", help="plan and simulate every window under each policy")
    r.add_argument("--config", required=True)
    r.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("analyze", help="variance-time curve of a trace")
    a.add_argument("--trace", required=True)
    a.add_argument("--out", default="variance_time.csv")
    a.add_argument("--lo-s", type=float, default=0.1)
    a.add_argument("--hi-s", type=float, default=10000.0)
    a.add_argument("--per-decade", type=int, default=4)
    a.set_defaults(func=cmd_analyze)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InfeasibleError as exc:
        print(f"infeasible ({exc.binding}): {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ParameterError, configparser.Error) as exc:
        print(f"parameter error: {exc}", file=sys.stderr)
        return EXIT_PARAM
    except PdvfsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARAM


if __name__ == "__main__":
    sys.exit(main())
