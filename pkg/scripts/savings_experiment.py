"""Energy of the three policies at a fraction of the cluster's saturation rate.

Measures saturation from a calibration trace, regenerates the trace at
``--load`` times that rate, runs every policy and prints per-phase energy and
tail latency. Output lands in ``--out``.
"""

import argparse
import csv
from pathlib import Path

from pdvfs.cli import (config_from_mapping, config_table, experiment_models, experiment_trace, main, window_inputs,
                       write_config)
from pdvfs.placement import cluster_saturation


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--gpus", type=int, default=6)
    ap.add_argument("--duration", type=float, default=120.0, help="trace length in seconds (one window)")
    ap.add_argument("--load", type=float, default=0.67, help="fraction of saturation to run at")
    ap.add_argument("--calibration-rps", type=float, default=10.0)
    ap.add_argument("--prefill-family", default="compute-bound")
    ap.add_argument("--decode-family", default="memory-bound")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="out/savings")
    return ap.parse_args()


def main_():
    a = parse_args()
    out = Path(a.out)
    base = dict(trace_duration_s=a.duration, window_ms=a.duration * 1000.0, cluster_gpus=a.gpus,
                prefill_family=a.prefill_family, decode_family=a.decode_family, trace_seed=a.seed, jobs=a.jobs)
    calib = config_from_mapping({}, dict(base, trace_mean_rps=a.calibration_rps, output_dir=str(out / "calib")))
    trace, models = experiment_trace(calib), experiment_models(calib)
    _, ref, _ = window_inputs(trace, calib, 0)
    sat = cluster_saturation(config_table(calib, models, ref, out / "calib" / "cache"), a.gpus)
    print(f"saturation with {a.gpus} GPUs at max clock: {sat:.2f} req/s; running at {a.load * sat:.2f}")

    cfg = config_from_mapping({}, dict(base, trace_mean_rps=a.load * sat, output_dir=str(out / "run")))
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "run.ini")
    code = main(["run", "--config", str(out / "run.ini")])
    with open(out / "run" / "reports.csv") as fh:
        rows = list(csv.DictReader(fh))
    totals = {}
    for r in rows:
        totals[r["system"]] = totals.get(r["system"], 0.0) + float(r["energy_j"])
    base_e = totals.get("maxfreq-distserve")
    print(f"{'system':20s} {'energy J':>12s} {'vs maxfreq':>10s}")
    for s, e in totals.items():
        rel = f"{100 * (e / base_e - 1):+.1f}%" if base_e else "n/a"
        print(f"{s:20s} {e:12.0f} {rel:>10s}")
    print(f"per-phase deltas in {out / 'run' / 'comparison.csv'}; exit code {code}")
    return code


if __name__ == "__main__":
    raise SystemExit(main_())
