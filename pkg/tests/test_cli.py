import csv
import math

import pytest

from pdvfs.cli import ExperimentConfig, load_config, main, write_config
from pdvfs.placement import load_plan
from pdvfs.workload import load_trace, make_trace, save_trace

SMALL = {
    "trace_mean_rps": "2", "trace_duration_s": "20", "max_input": "512", "max_output": "32",
    "ladder_mhz": "1188,1980", "tp_options": "1", "cluster_gpus": "4", "window_ms": "20000",
    "reference_duration_s": "10", "search_tol_rps": "0.5", "rampup_s": "5",
}


def write_ini(path, values):
    body = "[experiment]\n" + "".join(f"{k} = {v}\n" for k, v in values.items())
    path.write_text(body)
    return path


def test_gen_trace_roundtrip(tmp_path):
    out = tmp_path / "t.csv"
    assert main(["gen-trace", "--mean-rps", "10", "--duration", "600", "--seed", "3", "--out", str(out)]) == 0
    t = load_trace(out)
    assert abs(len(t.requests) - 6000) <= 300
    save_trace(t, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == out.read_bytes()


def test_gen_trace_seed_determinism(tmp_path):
    a, b, c = (tmp_path / n for n in ("a.csv", "b.csv", "c.csv"))
    for path, seed in ((a, "1"), (b, "1"), (c, "2")):
        main(["gen-trace", "--duration", "30", "--seed", seed, "--out", str(path)])
    assert a.read_bytes() == b.read_bytes() != c.read_bytes()


def test_gen_trace_rescale(tmp_path):
    src, dst = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["gen-trace", "--mean-rps", "4", "--duration", "60", "--out", str(src)])
    assert main(["gen-trace", "--from-trace", str(src), "--scale-rps", "8", "--out", str(dst)]) == 0
    assert load_trace(dst).mean_rps == pytest.approx(8.0)


def test_config_roundtrip(tmp_path):
    cfg = load_config(write_ini(tmp_path / "c.ini", {**SMALL, "horizon_K": "5"}))
    assert cfg.horizon_K == 5 and cfg.ladder_mhz == (1188.0, 1980.0) and cfg.tp_options == (1,)
    write_config(cfg, tmp_path / "back.ini")
    assert load_config(tmp_path / "back.ini") == cfg
    assert load_config(tmp_path / "c.ini", {"alpha": "0.1"}).alpha == 0.1


def test_missing_config_is_io_error(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.ini")]) == 3


def test_unknown_key_is_parameter_error(tmp_path):
    assert main(["run", "--config", str(write_ini(tmp_path / "c.ini", {"not_a_key": "1"}))]) == 2
    assert main(["run", "--config", str(write_ini(tmp_path / "d.ini", {"policies": "fastest"}))]) == 2


def test_plan_infeasible_exit_code(tmp_path):
    ini = write_ini(tmp_path / "c.ini", {**SMALL, "cluster_gpus": "1", "output_dir": str(tmp_path / "o")})
    assert main(["plan", "--config", str(ini), "--out", str(tmp_path / "p.json")]) == 4


def test_plan_maxfreq_uses_top_rung(tmp_path):
    ini = write_ini(tmp_path / "c.ini", {**SMALL, "output_dir": str(tmp_path / "o")})
    out = tmp_path / "p.json"
    assert main(["plan", "--config", str(ini), "--policy", "maxfreq-distserve", "--out", str(out)]) == 0
    plan = load_plan(out)
    assert {i.config.base_freq_mhz for i in plan.instances} == {1980.0}
    assert plan.violations() == []


def test_run_skips_empty_window(tmp_path):
    # busy, silent, busy: the middle window has a forecast but no arrivals
    arrivals = [100.0 * k for k in range(50)] + [20_000.0 + 100.0 * k for k in range(50)]
    trace = make_trace(arrivals, [(200, 8)] * 100, duration_ms=30_000.0)
    save_trace(trace, tmp_path / "t.csv")
    ini = write_ini(tmp_path / "c.ini", {**SMALL, "trace_path": str(tmp_path / "t.csv"), "window_ms": "10000",
                                         "windows": "1"})
    assert main(["run", "--config", str(ini), "--out", str(tmp_path / "o")]) == 0
    with open(tmp_path / "o" / "reports.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(r["window"] == "1" for r in rows)
    assert all(math.isnan(float(r["energy_per_unit_j"])) for r in rows)
    assert (tmp_path / "o" / "manifest.json").exists()


def test_analyze_rows_and_periodic_zero(tmp_path):
    t = make_trace([100.0 * k for k in range(6000)], [(10, 1)] * 6000, duration_ms=600_000.0)
    save_trace(t, tmp_path / "t.csv")
    out = tmp_path / "v.csv"
    assert main(["analyze", "--trace", str(tmp_path / "t.csv"), "--out", str(out), "--lo-s", "1", "--hi-s", "100",
                 "--per-decade", "2"]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["window_s"]) for r in rows] == pytest.approx([1, 10 ** 0.5, 10, 10 ** 1.5, 100])
    # windows that hold a whole number of periods see no variance at all
    for r in rows:
        w = float(r["window_s"])
        if abs(w * 10 - round(w * 10)) < 1e-9:
            assert float(r["normalized_variance"]) == pytest.approx(0.0, abs=1e-12)


def test_default_config_valid():
    cfg = ExperimentConfig()
    assert cfg.slo.ttft_ms == 600.0 and cfg.ladder.max == 1980.0
