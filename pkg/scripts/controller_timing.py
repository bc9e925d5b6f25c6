"""Wall-clock cost of one prefill frequency decision, greedy against exhaustive.

Random queues are drawn for each horizon length; the table reports median
decision time and the energy gap of the greedy choice over the exhaustive
optimum (time-weighted power). Each greedy level moves one rung down by one
or two steps, and a batch that jumps two steps is never revisited by the next
level, so single-batch horizons often stop one rung above the exhaustive pick.
"""

import argparse
import statistics
import time

import numpy as np

from pdvfs.dvfs import MpcConfig, brute_force_select, greedy_freq_select, project_batches, time_weighted_power
from pdvfs.metrics import SLOSpec
from pdvfs.perfmodel import FrequencyLadder, synth_model_set
from pdvfs.simulator import QueueSnapshot, SchedulerPolicy, WaitingEntry


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--horizons", type=int, nargs="+", default=[2, 4, 6, 8])
    ap.add_argument("--ladder", type=float, nargs="+", default=[990.0, 1188.0, 1386.0, 1584.0, 1782.0, 1980.0])
    ap.add_argument("--trials", type=int, default=30)
    ap.add_argument("--brute-max", type=int, default=5, help="skip exhaustive search above this horizon")
    ap.add_argument("--seed", type=int, default=0)
    return ap.parse_args()


def timed(fn):
    t0 = time.perf_counter()
    res = fn()
    return res, (time.perf_counter() - t0) * 1000.0


def main():
    a = parse_args()
    ladder = FrequencyLadder(tuple(a.ladder))
    m = synth_model_set(ladder, [1]).prefill
    pol = SchedulerPolicy(max_batch_tokens=2048)
    rng = np.random.default_rng(a.seed)
    print(f"{'K':>3s} {'greedy ms':>10s} {'brute ms':>10s} {'power gap':>10s}")
    for K in a.horizons:
        cfg = MpcConfig(ladder, SLOSpec(), horizon_K=K, ladder_N=len(ladder))
        g_ms, b_ms, gaps = [], [], []
        for _ in range(a.trials):
            n = int(rng.integers(1, K + 1))
            lens = rng.integers(100, 1500, size=n)
            arr = np.sort(-rng.uniform(0, 200, n))
            q = QueueSnapshot(0.0, tuple(WaitingEntry(i, float(t), int(x), int(x))
                                         for i, (t, x) in enumerate(zip(arr, lens))), None, ladder.max)
            g, dt = timed(lambda: greedy_freq_select(q, cfg, m, pol, 1))
            g_ms.append(dt)
            if K <= a.brute_max:
                b, dt = timed(lambda: brute_force_select(q, cfg, m, pol, 1))
                b_ms.append(dt)
                if g.feasible:
                    proj = project_batches(q, pol, K)
                    pg = time_weighted_power(g.assignment, proj, m, 1)
                    pb = time_weighted_power(b.assignment, proj, m, 1)
                    gaps.append(pg / pb - 1 if pb > 0 else 0.0)
        brute = f"{statistics.median(b_ms):10.2f}" if b_ms else f"{'skipped':>10s}"
        gap = f"{100 * statistics.mean(gaps):9.2f}%" if gaps else f"{'n/a':>10s}"
        print(f"{K:3d} {statistics.median(g_ms):10.2f} {brute} {gap}")


if __name__ == "__main__":
    main()
