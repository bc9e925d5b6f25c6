"""Request traces: generation, scaling, windowing and burstiness analysis.

All times inside a :class:`Trace` are milliseconds from the trace start.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class Request:
    id: int
    arrival: float
    input_len: int
    output_len: int

    def __post_init__(self):
        if self.arrival < 0:
            raise ParameterError(f"request {self.id}: negative arrival {self.arrival}")
        if self.input_len < 1 or self.output_len < 1:
            raise ParameterError(f"request {self.id}: token lengths must be >= 1")


@dataclass(frozen=True)
class Trace:
    requests: tuple[Request, ...]
    duration_ms: float
    seed: int | None = None

    def __post_init__(self):
        reqs = tuple(self.requests)
        object.__setattr__(self, "requests", reqs)
        ids = set()
        prev = -math.inf
        for r in reqs:
            if r.arrival < prev:
                raise ParameterError("requests must be sorted by arrival")
            prev = r.arrival
            if r.id in ids:
                raise ParameterError(f"duplicate request id {r.id}")
            ids.add(r.id)
        if reqs and self.duration_ms < reqs[-1].arrival:
            raise ParameterError("duration_ms shorter than the last arrival")

    def __len__(self) -> int:
        return len(self.requests)

    def __iter__(self):
        return iter(self.requests)

    @property
    def arrivals(self) -> np.ndarray:
        return np.fromiter((r.arrival for r in self.requests), dtype=float, count=len(self.requests))

    @property
    def mean_rps(self) -> float:
        if self.duration_ms <= 0:
            return 0.0
        return len(self.requests) / (self.duration_ms / 1000.0)


@dataclass(frozen=True)
class LengthDistribution:
    """Source of (input_len, output_len) pairs.

    Either an empirical sample list (drawn uniformly with replacement) or a
    lognormal per dimension given by the mean and sigma of the underlying
    normal. Sampled lengths are rounded and floored at 1.
    """

    samples: tuple[tuple[int, int], ...] | None = None
    input_mu: float = 6.0
    input_sigma: float = 0.8
    output_mu: float = 5.0
    output_sigma: float = 0.8
    max_input: int | None = None
    max_output: int | None = None

    @classmethod
    def fixed(cls, input_len: int, output_len: int) -> LengthDistribution:
        return cls(samples=((int(input_len), int(output_len)),))

    @classmethod
    def from_file(cls, path: str | Path) -> LengthDistribution:
        """Load pairs from a CSV with ``input_len,output_len`` columns."""
        pairs = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                pairs.append((int(row["input_len"]), int(row["output_len"])))
        if not pairs:
            raise ParameterError(f"{path}: no length samples")
        return cls(samples=tuple(pairs))

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        if self.samples is not None:
            pool = np.asarray(self.samples, dtype=np.int64)
            if pool.ndim != 2 or pool.shape[1] != 2 or len(pool) == 0:
                raise ParameterError("length samples must be a non-empty list of pairs")
            idx = rng.integers(0, len(pool), size=n)
            inp, out = pool[idx, 0], pool[idx, 1]
        else:
            inp = np.rint(rng.lognormal(self.input_mu, self.input_sigma, size=n)).astype(np.int64)
            out = np.rint(rng.lognormal(self.output_mu, self.output_sigma, size=n)).astype(np.int64)
        inp = np.maximum(inp, 1)
        out = np.maximum(out, 1)
        if self.max_input is not None:
            inp = np.minimum(inp, self.max_input)
        if self.max_output is not None:
            out = np.minimum(out, self.max_output)
        return inp, out


@dataclass(frozen=True)
class VarianceTimeCurve:
    window_sizes_s: tuple[float, ...]
    normalized_variance: tuple[float, ...]  # nan where fewer than 2 windows fit

    def rows(self):
        return list(zip(self.window_sizes_s, self.normalized_variance))


def make_trace(arrivals: Iterable[float], lengths: Iterable[tuple[int, int]],
               duration_ms: float | None = None, seed: int | None = None) -> Trace:
    """Build a trace from parallel arrival / length sequences (ids follow order)."""
    arr = [float(a) for a in arrivals]
    lens = list(lengths)
    if len(arr) != len(lens):
        raise ParameterError("arrivals and lengths differ in size")
    order = sorted(range(len(arr)), key=lambda i: (arr[i], i))
    reqs = tuple(Request(k, arr[i], int(lens[i][0]), int(lens[i][1])) for k, i in enumerate(order))
    if duration_ms is None:
        duration_ms = arr[order[-1]] if arr else 0.0
    return Trace(reqs, float(duration_ms), seed)


def gen_gamma_trace(mean_rps: float, shape: float, duration_ms: float,
                    lengths: LengthDistribution, seed: int) -> Trace:
    """Gamma-renewal arrivals with expected rate ``mean_rps``.

    Gaps are Gamma(shape, scale=1/(shape*mean_rps)) seconds; shape 1 is Poisson,
    shape < 1 is burstier than Poisson.
    """
    if not mean_rps > 0 or not shape > 0 or not duration_ms > 0:
        raise ParameterError("mean_rps, shape and duration_ms must all be > 0")
    rng = np.random.default_rng(seed)
    scale_ms = 1000.0 / (shape * mean_rps)
    expected = mean_rps * duration_ms / 1000.0
    chunk = int(expected + 6 * math.sqrt(expected / shape) + 16)
    t = 0.0
    parts = []
    while True:
        gaps = rng.gamma(shape, scale_ms, size=chunk)
        times = t + np.cumsum(gaps)
        keep = times[times < duration_ms]
        parts.append(keep)
        if len(keep) < len(times):
            break
        t = float(times[-1])
    arrivals = np.concatenate(parts) if parts else np.empty(0)
    inp, out = lengths.sample(rng, len(arrivals))
    reqs = tuple(Request(i, float(a), int(x), int(y))
                 for i, (a, x, y) in enumerate(zip(arrivals, inp, out)))
    return Trace(reqs, float(duration_ms), seed)


def downsample_trace(t: Trace, keep_prob: float, seed: int) -> Trace:
    """Keep each request independently with probability ``keep_prob``.

    One uniform draw per request is made from ``seed``, so for a fixed seed the
    kept sets are nested: a larger ``keep_prob`` keeps a superset.
    """
    if not 0 < keep_prob <= 1:
        raise ParameterError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if keep_prob == 1:
        return t
    u = np.random.default_rng(seed).random(len(t.requests))
    kept = tuple(r for r, ui in zip(t.requests, u) if ui < keep_prob)
    return Trace(kept, t.duration_ms, t.seed)


def time_dilate(t: Trace, factor: float) -> Trace:
    if not factor > 0:
        raise ParameterError(f"dilation factor must be > 0, got {factor}")
    reqs = tuple(replace(r, arrival=r.arrival * factor) for r in t.requests)
    return Trace(reqs, t.duration_ms * factor, t.seed)


def scale_to_rate(t: Trace, target_rps: float) -> Trace:
    """Time-dilate ``t`` so that its average rate equals ``target_rps``."""
    if not target_rps > 0 or t.mean_rps == 0:
        raise ParameterError("need a non-empty trace and a positive target rate")
    return time_dilate(t, t.mean_rps / target_rps)


def window_counts(t: Trace, window_s: float) -> np.ndarray:
    """Arrival counts in consecutive complete windows of ``window_s`` seconds."""
    w_ms = window_s * 1000.0
    n = int(math.floor(t.duration_ms / w_ms + 1e-9))
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    idx = np.floor(t.arrivals / w_ms).astype(np.int64)
    idx = idx[idx < n]
    return np.bincount(idx, minlength=n)


def variance_time_curve(t: Trace, window_sizes_s: Sequence[float]) -> VarianceTimeCurve:
    sizes = [float(w) for w in window_sizes_s]
    if any(w <= 0 for w in sizes):
        raise ParameterError("window sizes must be > 0")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ParameterError("window sizes must be strictly increasing")
    values = []
    for w in sizes:
        counts = window_counts(t, w)
        if len(counts) < 2:
            values.append(math.nan)
            continue
        rps = counts / w
        mean = rps.mean()
        values.append(float(rps.var() / mean) if mean > 0 else math.nan)
    return VarianceTimeCurve(tuple(sizes), tuple(values))


def log_window_grid(lo_s: float = 0.1, hi_s: float = 10000.0, per_decade: int = 4) -> list[float]:
    decades = math.log10(hi_s / lo_s)
    n = int(round(decades * per_decade)) + 1
    return [float(v) for v in np.logspace(math.log10(lo_s), math.log10(hi_s), n)]


def split_windows(t: Trace, window_ms: float) -> list[Trace]:
    """Partition into half-open windows ``[k*w, (k+1)*w)``, arrivals re-based."""
    if not window_ms > 0:
        raise ParameterError("window_ms must be > 0")
    last = t.requests[-1].arrival if t.requests else 0.0
    n = max(1, math.ceil(t.duration_ms / window_ms), int(last // window_ms) + 1)
    buckets: list[list[Request]] = [[] for _ in range(n)]
    for r in t.requests:
        k = int(r.arrival // window_ms)
        buckets[k].append(replace(r, arrival=r.arrival - k * window_ms))
    out = []
    for k, reqs in enumerate(buckets):
        span = min(window_ms, max(t.duration_ms - k * window_ms, 0.0))
        if reqs:
            span = max(span, reqs[-1].arrival)
        out.append(Trace(tuple(reqs), span, t.seed))
    return out


def join_windows(windows: Sequence[Trace], window_ms: float) -> Trace:
    """Inverse of :func:`split_windows`."""
    reqs = []
    for k, w in enumerate(windows):
        reqs.extend(replace(r, arrival=r.arrival + k * window_ms) for r in w.requests)
    duration = (len(windows) - 1) * window_ms + windows[-1].duration_ms if windows else 0.0
    return Trace(tuple(reqs), duration, windows[0].seed if windows else None)


def predict_next_window(history: Trace, window_ms: float | None = None) -> Trace:
    """Forecast the next window as a verbatim copy of the most recent one.

    With ``window_ms`` set, only the trailing ``window_ms`` of ``history`` is
    used; otherwise the whole history is the forecast.
    """
    if not history.requests:
        raise ParameterError("cannot predict from an empty history")
    if window_ms is None or window_ms >= history.duration_ms:
        start, span = 0.0, history.duration_ms
    else:
        start, span = history.duration_ms - window_ms, window_ms
    reqs = tuple(replace(r, arrival=r.arrival - start) for r in history.requests if r.arrival >= start)
    return Trace(reqs, span, history.seed)


def peak_rps(t: Trace, sub_window_s: float = 10.0) -> float:
    """Largest per-sub-window request rate; partial tail windows count at full width."""
    if not t.requests:
        return 0.0
    w_ms = sub_window_s * 1000.0
    idx = np.floor(t.arrivals / w_ms).astype(np.int64)
    return float(np.bincount(idx).max() / sub_window_s)


# -- trace files -----------------------------------------------------------

TRACE_FIELDS = ("arrival_ms", "input_len", "output_len")


def save_trace(t: Trace, path: str | Path) -> None:
    path = Path(path)
    if path.suffix in (".jsonl", ".ndjson"):
        with open(path, "w") as fh:
            for r in t.requests:
                fh.write(json.dumps({"arrival_ms": r.arrival, "input_len": r.input_len,
                                     "output_len": r.output_len}) + "\n")
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for r in t.requests:
            w.writerow((repr(r.arrival), r.input_len, r.output_len))


def load_trace(path: str | Path, duration_ms: float | None = None) -> Trace:
    """Read a CSV (header required) or JSON-lines trace, chosen by extension."""
    path = Path(path)
    rows = []
    if path.suffix in (".jsonl", ".ndjson"):
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rows.append(json.loads(line))
    else:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(TRACE_FIELDS) - set(reader.fieldnames or ())
            if missing:
                raise ParameterError(f"{path}: missing columns {sorted(missing)}")
            rows = list(reader)
    return make_trace((float(r["arrival_ms"]) for r in rows),
                      [(int(r["input_len"]), int(r["output_len"])) for r in rows],
                      duration_ms=duration_ms)
