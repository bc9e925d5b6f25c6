"""Iteration-level latency and power models on interpolated grids.

A table is a dense grid over named axes. The latency tables and the decode
power table use ``(sum_len, n_requests, tp, freq)``; the prefill power table
may drop ``n_requests`` and use ``(sum_len, tp, freq)``. Values between knots
are multilinear interpolations; queries outside the grid are clamped to the
boundary and counted in ``clamp_count``.
"""

from __future__ import annotations

import json
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ModelError, ParameterError

MODEL_FILE_VERSION = 1
FULL_AXES = ("sum_len", "n_requests", "tp", "freq")
PREFILL_POWER_AXES = ("sum_len", "tp", "freq")
PHASES = ("prefill", "decode")


@dataclass(frozen=True)
class BatchFeatures:
    n_requests: int
    sum_len: int
    mean_len: float
    std_len: float

    @classmethod
    def from_lengths(cls, lengths: Sequence[int]) -> BatchFeatures:
        n = len(lengths)
        if n == 0:
            raise ParameterError("a batch needs at least one request")
        total = sum(lengths)
        mean = total / n
        var = sum((x - mean) ** 2 for x in lengths) / n
        return cls(n, int(total), float(mean), math.sqrt(var))

    def axis_value(self, name: str) -> float:
        if name == "sum_len":
            return float(self.sum_len)
        if name == "n_requests":
            return float(self.n_requests)
        raise KeyError(name)


@dataclass(frozen=True)
class FrequencyLadder:
    freqs_mhz: tuple[float, ...]

    def __post_init__(self):
        f = tuple(float(x) for x in self.freqs_mhz)
        if not f:
            raise ParameterError("frequency ladder is empty")
        if any(x <= 0 for x in f) or any(b <= a for a, b in zip(f, f[1:])):
            raise ParameterError("ladder must be positive and strictly increasing")
        object.__setattr__(self, "freqs_mhz", f)

    def __len__(self):
        return len(self.freqs_mhz)

    def __iter__(self):
        return iter(self.freqs_mhz)

    def __contains__(self, f):
        return any(math.isclose(f, x, rel_tol=0, abs_tol=1e-9) for x in self.freqs_mhz)

    @property
    def max(self) -> float:
        return self.freqs_mhz[-1]

    @property
    def min(self) -> float:
        return self.freqs_mhz[0]

    def subset(self, n: int) -> FrequencyLadder:
        """``n`` roughly evenly spaced rungs, always keeping both ends."""
        if n < 1:
            raise ParameterError("subset size must be >= 1")
        if n >= len(self.freqs_mhz):
            return self
        if n == 1:
            return FrequencyLadder((self.max,))
        idx = sorted({int(round(i)) for i in np.linspace(0, len(self.freqs_mhz) - 1, n)})
        return FrequencyLadder(tuple(self.freqs_mhz[i] for i in idx))


def _axis_weights(knots: np.ndarray, x: float) -> tuple[int, int, float, bool]:
    """Bracketing indices and upper weight for ``x``; last flag marks a clamp."""
    n = len(knots)
    if n == 1:
        return 0, 0, 0.0, x != knots[0]
    if x <= knots[0]:
        return 0, 1, 0.0, x < knots[0]
    if x >= knots[-1]:
        return n - 2, n - 1, 1.0, x > knots[-1]
    hi = bisect_right(knots, x)
    lo = hi - 1
    return lo, hi, (x - knots[lo]) / (knots[hi] - knots[lo]), False


@dataclass(eq=False)
class GridTable:
    """Dense grid over named axes with multilinear interpolation.

    ``values`` has one dimension per axis, in ``axis_names`` order.
    """

    phase: str
    axis_names: tuple[str, ...]
    knots: tuple[np.ndarray, ...]
    values: np.ndarray
    metadata: dict = field(default_factory=dict)
    clamp_count: int = field(default=0, compare=False)
    kind: str = field(init=False, default="grid")

    def __post_init__(self):
        self.axis_names = tuple(self.axis_names)
        self.knots = tuple(np.asarray(k, dtype=float) for k in self.knots)
        self.values = np.asarray(self.values, dtype=float)
        self._profile_cache: dict = {}

    @property
    def freq_axis(self) -> int:
        return self.axis_names.index("freq")

    def _check_query(self):
        if self.phase not in PHASES:
            raise ModelError(f"unknown phase {self.phase!r}")
        if len(self.knots) != len(self.axis_names) or "freq" not in self.axis_names:
            raise ModelError("table axes malformed")
        if self.values.shape != tuple(len(k) for k in self.knots) or self.values.size == 0:
            raise ModelError("value grid does not match axis knots")

    def freq_profile(self, features: BatchFeatures, tp: float) -> np.ndarray:
        """Values along the frequency knots with every other axis interpolated."""
        key = (features.sum_len, features.n_requests, tp)
        hit = self._profile_cache.get(key)
        if hit is not None:
            return hit
        self._check_query()
        v = self.values
        # contract every non-frequency axis from the last one backwards
        for ax in reversed(range(len(self.axis_names))):
            name = self.axis_names[ax]
            if name == "freq":
                continue
            x = float(tp) if name == "tp" else features.axis_value(name)
            lo, hi, w, clamped = _axis_weights(self.knots[ax], x)
            if clamped:
                self.clamp_count += 1
            a = np.take(v, lo, axis=ax)
            v = a if w == 0.0 else a * (1.0 - w) + np.take(v, hi, axis=ax) * w
        if len(self._profile_cache) > 200_000:
            self._profile_cache.clear()
        self._profile_cache[key] = v
        return v

    def predict(self, features: BatchFeatures, tp: float, freq_mhz: float) -> float:
        prof = self.freq_profile(features, tp)
        fk = self.knots[self.freq_axis]
        lo, hi, w, clamped = _axis_weights(fk, float(freq_mhz))
        if clamped:
            self.clamp_count += 1
        if w == 0.0:
            return float(prof[lo])
        return float(prof[lo] * (1.0 - w) + prof[hi] * w)

    def predict_many(self, features: BatchFeatures, tp: float, freqs: Sequence[float]) -> np.ndarray:
        return np.array([self.predict(features, tp, f) for f in freqs])

    def to_dict(self) -> dict:
        return {
            "version": MODEL_FILE_VERSION,
            "kind": self.kind,
            "phase": self.phase,
            "axes": {"names": list(self.axis_names), "knots": [k.tolist() for k in self.knots]},
            "values": self.values.ravel(order="C").tolist(),
            "metadata": self.metadata,
        }


class LatencyTable(GridTable):
    """Milliseconds per batch; must be non-increasing in frequency."""

    def __post_init__(self):
        super().__post_init__()
        self.kind = "latency"


class PowerTable(GridTable):
    """Average watts drawn by the whole instance while a batch runs."""

    def __post_init__(self):
        super().__post_init__()
        self.kind = "power"


@dataclass(eq=False)
class IdlePowerModel:
    """Idle watts per TP degree, piecewise linear in frequency."""

    freqs: dict[int, np.ndarray]
    watts: dict[int, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": MODEL_FILE_VERSION,
            "kind": "idle",
            "tp": {str(tp): {"freq": np.asarray(self.freqs[tp]).tolist(),
                             "watts": np.asarray(self.watts[tp]).tolist()} for tp in sorted(self.freqs)},
            "metadata": self.metadata,
        }


def predict_latency(table: LatencyTable, f: BatchFeatures, tp: int, freq_mhz: float) -> float:
    return table.predict(f, tp, freq_mhz)


def predict_power(table: PowerTable, f: BatchFeatures, tp: int, freq_mhz: float) -> float:
    return table.predict(f, tp, freq_mhz)


def predict_idle_power(m: IdlePowerModel, tp: int, freq_mhz: float) -> float:
    if tp not in m.freqs:
        raise ModelError(f"idle model has no entry for tp={tp}")
    return float(np.interp(freq_mhz, m.freqs[tp], m.watts[tp]))


@dataclass(frozen=True)
class Violation:
    kind: str  # "structure", "positivity" or "monotonicity"
    index: tuple[int, ...]
    detail: str


def validate_model(table: GridTable) -> list[Violation]:
    """Every grid point breaking positivity or frequency monotonicity.

    Latency must not increase with frequency, power must not decrease. A
    monotonicity violation is reported at the index of the higher-frequency
    point of the offending pair.
    """
    out: list[Violation] = []
    if not table.axis_names or len(table.knots) != len(table.axis_names):
        return [Violation("structure", (), "axis names and knot arrays disagree")]
    for name, k in zip(table.axis_names, table.knots):
        if k.size == 0:
            out.append(Violation("structure", (), f"axis {name} is empty"))
        elif np.any(np.diff(k) <= 0):
            out.append(Violation("structure", (), f"axis {name} not strictly increasing"))
    if "freq" not in table.axis_names:
        out.append(Violation("structure", (), "no freq axis"))
    if out:
        return out
    if table.values.shape != tuple(len(k) for k in table.knots):
        return [Violation("structure", (), f"values shape {table.values.shape} does not match axes")]
    v = table.values
    for idx in zip(*np.nonzero(~(v > 0))):
        out.append(Violation("positivity", tuple(int(i) for i in idx), f"value {v[idx]}"))
    fa = table.freq_axis
    d = np.diff(v, axis=fa)
    bad = d > 0 if table.kind == "latency" else d < 0
    for idx in zip(*np.nonzero(bad)):
        idx = list(int(i) for i in idx)
        idx[fa] += 1
        out.append(Violation("monotonicity", tuple(idx), f"{table.kind} moves the wrong way with frequency"))
    return out


@dataclass(eq=False)
class PhaseModels:
    latency: LatencyTable
    power: PowerTable
    idle: IdlePowerModel

    def latency_ms(self, f: BatchFeatures, tp: int, freq: float) -> float:
        return self.latency.predict(f, tp, freq)

    def power_w(self, f: BatchFeatures, tp: int, freq: float) -> float:
        return self.power.predict(f, tp, freq)

    def idle_w(self, tp: int, freq: float) -> float:
        return predict_idle_power(self.idle, tp, freq)


@dataclass(eq=False)
class ModelSet:
    prefill: PhaseModels
    decode: PhaseModels

    def phase(self, name: str) -> PhaseModels:
        if name == "prefill":
            return self.prefill
        if name == "decode":
            return self.decode
        raise ParameterError(f"unknown phase {name!r}")

    def to_dict(self) -> dict:
        return {"version": MODEL_FILE_VERSION,
                **{ph: {"latency": m.latency.to_dict(), "power": m.power.to_dict(), "idle": m.idle.to_dict()}
                   for ph, m in (("prefill", self.prefill), ("decode", self.decode))}}

    def digest(self) -> str:
        import hashlib
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# -- synthetic families ----------------------------------------------------

FAMILIES = ("compute-bound", "memory-bound")

DEFAULT_PARAMS = {
    # latency_ms = (k * sum_len + fixed_ms) * f_ref / (freq * tp**tp_exp)
    "prefill": dict(k=0.1, fixed_ms=0.0, f_ref=1980.0, tp_exp=0.9, bw_mhz=1200.0,
                    dyn_w=550.0, static_w=60.0, idle_w=45.0),
    "decode": dict(k=0.0005, fixed_ms=30.0, f_ref=1980.0, tp_exp=0.8, bw_mhz=1200.0,
                   dyn_w=450.0, static_w=60.0, idle_w=45.0),
}


def synth_latency(family: str, p: dict, sum_len, tp, freq):
    """Closed-form latency in ms, usable on scalars or numpy arrays."""
    work = p["k"] * np.asarray(sum_len, dtype=float) + p.get("fixed_ms", 0.0)
    base = work * p["f_ref"] / np.power(tp, p["tp_exp"])
    if family == "compute-bound":
        return base / freq
    if family == "memory-bound":
        # flat above the bandwidth knee, compute-limited below it
        return base / p["f_ref"] * np.maximum(1.0, p["bw_mhz"] / freq)
    raise ParameterError(f"unknown model family {family!r}")


def synth_power(family: str, p: dict, tp, freq):
    """Closed-form instance power in watts (sum over ``tp`` GPUs)."""
    x = np.asarray(freq, dtype=float) / p["f_ref"]
    if family == "compute-bound":
        per_gpu = p["dyn_w"] * x ** 3 + p["static_w"]
    elif family == "memory-bound":
        per_gpu = p["dyn_w"] * x + p["static_w"]
    else:
        raise ParameterError(f"unknown model family {family!r}")
    return np.asarray(tp, dtype=float) * per_gpu


def synth_model(profile: str, ladder: FrequencyLadder, tp_list: Sequence[int], phase: str = "prefill",
                params: dict | None = None, sum_len_knots: Sequence[float] | None = None,
                n_knots: Sequence[float] | None = None) -> tuple[LatencyTable, PowerTable, IdlePowerModel]:
    """Tables populated from a closed-form family on the given ladder.

    compute-bound: latency ~ sum_len/freq, power ~ a*freq^3 + b.
    memory-bound: latency flat above the bandwidth knee and ~1/freq below it, power ~ a*freq + b.
    """
    if profile not in FAMILIES:
        raise ParameterError(f"unknown model family {profile!r}; choose from {FAMILIES}")
    if phase not in PHASES:
        raise ParameterError(f"unknown phase {phase!r}")
    p = dict(DEFAULT_PARAMS[phase])
    p.update(params or {})
    tps = np.array(sorted(set(int(t) for t in tp_list)), dtype=float)
    freqs = np.array(ladder.freqs_mhz)
    s_knots = np.array(sum_len_knots if sum_len_knots is not None else [1.0, 1_000_000.0])
    r_knots = np.array(n_knots if n_knots is not None else [1.0, 4096.0])
    S, N, T, F = np.meshgrid(s_knots, r_knots, tps, freqs, indexing="ij")
    lat = synth_latency(profile, p, S, T, F)
    meta = {"family": profile, "params": p}
    lat_t = LatencyTable(phase, FULL_AXES, (s_knots, r_knots, tps, freqs), lat, dict(meta))
    if phase == "prefill":
        S3, T3, F3 = np.meshgrid(s_knots, tps, freqs, indexing="ij")
        pw = synth_power(profile, p, T3, F3) + 0.0 * S3
        pow_t = PowerTable(phase, PREFILL_POWER_AXES, (s_knots, tps, freqs), pw, dict(meta))
    else:
        pw = synth_power(profile, p, T, F) + 0.0 * S
        pow_t = PowerTable(phase, FULL_AXES, (s_knots, r_knots, tps, freqs), pw, dict(meta))
    idle = IdlePowerModel({int(t): freqs.copy() for t in tps},
                          {int(t): np.full(len(freqs), t * p["idle_w"]) for t in tps}, dict(meta))
    return lat_t, pow_t, idle


def synth_model_set(ladder: FrequencyLadder, tp_list: Sequence[int], prefill_family: str = "compute-bound",
                    decode_family: str = "memory-bound", prefill_params: dict | None = None,
                    decode_params: dict | None = None) -> ModelSet:
    pre = synth_model(prefill_family, ladder, tp_list, "prefill", prefill_params)
    dec = synth_model(decode_family, ladder, tp_list, "decode", decode_params)
    return ModelSet(PhaseModels(*pre), PhaseModels(*dec))


# -- model files -----------------------------------------------------------

def _table_from_dict(d: dict) -> GridTable:
    if d.get("version") != MODEL_FILE_VERSION:
        raise ModelError(f"unsupported model file version {d.get('version')!r}")
    cls = {"latency": LatencyTable, "power": PowerTable}.get(d.get("kind"))
    if cls is None:
        raise ModelError(f"unknown table kind {d.get('kind')!r}")
    try:
        names = tuple(d["axes"]["names"])
        knots = tuple(np.asarray(k, dtype=float) for k in d["axes"]["knots"])
        values = np.asarray(d["values"], dtype=float).reshape(tuple(len(k) for k in knots))
    except (KeyError, ValueError) as exc:
        raise ModelError(f"malformed table: {exc}") from exc
    return cls(d["phase"], names, knots, values, d.get("metadata", {}))


def _idle_from_dict(d: dict) -> IdlePowerModel:
    if d.get("version") != MODEL_FILE_VERSION or d.get("kind") != "idle":
        raise ModelError("malformed idle power model")
    freqs = {int(k): np.asarray(v["freq"], dtype=float) for k, v in d["tp"].items()}
    watts = {int(k): np.asarray(v["watts"], dtype=float) for k, v in d["tp"].items()}
    return IdlePowerModel(freqs, watts, d.get("metadata", {}))


def model_set_from_dict(d: dict) -> ModelSet:
    if d.get("version") != MODEL_FILE_VERSION:
        raise ModelError(f"unsupported model file version {d.get('version')!r}")
    phases = []
    for ph in PHASES:
        try:
            sub = d[ph]
        except KeyError as exc:
            raise ModelError(f"model file lacks phase {ph}") from exc
        phases.append(PhaseModels(_table_from_dict(sub["latency"]), _table_from_dict(sub["power"]),
                                  _idle_from_dict(sub["idle"])))
    return ModelSet(*phases)


def save_models(models: ModelSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(models.to_dict(), indent=1, sort_keys=True))


def load_models(path: str | Path) -> ModelSet:
    return model_set_from_dict(json.loads(Path(path).read_text()))


def load_table(path: str | Path) -> GridTable:
    return _table_from_dict(json.loads(Path(path).read_text()))
