"""Context vectors: synthesis, CSV ingest, hashing and bounded perturbation.

A context vector is the time-indexed snapshot a vehicle uses to pick a PQC
profile: channel quality, mobility, environment, CPU load and the urgency of
the traffic being protected.

Distances between contexts are measured in the L-infinity norm over the
numeric fields after min-max normalisation against ``FIELD_RANGES``. All
drift, perturbation and prediction-error bounds in this package use that norm.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import io
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from caap.errors import ConfigError, TraceFormatError


class Urgency(str, enum.Enum):
    SAFETY = "safety"
    CONTROL = "control"
    TELEMETRY = "telemetry"


# safety > control > telemetry is the only ordering constraint known.
URGENCY_WEIGHTS = {Urgency.SAFETY: 1.0, Urgency.CONTROL: 0.5, Urgency.TELEMETRY: 0.2}

NUMERIC_FIELDS = (
    "snr_db",
    "per",
    "speed_mps",
    "accel_mps2",
    "connectivity_horizon_s",
    "cpu_load",
    "visibility_m",
    "ambient_temp_c",
)

# Normalisation ranges, also the hard validity box for perturbation.
FIELD_RANGES: dict[str, tuple[float, float]] = {
    "snr_db": (-5.0, 35.0),
    "per": (0.0, 1.0),
    "speed_mps": (0.0, 50.0),
    "accel_mps2": (-5.0, 5.0),
    "connectivity_horizon_s": (0.5, 30.0),
    "cpu_load": (0.0, 1.0),
    "visibility_m": (0.0, 2000.0),
    "ambient_temp_c": (-30.0, 50.0),
}

# Synthesised traces stay inside these; per/cpu_load keep clear of 1 where
# the latency model diverges.
TRACE_LIMITS: dict[str, tuple[float, float]] = {
    **FIELD_RANGES,
    "per": (0.0, 0.6),
    "cpu_load": (0.0, 0.9),
}

CSV_COLUMNS = ("timestamp_ms",) + NUMERIC_FIELDS + ("urgency",)

# Fixed-point precision for canonical hashing: value * 10**HASH_DECIMALS,
# rounded half-even, packed as signed 64-bit big-endian.
# Perturbations and injected errors stay clear of the latency singularities
# at per = 1 and cpu_load = 1.
OPERATING_RANGES = {**FIELD_RANGES, "per": (0.0, 0.99), "cpu_load": (0.0, 0.99)}

HASH_DECIMALS = 4
DIGEST_SIZE = 32

_LO = np.array([FIELD_RANGES[f][0] for f in NUMERIC_FIELDS])
_SPAN = np.array([FIELD_RANGES[f][1] - FIELD_RANGES[f][0] for f in NUMERIC_FIELDS])


@dataclass(frozen=True)
class ContextVector:
    timestamp_ms: int
    snr_db: float
    per: float
    speed_mps: float
    accel_mps2: float
    connectivity_horizon_s: float
    urgency: Urgency
    cpu_load: float
    visibility_m: float = 1000.0
    ambient_temp_c: float = 15.0

    def __post_init__(self):
        if not isinstance(self.urgency, Urgency):
            object.__setattr__(self, "urgency", Urgency(self.urgency))
        problems = validate_fields(self)
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def urgency_weight(self) -> float:
        return URGENCY_WEIGHTS[self.urgency]

    def numeric(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in NUMERIC_FIELDS], dtype=float)

    def normalized(self) -> np.ndarray:
        return (self.numeric() - _LO) / _SPAN

    def with_numeric(self, values: Sequence[float]) -> "ContextVector":
        return replace(self, **{f: float(v) for f, v in zip(NUMERIC_FIELDS, values)})


def validate_fields(x) -> list[str]:
    problems = []
    if not 0.0 <= x.per <= 1.0:
        problems.append(f"per={x.per} outside [0, 1]")
    if not 0.0 <= x.cpu_load <= 1.0:
        problems.append(f"cpu_load={x.cpu_load} outside [0, 1]")
    if x.speed_mps < 0:
        problems.append(f"speed_mps={x.speed_mps} negative")
    if x.connectivity_horizon_s <= 0:
        problems.append(f"connectivity_horizon_s={x.connectivity_horizon_s} not positive")
    if x.visibility_m < 0:
        problems.append(f"visibility_m={x.visibility_m} negative")
    for f in NUMERIC_FIELDS:
        if not math.isfinite(getattr(x, f)):
            problems.append(f"{f} not finite")
    return problems


def normalized_distance(a: ContextVector, b: ContextVector) -> float:
    """L-infinity distance over min-max normalised numeric fields."""
    return float(np.max(np.abs(a.normalized() - b.normalized())))


def to_array(xs: Sequence[ContextVector]) -> np.ndarray:
    """Stack the numeric fields of a sequence of contexts into a (T, F) array."""
    if not xs:
        return np.empty((0, len(NUMERIC_FIELDS)))
    return np.array([x.numeric() for x in xs], dtype=float)


def clamp_to_ranges(values: np.ndarray, limits: Mapping[str, tuple[float, float]] = FIELD_RANGES) -> np.ndarray:
    lo = np.array([limits[f][0] for f in NUMERIC_FIELDS])
    hi = np.array([limits[f][1] for f in NUMERIC_FIELDS])
    return np.clip(values, lo, hi)


def clamp_toward(values: np.ndarray, origin: np.ndarray, limits: Mapping[str, tuple[float, float]] = OPERATING_RANGES) -> np.ndarray:
    """Clamp into ``limits`` widened just enough to contain ``origin``.

    A point moved away from ``origin`` and clamped this way is never further
    from ``origin`` (per field) than before the clamp.
    """
    lo = np.array([limits[f][0] for f in NUMERIC_FIELDS])
    hi = np.array([limits[f][1] for f in NUMERIC_FIELDS])
    return np.clip(values, np.minimum(lo, origin), np.maximum(hi, origin))


# --------------------------------------------------------------------------
# Trace synthesis


@dataclass
class Segment:
    """A stretch of trace whose fields are pulled towards ``targets``."""

    duration_s: float
    targets: dict[str, float] = field(default_factory=dict)
    urgency: Urgency | None = None


DEFAULT_DRIFT = {
    "snr_db": 0.5,
    "per": 0.01,
    "speed_mps": 0.5,
    "accel_mps2": 0.2,
    "connectivity_horizon_s": 0.2,
    "cpu_load": 0.01,
    "visibility_m": 10.0,
    "ambient_temp_c": 0.02,
}

DEFAULT_INITIAL = {
    "snr_db": 18.0,
    "per": 0.05,
    "speed_mps": 20.0,
    "accel_mps2": 0.0,
    "connectivity_horizon_s": 8.0,
    "cpu_load": 0.4,
    "visibility_m": 1000.0,
    "ambient_temp_c": 15.0,
}


@dataclass
class TraceConfig:
    duration_s: float = 60.0
    step_ms: int = 50
    drift_bounds: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_DRIFT))
    urgency_mix: dict[str, float] = field(
        default_factory=lambda: {"safety": 0.3, "control": 0.3, "telemetry": 0.4}
    )
    rng_seed: int = 0
    initial: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_INITIAL))
    initial_urgency: Urgency = Urgency.TELEMETRY
    segments: list[Segment] = field(default_factory=list)
    # mean-reversion gain towards segment targets, per step
    pull: float = 0.08
    # std of the random increment as a fraction of the drift bound
    jitter: float = 0.35
    urgency_dwell_s: float = 10.0
    strict_cadence: bool = True

    def validate(self) -> None:
        if not self.duration_s > 0:
            raise ConfigError("trace.duration_s", "must be positive")
        if not self.step_ms > 0:
            raise ConfigError("trace.step_ms", "must be positive")
        if self.strict_cadence and not 20 <= self.step_ms <= 50:
            raise ConfigError("trace.step_ms", "context cadence must lie in [20, 50] ms")
        for name, bound in self.drift_bounds.items():
            if name not in NUMERIC_FIELDS:
                raise ConfigError(f"trace.drift_bounds.{name}", "unknown field")
            if not (bound >= 0 and math.isfinite(bound)):
                raise ConfigError(f"trace.drift_bounds.{name}", "must be finite and >= 0")
        mix = self.urgency_mix
        if any(p < 0 for p in mix.values()) or not math.isclose(sum(mix.values()), 1.0, abs_tol=1e-9):
            raise ConfigError("trace.urgency_mix", "must be non-negative and sum to 1")
        for key in mix:
            Urgency(key)
        for i, seg in enumerate(self.segments):
            if seg.duration_s <= 0:
                raise ConfigError(f"trace.segments[{i}].duration_s", "must be positive")
            for name in seg.targets:
                if name not in NUMERIC_FIELDS:
                    raise ConfigError(f"trace.segments[{i}].targets.{name}", "unknown field")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration_s * 1000 / self.step_ms))

    @classmethod
    def from_dict(cls, data: Mapping) -> "TraceConfig":
        data = dict(data)
        segments = [
            Segment(
                duration_s=float(s["duration_s"]),
                targets={k: float(v) for k, v in s.get("targets", {}).items()},
                urgency=Urgency(s["urgency"]) if s.get("urgency") else None,
            )
            for s in data.pop("segments", [])
        ]
        drift = dict(DEFAULT_DRIFT)
        drift.update(data.pop("drift_bounds", {}))
        initial = dict(DEFAULT_INITIAL)
        initial.update(data.pop("initial", {}))
        if "initial_urgency" in data:
            data["initial_urgency"] = Urgency(data["initial_urgency"])
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"trace.{sorted(unknown)[0]}", "unknown key")
        cfg = cls(drift_bounds=drift, initial=initial, segments=segments, **data)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["initial_urgency"] = self.initial_urgency.value
        for s in d["segments"]:
            s["urgency"] = s["urgency"].value if s["urgency"] else None
        return d


def _reflect(values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    values = np.where(values > hi, 2 * hi - values, values)
    values = np.where(values < lo, 2 * lo - values, values)
    return np.clip(values, lo, hi)


def synth_trace(config: TraceConfig) -> list[ContextVector]:
    """Generate a seeded, bounded-drift context trace.

    Every numeric field follows a bounded-increment random walk, optionally
    pulled towards the targets of the active segment, and reflected at
    ``TRACE_LIMITS``. Each per-step increment is clipped to the configured
    drift bound before reflection, and reflection never lengthens a step, so
    ``|x[t+1] - x[t]| <= bound`` holds field-wise over the whole trace.
    """
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    n = config.n_steps
    bounds = np.array([config.drift_bounds.get(f, 0.0) for f in NUMERIC_FIELDS])
    lo = np.array([TRACE_LIMITS[f][0] for f in NUMERIC_FIELDS])
    hi = np.array([TRACE_LIMITS[f][1] for f in NUMERIC_FIELDS])

    state = np.array([config.initial[f] for f in NUMERIC_FIELDS], dtype=float)
    state = np.clip(state, lo, hi)

    seg_bounds = np.cumsum([s.duration_s * 1000 for s in config.segments])
    classes = [Urgency(k) for k in config.urgency_mix]
    probs = np.array([config.urgency_mix[k.value] for k in classes])
    switch_p = min(1.0, config.step_ms / (config.urgency_dwell_s * 1000))

    urgency = config.initial_urgency
    out = []
    for k in range(n):
        t_ms = k * config.step_ms
        seg = None
        if config.segments:
            idx = int(np.searchsorted(seg_bounds, t_ms, side="right"))
            seg = config.segments[min(idx, len(config.segments) - 1)]

        # draws happen unconditionally so the stream layout never depends on
        # which branch is taken
        noise = rng.standard_normal(len(NUMERIC_FIELDS))
        u_switch = rng.random()
        u_class = rng.random()
        if k > 0:
            pull = np.zeros_like(state)
            if seg is not None:
                for i, f in enumerate(NUMERIC_FIELDS):
                    if f in seg.targets:
                        pull[i] = config.pull * (seg.targets[f] - state[i])
            step = np.clip(pull + config.jitter * bounds * noise, -bounds, bounds)
            state = _snap_to_bound(state, _reflect(state + step, lo, hi), bounds)
        if seg is not None and seg.urgency is not None:
            urgency = seg.urgency
        elif k > 0 and u_switch < switch_p and len(classes) > 0:
            pick = int(np.searchsorted(np.cumsum(probs), u_class, side="right"))
            urgency = classes[min(pick, len(classes) - 1)]
        out.append(_make(t_ms, state, urgency))
    return out


def _snap_to_bound(prev: np.ndarray, new: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    # float addition can overshoot a full-size step by an ulp
    over = np.abs(new - prev) > bounds
    while np.any(over):
        new = np.where(over, np.nextafter(new, prev), new)
        over = np.abs(new - prev) > bounds
    return new


def _make(t_ms: int, values: np.ndarray, urgency: Urgency) -> ContextVector:
    kw = {f: float(v) for f, v in zip(NUMERIC_FIELDS, values)}
    return ContextVector(timestamp_ms=int(t_ms), urgency=urgency, **kw)


# --------------------------------------------------------------------------
# CSV trace format


def write_trace(xs: Iterable[ContextVector], stream: io.TextIOBase) -> None:
    """Write contexts as CSV with a header row; reals use ``repr`` so a
    round trip through :func:`ingest_trace` is exact."""
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for x in xs:
        w.writerow([x.timestamp_ms] + [repr(float(getattr(x, f))) for f in NUMERIC_FIELDS] + [x.urgency.value])


def ingest_trace(source, columns: Sequence[str] = CSV_COLUMNS) -> list[ContextVector]:
    """Parse a CSV context trace.

    ``source`` may be bytes, str or a text/binary file object. ``columns`` is
    the declared column order; the header must name exactly those columns.
    Raises :class:`TraceFormatError` listing every malformed row by line.
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    if not text.strip():
        return []

    reader = csv.reader(io.StringIO(text))
    header = [h.strip() for h in next(reader)]
    missing = [c for c in columns if c not in header]
    if missing:
        raise TraceFormatError([(1, f"missing column {missing[0]!r}")])
    if header != list(columns):
        raise TraceFormatError([(1, f"columns {header} do not match declared order {list(columns)}")])

    out: list[ContextVector] = []
    errors: list[tuple[int, str]] = []
    prev_ts = None
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(columns):
            errors.append((lineno, f"expected {len(columns)} fields, got {len(row)}"))
            continue
        rec = dict(zip(columns, (c.strip() for c in row)))
        try:
            ts = int(rec["timestamp_ms"])
            kw = {f: float(rec[f]) for f in NUMERIC_FIELDS}
            urg = Urgency(rec["urgency"])
        except ValueError as exc:
            errors.append((lineno, str(exc)))
            continue
        probe = _Probe(**kw)
        problems = validate_fields(probe)
        if problems:
            errors.append((lineno, "; ".join(problems)))
            continue
        if prev_ts is not None and ts <= prev_ts:
            errors.append((lineno, f"timestamp_ms={ts} not after {prev_ts}"))
            continue
        prev_ts = ts
        out.append(ContextVector(timestamp_ms=ts, urgency=urg, **kw))
    if errors:
        raise TraceFormatError(errors)
    return out


@dataclass
class _Probe:
    snr_db: float
    per: float
    speed_mps: float
    accel_mps2: float
    connectivity_horizon_s: float
    cpu_load: float
    visibility_m: float
    ambient_temp_c: float


# --------------------------------------------------------------------------
# Hashing and perturbation


def canonical_bytes(x: ContextVector, bucket_ms: int | None = None) -> bytes:
    """Canonical encoding used for H(X_t).

    Layout: timestamp (int64 BE, floored to ``bucket_ms`` when given), each
    numeric field in ``NUMERIC_FIELDS`` order as round(v * 10**4) int64 BE,
    then the urgency class as one byte (0 safety, 1 control, 2 telemetry).
    """
    ts = x.timestamp_ms if not bucket_ms else (x.timestamp_ms // bucket_ms) * bucket_ms
    scale = 10**HASH_DECIMALS
    parts = [struct.pack(">q", ts)]
    for f in NUMERIC_FIELDS:
        parts.append(struct.pack(">q", int(round(getattr(x, f) * scale))))
    parts.append(bytes([list(Urgency).index(x.urgency)]))
    return b"".join(parts)


def context_hash(x: ContextVector, bucket_ms: int | None = None) -> bytes:
    """SHA-256 over :func:`canonical_bytes`; always ``DIGEST_SIZE`` bytes."""
    return hashlib.sha256(canonical_bytes(x, bucket_ms)).digest()


def perturb_context(x: ContextVector, magnitude: float, seed=None) -> ContextVector:
    """Shift every numeric field by a uniform draw in [-magnitude, magnitude]
    (normalised units), then clamp into ``OPERATING_RANGES``.

    Clamping only moves a value back towards the valid box the input already
    lies in, so the normalised L-infinity distance never exceeds ``magnitude``.
    Urgency is an onboard signal and is left untouched.
    """
    if not math.isfinite(magnitude) or magnitude < 0:
        raise ValueError("magnitude must be finite and >= 0")
    if magnitude == 0:
        return x
    rng = np.random.default_rng(seed)
    delta = rng.uniform(-magnitude, magnitude, len(NUMERIC_FIELDS)) * _SPAN
    values = clamp_toward(x.numeric() + delta, x.numeric())
    return x.with_numeric(values)


def degrade_context(x: ContextVector, magnitude: float) -> ContextVector:
    """Adversarial context manipulation: lower SNR, raise PER and CPU load by
    ``magnitude`` normalised units each. Onboard signals are left alone."""
    if magnitude < 0:
        raise ValueError("magnitude must be >= 0")
    v = x.numeric()
    origin = v.copy()
    idx = {f: i for i, f in enumerate(NUMERIC_FIELDS)}
    v[idx["snr_db"]] -= magnitude * _SPAN[idx["snr_db"]]
    v[idx["per"]] += magnitude * _SPAN[idx["per"]]
    v[idx["cpu_load"]] += magnitude * _SPAN[idx["cpu_load"]]
    v = clamp_toward(v, origin)
    return x.with_numeric(v)
