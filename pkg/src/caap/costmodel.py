"""PQC profile catalog and the context-dependent cost model.

Every profile's intrinsic costs (compute times, key and payload sizes,
security level) are mapped under a context, a channel and a hardware profile
to the objective vector (latency, compute, communication, security). The
scalar loss used for selection is a weighted sum of those objectives after
min-max normalisation over the four-profile catalog:

    L(a) = w1*T~ + w2*C~ + w3*S~ - w4*sigma~

Vectorised ``*_matrix`` helpers evaluate the same formulas over a whole
(T, F) array of contexts; scalar functions route through them so both paths
share one implementation.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from caap.context import FIELD_RANGES, NUMERIC_FIELDS, ContextVector, Urgency, to_array
from caap.errors import CpuSaturatedError, LinkDownError


class ProfileId(str, enum.Enum):
    KYBER768 = "Kyber768"
    DILITHIUM3 = "Dilithium3"
    MCELIECE348864 = "McEliece348864"
    SPHINCSPLUS128S = "SphincsPlus128s"


# fixed tie-break order
PROFILE_ORDER = (
    ProfileId.KYBER768,
    ProfileId.DILITHIUM3,
    ProfileId.MCELIECE348864,
    ProfileId.SPHINCSPLUS128S,
)


class Family(str, enum.Enum):
    LATTICE = "lattice"
    CODE = "code"
    HASH = "hash"


@dataclass(frozen=True)
class PqcProfile:
    id: ProfileId
    family: Family
    enc_ms: float | None
    dec_ms: float | None
    verify_ms: float | None
    pk_kb: float
    payload_kb: float
    sec_bits: int
    stateless: bool
    # Benchmarked total runtime on the 1.2 GHz ARM reference board.
    runtime_ms: float
    energy_units: float = 0.0
    # Reference figures carried for reporting only.
    selection_share: str = ""
    trigger: str = ""
    honest_cost: float | None = None
    attacked_cost: float | None = None

    @property
    def compute_ms(self) -> float:
        return sum(v for v in (self.enc_ms, self.dec_ms, self.verify_ms) if v is not None)

    @property
    def s_comm_kb(self) -> float:
        return self.pk_kb + self.payload_kb


REFERENCE_CLOCK_MHZ = 1200.0
VEHICLE_CLOCK_MHZ = 800.0

# Table values; runtimes are stored unrounded (the 800 MHz column divided by
# 1.5) so the published 2-decimal figures for both boards come out exactly.
_CATALOG = (
    PqcProfile(
        ProfileId.KYBER768, Family.LATTICE, 0.25, 0.35, 0.15, 1.18, 1.08, 192, False,
        runtime_ms=2.50 / 1.5, selection_share="26.9%",
        trigger="Low-latency and compute-efficient operation",
        honest_cost=1.09, attacked_cost=1.35,
    ),
    PqcProfile(
        ProfileId.DILITHIUM3, Family.LATTICE, 0.40, 0.45, 0.30, 1.50, 2.70, 192, False,
        runtime_ms=3.75 / 1.5, selection_share="4.0%",
        trigger="High-assurance authentication phases",
        honest_cost=1.29, attacked_cost=1.55,
    ),
    PqcProfile(
        ProfileId.MCELIECE348864, Family.CODE, 0.05, 0.06, None, 240.00, 0.13, 128, False,
        runtime_ms=1.25 / 1.5, selection_share="<1%",
        trigger="Rare use under extreme noise",
        honest_cost=1.59, attacked_cost=1.85,
    ),
    PqcProfile(
        ProfileId.SPHINCSPLUS128S, Family.HASH, 0.90, None, 1.10, 0.05, 17.00, 128, True,
        runtime_ms=11.25 / 1.5, selection_share="69.1%",
        trigger="Stateless / fallback under instability",
        honest_cost=1.89, attacked_cost=2.15,
    ),
)


def catalog() -> list[PqcProfile]:
    return list(_CATALOG)


def profile(pid: ProfileId | str) -> PqcProfile:
    pid = ProfileId(pid)
    return _CATALOG[PROFILE_ORDER.index(pid)]


@dataclass(frozen=True)
class HardwareProfile:
    clock_mhz: float = VEHICLE_CLOCK_MHZ
    reference_clock_mhz: float = REFERENCE_CLOCK_MHZ

    def __post_init__(self):
        if not (self.clock_mhz > 0 and self.reference_clock_mhz > 0):
            raise ValueError("clock frequencies must be positive")

    @property
    def factor(self) -> float:
        return self.reference_clock_mhz / self.clock_mhz


@dataclass(frozen=True)
class ChannelModelConfig:
    bandwidth_hz: float = 400e6
    # fixed access, scheduling and propagation delay
    propagation_ms: float = 5.0
    retransmission_model: str = "expected_repeats"

    def __post_init__(self):
        if not (self.bandwidth_hz > 0 and math.isfinite(self.bandwidth_hz)):
            raise ValueError("bandwidth_hz must be finite and positive")
        if self.propagation_ms < 0:
            raise ValueError("propagation_ms must be >= 0")
        if self.retransmission_model != "expected_repeats":
            raise ValueError(f"unknown retransmission model {self.retransmission_model!r}")


@dataclass(frozen=True)
class ObjectiveVector:
    t_lat_ms: float
    c_comp: float
    s_comm_kb: float
    sigma_sec: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.t_lat_ms, self.c_comp, self.s_comm_kb, self.sigma_sec)


@dataclass(frozen=True)
class WeightVector:
    w1: float = 1.0
    w2: float = 0.3
    w3: float = 0.3
    w4: float = 0.3

    def __post_init__(self):
        for name in ("w1", "w2", "w3", "w4"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name}={v} must be finite and >= 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.w1, self.w2, self.w3, self.w4], dtype=float)

    @classmethod
    def from_array(cls, a) -> "WeightVector":
        return cls(*(float(v) for v in a))


# --------------------------------------------------------------------------
# Compute and latency


def scale_compute(p: PqcProfile, hw: HardwareProfile) -> PqcProfile:
    """Rescale every compute-time field from the reference clock to ``hw``."""
    if hw.clock_mhz <= 0:
        raise ValueError("clock_mhz must be positive")
    f = hw.factor

    def s(v):
        return None if v is None else v * f

    return replace(p, enc_ms=s(p.enc_ms), dec_ms=s(p.dec_ms), verify_ms=s(p.verify_ms), runtime_ms=p.runtime_ms * f)


_IDX = {f: i for i, f in enumerate(NUMERIC_FIELDS)}


def _profile_arrays(profiles: Sequence[PqcProfile]):
    compute = np.array([p.compute_ms for p in profiles])
    s_comm = np.array([p.s_comm_kb for p in profiles])
    sigma = np.array([float(p.sec_bits) for p in profiles])
    return compute, s_comm, sigma


def shannon_rate_bps(snr_db, bandwidth_hz):
    return bandwidth_hz * np.log2(1.0 + np.power(10.0, np.asarray(snr_db, dtype=float) / 10.0))


def t_net_matrix(X: np.ndarray, s_comm_kb: np.ndarray, ch: ChannelModelConfig) -> np.ndarray:
    """Network delay in ms for each context row (T,) and payload (P,)."""
    X = np.atleast_2d(X)
    per = X[:, _IDX["per"]]
    if np.any(per >= 1.0):
        raise LinkDownError("packet error rate 1: link is down")
    rate = shannon_rate_bps(X[:, _IDX["snr_db"]], ch.bandwidth_hz)
    bits = 8.0 * 1024.0 * np.asarray(s_comm_kb, dtype=float)
    tx_ms = bits[None, :] / rate[:, None] * 1000.0
    return tx_ms / (1.0 - per)[:, None] + ch.propagation_ms


def t_lat_matrix(
    X: np.ndarray,
    ch: ChannelModelConfig,
    hw: HardwareProfile,
    profiles: Sequence[PqcProfile] | None = None,
) -> np.ndarray:
    """End-to-end latency (T, P): load-scaled compute plus network delay."""
    profiles = catalog() if profiles is None else profiles
    X = np.atleast_2d(X)
    load = X[:, _IDX["cpu_load"]]
    if np.any(load >= 1.0):
        raise CpuSaturatedError("cpu_load 1: compute never completes")
    compute, s_comm, _ = _profile_arrays(profiles)
    crypto = (compute * hw.factor)[None, :] / (1.0 - load)[:, None]
    return crypto + t_net_matrix(X, s_comm, ch)


def t_net(p: PqcProfile, x: ContextVector, ch: ChannelModelConfig) -> float:
    return float(t_net_matrix(x.numeric()[None, :], np.array([p.s_comm_kb]), ch)[0, 0])


def t_lat(p: PqcProfile, x: ContextVector, ch: ChannelModelConfig, hw: HardwareProfile) -> float:
    return float(t_lat_matrix(x.numeric()[None, :], ch, hw, [p])[0, 0])


def objective_arrays(X: np.ndarray, ch, hw, profiles: Sequence[PqcProfile] | None = None) -> np.ndarray:
    """Objective tensor (T, P, 4): latency, cycle proxy, comm KB, sec bits."""
    profiles = catalog() if profiles is None else profiles
    X = np.atleast_2d(X)
    compute, s_comm, sigma = _profile_arrays(profiles)
    T = X.shape[0]
    out = np.empty((T, len(profiles), 4))
    out[:, :, 0] = t_lat_matrix(X, ch, hw, profiles)
    out[:, :, 1] = (compute * hw.factor * hw.clock_mhz)[None, :]
    out[:, :, 2] = s_comm[None, :]
    out[:, :, 3] = sigma[None, :]
    return out


def objectives(p: PqcProfile, x: ContextVector, ch, hw) -> ObjectiveVector:
    row = objective_arrays(x.numeric()[None, :], ch, hw, [p])[0, 0]
    return ObjectiveVector(*(float(v) for v in row))


# --------------------------------------------------------------------------
# Normalised weighted loss


@dataclass(frozen=True)
class Normalizer:
    """Per-objective min and span, taken over the catalog at one context."""

    lo: np.ndarray
    span: np.ndarray

    @classmethod
    def over(cls, vectors) -> "Normalizer":
        F = np.array([v.as_tuple() if isinstance(v, ObjectiveVector) else v for v in vectors], dtype=float)
        lo = F.min(axis=0)
        return cls(lo, F.max(axis=0) - lo)

    def apply(self, f) -> np.ndarray:
        f = np.asarray(f.as_tuple() if isinstance(f, ObjectiveVector) else f, dtype=float)
        safe = np.where(self.span > 0, self.span, 1.0)
        return np.where(self.span > 0, (f - self.lo) / safe, 0.0)


_SIGN = np.array([1.0, 1.0, 1.0, -1.0])


def weighted_loss(f: ObjectiveVector, w: WeightVector, norm: Normalizer | None = None) -> float:
    """w1*T + w2*C + w3*S - w4*sigma over normalised components.

    Without ``norm`` the raw objective values are weighted, which is only
    meaningful for dimension-free inputs.
    """
    v = norm.apply(f) if norm is not None else np.asarray(f.as_tuple(), dtype=float)
    return float(np.dot(w.as_array() * _SIGN, v))


def normalized_objectives(F: np.ndarray) -> np.ndarray:
    """Min-max normalise (T, P, 4) objectives over the profile axis."""
    lo = F.min(axis=1, keepdims=True)
    span = F.max(axis=1, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (F - lo) / safe, 0.0)


def loss_matrix(F: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Losses (T, P) from objectives (T, P, 4) and weights (4,) or (T, 4)."""
    N = normalized_objectives(F)
    W = np.atleast_2d(W) * _SIGN
    return np.einsum("tpk,tk->tp", N, np.broadcast_to(W, (N.shape[0], 4)))


def profile_losses(x: ContextVector, w: WeightVector, ch, hw) -> np.ndarray:
    """Loss of each catalog profile (in ``PROFILE_ORDER``) at context ``x``."""
    F = objective_arrays(x.numeric()[None, :], ch, hw)
    return loss_matrix(F, w.as_array())[0]


def argmin_fixed_order(losses: np.ndarray, allowed=None, atol: float = 1e-12) -> int:
    """Index of the smallest loss; near-ties go to the earliest profile."""
    idx = range(len(losses)) if allowed is None else [int(i) for i in allowed]
    best = None
    for i in idx:
        if best is None or losses[i] < losses[best] - atol:
            best = i
    return best


def gap_from_losses(losses: np.ndarray) -> float:
    s = np.sort(np.asarray(losses, dtype=float))
    return float(np.min(np.diff(s))) if len(s) > 1 else math.inf


def loss_gap(x: ContextVector, w: WeightVector, ch, hw) -> float:
    """Minimum pairwise loss separation over the catalog at ``x`` (0 = tie)."""
    return gap_from_losses(profile_losses(x, w, ch, hw))


# --------------------------------------------------------------------------
# Lipschitz estimation


_RANGE_LO = np.array([FIELD_RANGES[f][0] for f in NUMERIC_FIELDS])
_RANGE_SPAN = np.array([FIELD_RANGES[f][1] - FIELD_RANGES[f][0] for f in NUMERIC_FIELDS])


@dataclass(frozen=True)
class ContextRegion:
    """Axis-aligned box of physical context values plus urgency classes."""

    lo: np.ndarray
    hi: np.ndarray
    urgencies: tuple[Urgency, ...] = tuple(Urgency)

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != (len(NUMERIC_FIELDS),) or hi.shape != lo.shape:
            raise ValueError("region bounds must have one entry per numeric field")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("region bounds must be finite")
        if np.any(hi < lo):
            raise ValueError("region has hi < lo")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def around(cls, xs: Sequence[ContextVector], pad: float = 0.0) -> "ContextRegion":
        """Bounding box of ``xs``, padded by ``pad`` normalised units."""
        A = to_array(xs)
        lo = A.min(axis=0) - pad * _RANGE_SPAN
        hi = A.max(axis=0) + pad * _RANGE_SPAN
        lo = np.maximum(lo, _RANGE_LO)
        hi = np.minimum(hi, _RANGE_LO + _RANGE_SPAN)
        # keep clear of the latency singularities
        for f, cap in (("per", 0.99), ("cpu_load", 0.99)):
            hi[_IDX[f]] = min(hi[_IDX[f]], cap)
        urg = tuple(sorted({x.urgency for x in xs}, key=list(Urgency).index))
        return cls(lo, hi, urg)

    @property
    def degenerate(self) -> bool:
        return bool(np.all(self.hi - self.lo == 0))


def _lipschitz_scan(fn: Callable[[np.ndarray, Urgency], np.ndarray], region: ContextRegion, samples: int, seed: int) -> float:
    """Finite-difference sup of |fn(x) - fn(x')| / ||x - x'|| over sampled pairs.

    ``fn`` maps a (n, F) array of physical contexts to (n, P) values; the
    returned estimate is the max over pairs and output columns. Pairs are
    drawn as uniform base points plus every region corner, each paired with a
    random L-infinity step of a few scales; steps stay inside the region.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    if region.degenerate:
        return 0.0
    rng = np.random.default_rng(seed)
    width_n = (region.hi - region.lo) / _RANGE_SPAN
    active = width_n > 0
    lo_n = (region.lo - _RANGE_LO) / _RANGE_SPAN
    hi_n = (region.hi - _RANGE_LO) / _RANGE_SPAN

    k = int(active.sum())
    base = lo_n + rng.random((samples, len(NUMERIC_FIELDS))) * width_n
    if k <= 12:
        corners = np.array(np.meshgrid(*[[0.0, 1.0]] * k)).reshape(k, -1).T
        cb = np.tile(lo_n, (len(corners), 1))
        cb[:, active] = lo_n[active] + corners * width_n[active]
        base = np.vstack([base, cb])
    n = len(base)
    scales = np.array([1e-4, 1e-3, 1e-2, 5e-2])
    h = scales[rng.integers(0, len(scales), n)][:, None] * np.minimum(1.0, width_n.max())
    direction = rng.uniform(-1, 1, (n, len(NUMERIC_FIELDS)))
    direction[:, ~active] = 0.0
    signs = rng.choice([-1.0, 1.0], size=(n, len(NUMERIC_FIELDS)))
    # half the pairs step along pure sign patterns (the steepest L-inf directions)
    half = n // 2
    direction[:half] = np.where(active, signs[:half], 0.0)
    amax = np.max(np.abs(direction), axis=1, keepdims=True)
    direction = direction / np.where(amax > 0, amax, 1.0)
    other = np.clip(base + h * direction, lo_n, hi_n)
    # reflect steps that were clipped flat back into the box
    flat = np.max(np.abs(other - base), axis=1) == 0
    if np.any(flat):
        other[flat] = np.clip(base[flat] - h[flat] * direction[flat], lo_n, hi_n)
    dist = np.max(np.abs(other - base), axis=1)
    ok = dist > 0
    Xa = _RANGE_LO + base[ok] * _RANGE_SPAN
    Xb = _RANGE_LO + other[ok] * _RANGE_SPAN
    d = dist[ok]
    best = 0.0
    for u in region.urgencies:
        fa = fn(Xa, u)
        fb = fn(Xb, u)
        ratio = np.max(np.abs(fa - fb), axis=1) / d
        best = max(best, float(np.max(ratio)) if len(ratio) else 0.0)
    return best


WeightSource = WeightVector | Callable[[np.ndarray, Urgency], np.ndarray]


def weights_for(w: WeightSource, X: np.ndarray, urgency: Urgency) -> np.ndarray:
    if isinstance(w, WeightVector):
        return w.as_array()
    return w(X, urgency)


def estimate_lipschitz(
    w: WeightSource,
    ch: ChannelModelConfig,
    hw: HardwareProfile,
    region: ContextRegion,
    samples: int = 4000,
    seed: int = 0,
) -> float:
    """Estimate K such that |L(a, x) - L(a, x')| <= K * ||x - x'|| for every
    profile ``a`` over ``region``.

    ``w`` may be a fixed weight vector or a callable mapping a context array
    and urgency to a (n, 4) weight array, so context-dependent weighting is
    part of the estimated loss.
    """

    def fn(X, u):
        F = objective_arrays(X, ch, hw)
        return loss_matrix(F, weights_for(w, X, u))

    return _lipschitz_scan(fn, region, samples, seed)


def estimate_latency_lipschitz(ch, hw, region: ContextRegion, samples: int = 4000, seed: int = 0) -> float:
    """Same scan as :func:`estimate_lipschitz` over raw latency (ms)."""
    return _lipschitz_scan(lambda X, u: t_lat_matrix(X, ch, hw), region, samples, seed)


# --------------------------------------------------------------------------
# Calibration scenario

#: Context at which single-context checks (ordering under manipulation,
#: oracle examples) are evaluated. Moderate channel, light CPU load,
#: telemetry traffic so the dynamic weights reduce to the base weights.
NOMINAL_CONTEXT = ContextVector(
    timestamp_ms=0,
    snr_db=12.0,
    per=0.05,
    speed_mps=20.0,
    accel_mps2=0.0,
    connectivity_horizon_s=8.0,
    urgency=Urgency.TELEMETRY,
    cpu_load=0.3,
)
NOMINAL_CHANNEL = ChannelModelConfig()
NOMINAL_HARDWARE = HardwareProfile()

#: Additive gap between the honest and attacked cost columns of the catalog.
ATTACK_MAGNITUDE = 0.26
