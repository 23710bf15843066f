"""Short-horizon context forecasting and controlled prediction error."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from caap.context import (
    FIELD_RANGES,
    NUMERIC_FIELDS,
    OPERATING_RANGES,
    ContextVector,
    clamp_to_ranges,
    clamp_toward,
)

_SPAN = np.array([FIELD_RANGES[f][1] - FIELD_RANGES[f][0] for f in NUMERIC_FIELDS])

DEFAULT_WINDOW = 8
DEFAULT_SMOOTHING = 0.6
DEFAULT_HORIZON_MS = 100
HORIZON_BAND_MS = (100, 200)


@dataclass
class PredictorState:
    """Ring buffer of recent contexts plus filter settings.

    ``smoothing`` is the weight given to the newest sample by the level and
    trend filters. ``step_ms`` is the nominal spacing of buffered samples
    and converts ``horizon_ms`` into a number of extrapolation steps.
    """

    window: int = DEFAULT_WINDOW
    smoothing: float = DEFAULT_SMOOTHING
    horizon_ms: int = DEFAULT_HORIZON_MS
    step_ms: int = 50
    allow_any_horizon: bool = False
    buffer: deque = field(init=False)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0 < self.smoothing <= 1:
            raise ValueError("smoothing must lie in (0, 1]")
        if self.step_ms <= 0:
            raise ValueError("step_ms must be positive")
        lo, hi = HORIZON_BAND_MS
        if not self.allow_any_horizon and not lo <= self.horizon_ms <= hi:
            raise ValueError(f"horizon_ms must lie in [{lo}, {hi}]")
        if self.horizon_ms < 0:
            raise ValueError("horizon_ms must be >= 0")
        self.buffer = deque(maxlen=self.window)

    def push(self, x: ContextVector) -> None:
        if self.buffer and x.timestamp_ms <= self.buffer[-1].timestamp_ms:
            raise ValueError("timestamps must increase")
        self.buffer.append(x)

    @property
    def horizon_steps(self) -> float:
        return self.horizon_ms / self.step_ms


def smooth_level_trend(history: np.ndarray, smoothing: float) -> tuple[np.ndarray, np.ndarray]:
    """Run the level and trend filters over ``history`` (n, F).

    The level starts at the oldest sample and the trend at zero; each new
    sample updates ``level <- a*x + (1-a)*level`` and
    ``trend <- a*(x - x_prev) + (1-a)*trend``.
    """
    a = smoothing
    level = history[0].astype(float).copy()
    trend = np.zeros_like(level)
    for k in range(1, len(history)):
        level = a * history[k] + (1 - a) * level
        trend = a * (history[k] - history[k - 1]) + (1 - a) * trend
    return level, trend


def predict(state: PredictorState) -> ContextVector:
    """Forecast the context ``horizon_ms`` past the newest buffered sample.

    The forecast is the smoothed level plus the smoothed per-step trend times
    the number of steps to the horizon, clamped into the valid ranges. A
    constant history is returned unchanged.
    """
    if not state.buffer:
        raise ValueError("predictor buffer is empty")
    last = state.buffer[-1]
    history = np.array([x.numeric() for x in state.buffer])
    level, trend = smooth_level_trend(history, state.smoothing)
    values = clamp_to_ranges(level + trend * state.horizon_steps, OPERATING_RANGES)
    if np.all(history == history[-1]):
        values = history[-1]
    return replace(last.with_numeric(values), timestamp_ms=last.timestamp_ms + state.horizon_ms)


@dataclass(frozen=True)
class PredictionErrorSpec:
    epsilon: float
    seed: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ValueError("epsilon must be finite and >= 0")


def inject_error(x_true: ContextVector, err: PredictionErrorSpec) -> ContextVector:
    """Return a forecast whose normalised L-infinity error is at most epsilon.

    Each numeric field is offset by an independent uniform draw in
    [-epsilon, epsilon] normalised units, then clamped into the operating
    ranges (which can only shrink the error). Urgency is kept.
    """
    if err.epsilon == 0:
        return x_true
    rng = np.random.default_rng(err.seed)
    offsets = rng.uniform(-err.epsilon, err.epsilon, len(NUMERIC_FIELDS))
    v = x_true.numeric()
    return x_true.with_numeric(clamp_toward(v + offsets * _SPAN, v))


def inject_error_array(X: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Vectorised :func:`inject_error` over a (T, F) context array."""
    if epsilon == 0:
        return X.copy()
    offsets = rng.uniform(-epsilon, epsilon, X.shape)
    lo = np.array([OPERATING_RANGES[f][0] for f in NUMERIC_FIELDS])
    hi = np.array([OPERATING_RANGES[f][1] for f in NUMERIC_FIELDS])
    return np.clip(X + offsets * _SPAN, np.minimum(lo, X), np.maximum(hi, X))
