"""Matched-filter detector with a Neyman-Pearson threshold.

The correlator output over the last N activity samples is compared with
``gamma = Qinv(p_fa) * sigma * sqrt(energy)``. The output state machine starts in
TRAFFIC, rises to TRAFFIC as soon as the correlator exceeds gamma and releases to GAP
only after it stayed below ``release_ratio * gamma`` for ``hold`` seconds.
"""
from __future__ import annotations
import collections
import dataclasses
import logging
import math
from typing import IO, Optional, Sequence, Union

import numpy as np
from pyee.base import EventEmitter
from scipy import special

from .activity import NoiseModel, PulseTemplate
from .const import (
    DEFAULT_DETECTOR_RATE,
    DEFAULT_HOLD,
    DEFAULT_P_FA,
    DEFAULT_RELEASE_RATIO,
    State,
)
from .errors import DetectorError
from .util import ensure_parent, format_float

_LOGGER = logging.getLogger(__name__)

EVENT_CSV_HEADER = ("timestamp", "state", "correlator", "gamma", "margin")
_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)
_NEWTON_STEPS = 2


def q_func(x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Return standard normal tail probability Q(x)."""
    value = 0.5 * special.erfc(np.asarray(x, dtype=np.float64) / _SQRT2)
    return float(value) if np.ndim(value) == 0 else value


def q_inv(p: float) -> float:
    """Return x with Q(x) = p."""
    if not 0.0 < p < 1.0:
        raise DetectorError(f"Q inverse needs 0 < p < 1, got {p}")
    x = -float(special.ndtri(p))
    for _ in range(_NEWTON_STEPS):
        density = math.exp(-0.5 * x * x) / _SQRT2PI
        if density == 0.0:
            break
        x += (q_func(x) - p) / density
    return x


def pd_from_snr(p_fa: float, snr: float) -> float:
    """Return detection probability at amplitude SNR sqrt(energy) / sigma."""
    return q_func(q_inv(p_fa) - snr)


@dataclasses.dataclass(frozen=True)
class DetectorConfig:
    """Detector settings."""

    p_fa: float = DEFAULT_P_FA
    rate: float = DEFAULT_DETECTOR_RATE
    release_ratio: float = DEFAULT_RELEASE_RATIO
    hold: float = DEFAULT_HOLD

    def __post_init__(self):
        if not 0.0 < self.p_fa <= 0.5:
            raise ValueError("p_fa must lie in (0, 0.5]")
        if not self.rate > 0:
            raise ValueError("rate must be > 0")
        if not 0.0 < self.release_ratio <= 1.0:
            raise ValueError("release_ratio must lie in (0, 1]")
        if self.hold < 0:
            raise ValueError("hold must be >= 0")


@dataclasses.dataclass(frozen=True)
class ThresholdSpec:
    """Decision threshold and the quantities it was derived from."""

    gamma: float
    sigma: float
    energy: float
    p_fa: float
    log_lambda: float

    @property
    def likelihood_ratio(self) -> float:
        """Return the equivalent likelihood-ratio threshold (informational)."""
        try:
            return math.exp(self.log_lambda)
        except OverflowError:
            return math.inf

    def recompute(self) -> float:
        """Return gamma recomputed from p_fa, sigma and energy."""
        return q_inv(self.p_fa) * self.sigma * math.sqrt(self.energy)


def _check_inputs(noise: NoiseModel, template: PulseTemplate):
    if not noise.sigma > 0:
        raise DetectorError("Noise sigma must be > 0")
    if not template.energy > 0:
        raise DetectorError("Template energy must be > 0")


def np_threshold(cfg: DetectorConfig, noise: NoiseModel, template: PulseTemplate) -> ThresholdSpec:
    """Return Neyman-Pearson threshold for cfg.p_fa."""
    _check_inputs(noise, template)
    energy = template.energy
    sigma = noise.sigma
    gamma = q_inv(cfg.p_fa) * sigma * math.sqrt(energy)
    if not math.isfinite(gamma):
        raise DetectorError("Threshold is not finite")
    log_lambda = (2.0 * gamma - energy) / (2.0 * sigma * sigma)
    return ThresholdSpec(gamma, sigma, energy, cfg.p_fa, log_lambda)


def predicted_pd(cfg: DetectorConfig, noise: NoiseModel, template: PulseTemplate) -> float:
    """Return closed-form detection probability Q(Qinv(p_fa) - sqrt(energy) / sigma)."""
    _check_inputs(noise, template)
    return pd_from_snr(cfg.p_fa, math.sqrt(template.energy) / noise.sigma)


def correlate(
    window: Union[Sequence[float], np.ndarray], template: Union[PulseTemplate, np.ndarray]
) -> float:
    """Return sum of window[n] * template[n]."""
    values = template.values if isinstance(template, PulseTemplate) else np.asarray(template)
    window = np.asarray(window, dtype=np.float64)
    if window.shape != values.shape:
        raise DetectorError(f"Window length {window.size} differs from template length {values.size}")
    return float(np.dot(window, values))


@dataclasses.dataclass(frozen=True)
class CrossingState:
    """Published detector output. correlator and margin are NaN during warm-up."""

    state: State
    margin: float
    timestamp: float
    correlator: float = math.nan

    @property
    def warming_up(self) -> bool:
        """Return True before the window is full."""
        return math.isnan(self.correlator)


@dataclasses.dataclass
class DetectorState:
    """Mutable detector memory. Single writer."""

    template: PulseTemplate
    window: collections.deque = None
    state: State = State.TRAFFIC
    below_since: Optional[float] = None
    samples: int = 0

    def __post_init__(self):
        if self.window is None:
            self.window = collections.deque(maxlen=len(self.template))

    @property
    def ready(self) -> bool:
        """Return True once N samples have been observed."""
        return len(self.window) == self.window.maxlen


def step(
    memory: DetectorState,
    activity_value: float,
    threshold: ThresholdSpec,
    cfg: DetectorConfig,
    timestamp: Optional[float] = None,
) -> CrossingState:
    """Feed one activity sample at detector rate. Return published state."""
    if timestamp is None:
        timestamp = memory.samples / cfg.rate
    memory.window.append(float(activity_value))
    memory.samples += 1
    if not memory.ready:
        memory.state = State.TRAFFIC
        return CrossingState(State.TRAFFIC, math.nan, timestamp)

    correlator = correlate(np.fromiter(memory.window, dtype=np.float64), memory.template)
    gamma = threshold.gamma
    if correlator > gamma:
        memory.state = State.TRAFFIC
        memory.below_since = None
    elif memory.state == State.TRAFFIC:
        if correlator < cfg.release_ratio * gamma:
            if memory.below_since is None:
                memory.below_since = timestamp
            if timestamp - memory.below_since >= cfg.hold - 1e-9:
                memory.state = State.GAP
                memory.below_since = None
        else:
            memory.below_since = None
    return CrossingState(memory.state, correlator - gamma, timestamp, correlator)


class Detector:
    """Stateful detector emitting ``state_change`` with the new CrossingState."""

    def __init__(
        self,
        template: PulseTemplate,
        noise: NoiseModel,
        cfg: Optional[DetectorConfig] = None,
    ):
        self.cfg = cfg or DetectorConfig()
        if not math.isclose(template.rate, self.cfg.rate, rel_tol=1e-9):
            raise DetectorError(
                f"Template rate {template.rate} Hz differs from detector rate {self.cfg.rate} Hz"
            )
        self.template = template
        self.noise = noise
        self.threshold = np_threshold(self.cfg, noise, template)
        self._memory = DetectorState(template)
        self._current: Optional[CrossingState] = None
        self._events = EventEmitter()

    def __repr__(self):
        return (
            f"<{self.__module__}.{self.__class__.__name__} "
            f"p_fa={self.cfg.p_fa} gamma={self.threshold.gamma:.6g} "
            f"state={self._memory.state.name}>"
        )

    @property
    def events(self) -> EventEmitter:
        """Return Event Emitter."""
        return self._events

    @property
    def current(self) -> Optional[CrossingState]:
        """Return last published state."""
        return self._current

    @property
    def predicted_pd(self) -> float:
        """Return closed-form detection probability."""
        return predicted_pd(self.cfg, self.noise, self.template)

    def reset(self):
        """Return to warm-up."""
        self._memory = DetectorState(self.template)
        self._current = None

    def step(self, activity_value: float, timestamp: Optional[float] = None) -> CrossingState:
        """Feed one sample. Emit state_change when the state differs from the last one."""
        previous = self._current
        current = step(self._memory, activity_value, self.threshold, self.cfg, timestamp)
        self._current = current
        if previous is None or previous.state != current.state:
            _LOGGER.debug("State %s at t=%.3f", current.state.name, current.timestamp)
            self._events.emit("state_change", current)
        return current


def format_state_line(state: CrossingState) -> str:
    """Return stdout line for a state change."""
    return f"t={state.timestamp:.3f} STATE={state.state.name}"


class EventLog:
    """Write one CSV row per detector step."""

    def __init__(self, path: str, gamma: float):
        self.path = path
        self.gamma = gamma
        self._file: Optional[IO] = None

    def __enter__(self) -> EventLog:
        self._file = open(ensure_parent(self.path), "w", newline="", encoding="utf-8")
        self._file.write(",".join(EVENT_CSV_HEADER) + "\n")
        return self

    def __exit__(self, *_):
        self.close()

    def write(self, state: CrossingState):
        """Append row."""
        self._file.write(
            ",".join(
                (
                    format_float(state.timestamp),
                    state.state.name,
                    format_float(state.correlator),
                    format_float(self.gamma),
                    format_float(state.margin),
                )
            )
            + "\n"
        )

    def close(self):
        """Close file."""
        if self._file is not None:
            self._file.close()
            self._file = None
