"""Activity signal, pulse template and noise model."""
from __future__ import annotations
import dataclasses
import logging
import math
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy import ndimage, stats

from .const import (
    DEFAULT_BASELINE_SECONDS,
    DEFAULT_GUARD,
    DEFAULT_K_SAL,
    DEFAULT_MIN_SEPARATION,
    DEFAULT_PEAK_FRACTION,
    DEFAULT_TEMPLATE_SECONDS,
    MAD_SCALE,
    MIN_MAXIMA,
    State,
)
from .errors import ActivityError, TrainingError
from .influx import InfluxMap, SamplePointSet
from .optflow import DenseFlowField, SparseFlow
from .util import csv_writer, format_float, read_csv_rows

_LOGGER = logging.getLogger(__name__)

ACTIVITY_CSV_HEADER = ("index", "timestamp", "activity", "state")
_GRID_TOLERANCE = 1e-9


@dataclasses.dataclass(frozen=True)
class ActivityParams:
    """Template and noise extraction parameters."""

    template_seconds: float = DEFAULT_TEMPLATE_SECONDS
    peak_fraction: float = DEFAULT_PEAK_FRACTION
    k_sal: float = DEFAULT_K_SAL
    min_separation: float = DEFAULT_MIN_SEPARATION
    guard: float = DEFAULT_GUARD
    baseline_seconds: float = DEFAULT_BASELINE_SECONDS

    def __post_init__(self):
        if not self.template_seconds > 0:
            raise ValueError("template_seconds must be > 0")
        if not 0.5 < self.peak_fraction < 1.0:
            raise ValueError("peak_fraction must lie in (0.5, 1)")
        if self.k_sal < 0 or self.min_separation < 0 or self.guard < 0:
            raise ValueError("k_sal, min_separation and guard must be >= 0")
        if not self.baseline_seconds > 0:
            raise ValueError("baseline_seconds must be > 0")

    def template_length(self, rate: float) -> int:
        """Return template length in samples at rate."""
        return max(int(round(self.template_seconds * rate)), 2)


@dataclasses.dataclass(frozen=True)
class ActivitySeries:
    """Activity samples over time."""

    indices: np.ndarray
    timestamps: np.ndarray
    values: np.ndarray
    rate: float

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64).ravel()
        timestamps = np.asarray(self.timestamps, dtype=np.float64).ravel()
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if not (len(indices) == len(timestamps) == len(values)):
            raise ActivityError("Activity indices, timestamps and values differ in length")
        if np.any(np.diff(timestamps) <= 0):
            raise ActivityError("Activity timestamps must strictly increase")
        if not np.all(np.isfinite(values)):
            raise ActivityError("Activity values must be finite")
        if not self.rate > 0:
            raise ActivityError("Activity rate must be > 0")
        for name, array in (("indices", indices), ("timestamps", timestamps), ("values", values)):
            array.setflags(write=False)
            object.__setattr__(self, name, array)

    def __len__(self) -> int:
        return len(self.values)

    @classmethod
    def from_values(cls, values: Sequence[float], rate: float, start: float = 0.0) -> ActivitySeries:
        """Return series of values on a uniform grid starting at start."""
        values = np.asarray(values, dtype=np.float64)
        indices = np.arange(len(values))
        return cls(indices, start + indices / rate, values, rate)

    @property
    def duration(self) -> float:
        """Return seconds between first and last sample."""
        if len(self) < 2:
            return 0.0
        return float(self.timestamps[-1] - self.timestamps[0])

    def to_csv(self, path: str, states: Optional[Sequence[Optional[State]]] = None):
        """Write index,timestamp,activity,state rows. State column is blank if unknown."""
        if states is not None and len(states) != len(self):
            raise ActivityError("State column length does not match series")
        with csv_writer(path, ACTIVITY_CSV_HEADER) as writer:
            for pos in range(len(self)):
                state = states[pos] if states is not None else None
                writer.writerow(
                    (
                        int(self.indices[pos]),
                        format_float(self.timestamps[pos]),
                        format_float(self.values[pos]),
                        state.name if state is not None else "",
                    )
                )

    @classmethod
    def from_csv(cls, path: str, rate: float) -> ActivitySeries:
        """Return series read from an activity CSV."""
        try:
            rows = read_csv_rows(path, ACTIVITY_CSV_HEADER[:3])
        except (OSError, ValueError) as error:
            raise ActivityError(str(error)) from error
        return cls(
            [int(row["index"]) for row in rows],
            [float(row["timestamp"]) for row in rows],
            [float(row["activity"]) for row in rows],
            rate,
        )


@dataclasses.dataclass(frozen=True)
class PulseTemplate:
    """Canonical activity pulse of one approaching vehicle."""

    values: np.ndarray
    rate: float

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        if len(values) < 1:
            raise ValueError("Template needs at least 1 sample")
        if not np.all(np.isfinite(values)):
            raise ValueError("Template values must be finite")
        if not self.rate > 0:
            raise ValueError("Template rate must be > 0")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        energy = float(np.dot(values, values))
        if not energy > 0:
            raise ValueError("Template energy must be > 0")
        object.__setattr__(self, "_energy", energy)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def energy(self) -> float:
        """Return sum of squared values."""
        return self._energy

    @property
    def peak_offset(self) -> int:
        """Return index of the maximum within the window."""
        return int(np.argmax(self.values))

    @property
    def duration(self) -> float:
        """Return window length in seconds."""
        return len(self) / self.rate


@dataclasses.dataclass(frozen=True)
class NoiseModel:
    """Gap-noise level of the activity signal."""

    sigma: float
    method: str = "robust-MAD"
    sample_count: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError("Noise sigma must be > 0")


def compute_activity(flow: SparseFlow, points: SamplePointSet) -> float:
    """Return sum over valid points of (w * m) . u with u in per-frame units."""
    if len(flow) != len(points) or not np.array_equal(flow.points, points.points):
        raise ActivityError(
            f"Flow has {len(flow)} points but the sample set has {len(points)} "
            "or the coordinates differ"
        )
    return float(np.einsum("ij,ij->", points.projections, flow.per_frame()))


def dense_activity(field: DenseFlowField, influx: InfluxMap) -> float:
    """Return activity of a dense field against every node of the map."""
    if field.grid_shape != influx.grid_shape or field.stride != influx.stride:
        raise ActivityError(
            f"Field grid {field.grid_shape} does not match map grid {influx.grid_shape}"
        )
    vectors = np.where(field.valid[..., None], field.vectors, 0.0)
    return float(np.einsum("ijk,ijk->", influx.effective(), vectors))


def robust_std(values: np.ndarray) -> float:
    """Return 1.4826 * MAD about the median."""
    return MAD_SCALE * float(stats.median_abs_deviation(values, scale=1.0))


def running_median(series: ActivitySeries, seconds: float = DEFAULT_BASELINE_SECONDS) -> np.ndarray:
    """Return centered running median over a window of seconds."""
    size = max(int(round(seconds * series.rate)), 1)
    if size % 2 == 0:
        size += 1
    return ndimage.median_filter(series.values, size=size, mode="nearest")


def find_salient_maxima(
    series: ActivitySeries,
    min_separation: float = DEFAULT_MIN_SEPARATION,
    k_sal: float = DEFAULT_K_SAL,
    baseline_seconds: float = DEFAULT_BASELINE_SECONDS,
) -> list[int]:
    """Return positions of local maxima rising k_sal robust stds above the running median.

    Maxima closer than min_separation seconds keep only the largest.
    """
    values = series.values
    if len(values) < 3:
        return []
    baseline = running_median(series, baseline_seconds)
    level = baseline + k_sal * robust_std(values)
    inner = values[1:-1]
    peak = (inner >= values[:-2]) & (inner >= values[2:]) & (inner > level[1:-1])
    candidates = np.flatnonzero(peak) + 1
    order = candidates[np.argsort(-values[candidates], kind="stable")]
    kept: list[int] = []
    for pos in order.tolist():
        stamp = series.timestamps[pos]
        if all(abs(stamp - series.timestamps[other]) >= min_separation for other in kept):
            kept.append(pos)
    kept.sort()
    _LOGGER.debug("Found %s salient maxima from %s candidates", len(kept), len(candidates))
    return kept


def extract_template(
    series: ActivitySeries,
    maxima: Sequence[int],
    length: int,
    peak_fraction: float = DEFAULT_PEAK_FRACTION,
) -> PulseTemplate:
    """Return element-wise median of windows placed mostly before each maximum."""
    if len(maxima) < MIN_MAXIMA:
        raise TrainingError(
            f"Found {len(maxima)} activity pulses, need at least {MIN_MAXIMA}; "
            "train on a longer sequence with more passing vehicles"
        )
    if length < 2:
        raise TrainingError("Template length must be >= 2")
    if not 0.5 < peak_fraction < 1.0:
        raise TrainingError("peak_fraction must lie in (0.5, 1)")
    lead = int(math.floor(peak_fraction * length + 0.5))
    windows = []
    for pos in maxima:
        start = int(pos) - lead + 1
        if start < 0 or start + length > len(series):
            continue
        windows.append(series.values[start : start + length])
    if not windows:
        raise TrainingError("Every template window runs off the activity series")
    if len(windows) < len(maxima):
        _LOGGER.warning("Discarded %s template windows at the series edges", len(maxima) - len(windows))
    values = np.maximum(np.median(np.stack(windows), axis=0), 0.0)
    try:
        template = PulseTemplate(values, series.rate)
    except ValueError as error:
        raise TrainingError(f"Degenerate pulse template: {error}") from error
    if template.peak_offset < math.ceil(0.5 * length):
        raise TrainingError(
            f"Template peak at sample {template.peak_offset} of {length}; most of the window "
            "must precede it. Check the training footage for pulses that fade in slowly"
        )
    _LOGGER.info(
        "Template from %s windows: %s samples, energy %.6g", len(windows), length, template.energy
    )
    return template


def estimate_noise(
    series: ActivitySeries, maxima: Sequence[int], guard: float = DEFAULT_GUARD
) -> NoiseModel:
    """Return robust noise level of samples farther than guard seconds from every maximum."""
    keep = np.ones(len(series), dtype=bool)
    for pos in maxima:
        keep &= np.abs(series.timestamps - series.timestamps[int(pos)]) > guard
    remaining = series.values[keep]
    if remaining.size == 0:
        raise TrainingError("No gap samples remain after excluding pulses; extend training")
    sigma = robust_std(remaining)
    if not sigma > 0:
        raise TrainingError(
            "Gap noise is degenerate (zero spread); extend training or check the input"
        )
    _LOGGER.info("Noise sigma %.6g from %s gap samples", sigma, remaining.size)
    return NoiseModel(sigma=sigma, sample_count=int(remaining.size))


def gap_correlator(
    series: ActivitySeries, maxima: Sequence[int], template: PulseTemplate, guard: float = DEFAULT_GUARD
) -> np.ndarray:
    """Return correlator values of windows lying wholly farther than guard seconds from every maximum."""
    if not math.isclose(series.rate, template.rate, rel_tol=1e-9):
        raise ActivityError(f"Series rate {series.rate} Hz differs from template rate {template.rate} Hz")
    length = len(template)
    if len(series) < length:
        return np.zeros(0)
    excluded = np.zeros(len(series), dtype=bool)
    for pos in maxima:
        excluded |= np.abs(series.timestamps - series.timestamps[int(pos)]) <= guard
    hits = np.concatenate(([0], np.cumsum(excluded)))
    clean = hits[length:] - hits[:-length] == 0
    return np.correlate(series.values, template.values, mode="valid")[clean]


def calibrate_noise(
    series: ActivitySeries,
    maxima: Sequence[int],
    template: PulseTemplate,
    guard: float = DEFAULT_GUARD,
    floor: Optional[NoiseModel] = None,
) -> NoiseModel:
    """Return the noise level whose white-noise correlator spread matches the observed one.

    sigma = 1.4826 * median(|y|) / sqrt(energy) over gap-only correlator values y, so
    interpolation and flow coupling between neighbouring samples are absorbed into sigma.
    The result never drops below ``floor``. With fewer gap windows than template samples
    the floor is returned unchanged.
    """
    values = gap_correlator(series, maxima, template, guard)
    if values.size < len(template):
        if floor is None:
            raise TrainingError(
                f"Only {values.size} gap windows of {len(template)} samples; extend training"
            )
        _LOGGER.warning(
            "Only %s gap windows for correlator calibration; keeping per-sample sigma %.6g",
            values.size,
            floor.sigma,
        )
        return floor
    # spread about zero: a gap offset raises sigma as well
    sigma = MAD_SCALE * float(np.median(np.abs(values))) / math.sqrt(template.energy)
    if floor is not None and sigma <= floor.sigma:
        _LOGGER.info(
            "Correlator sigma %.6g from %s windows is below per-sample sigma %.6g; keeping the latter",
            sigma,
            values.size,
            floor.sigma,
        )
        return floor
    if not sigma > 0:
        raise TrainingError("Gap correlator is degenerate (zero spread); extend training")
    if floor is not None:
        _LOGGER.info(
            "Noise sigma %.6g from %s gap correlator windows (%.2f x per-sample sigma)",
            sigma,
            values.size,
            sigma / floor.sigma,
        )
    return NoiseModel(sigma=sigma, method="correlator-MAD", sample_count=int(values.size))


def _grid_count(span: float, rate: float) -> int:
    return int(math.floor(span * rate + _GRID_TOLERANCE)) + 1


def resample(
    data: Union[ActivitySeries, PulseTemplate], target_rate: float
) -> Union[ActivitySeries, PulseTemplate]:
    """Return data linearly interpolated onto a uniform grid at target_rate.

    The grid starts at the first sample and never extends past the last one.
    """
    if not target_rate > 0:
        raise ActivityError("Target rate must be > 0")
    if len(data) < 2:
        raise ActivityError("Resampling needs at least 2 samples")
    if isinstance(data, PulseTemplate):
        times = np.arange(len(data)) / data.rate
        count = _grid_count(times[-1], target_rate)
        grid = np.arange(count) / target_rate
        return PulseTemplate(np.interp(grid, times, data.values), target_rate)
    start = data.timestamps[0]
    count = _grid_count(data.timestamps[-1] - start, target_rate)
    indices = np.arange(count)
    grid = start + indices / target_rate
    values = np.interp(grid, data.timestamps, data.values)
    return ActivitySeries(indices, grid, values, target_rate)


class StreamResampler:
    """Online counterpart of ``resample``: emits grid samples as input arrives."""

    def __init__(self, rate: float):
        if not rate > 0:
            raise ActivityError("Target rate must be > 0")
        self.rate = rate
        self._start: Optional[float] = None
        self._last: Optional[tuple[float, float]] = None
        self._next = 0

    def reset(self):
        """Forget all input."""
        self._start = None
        self._last = None
        self._next = 0

    def push(self, timestamp: float, value: float) -> list[tuple[float, float]]:
        """Add one sample. Return (timestamp, value) grid samples now determined."""
        if self._start is None:
            self._start = timestamp
            self._last = (timestamp, value)
            self._next = 1
            return [(timestamp, value)]
        last_time, last_value = self._last
        if timestamp <= last_time:
            raise ActivityError(f"Non-increasing activity timestamp {timestamp}")
        out = []
        limit = _grid_count(timestamp - self._start, self.rate)
        slope = (value - last_value) / (timestamp - last_time)
        while self._next < limit:
            stamp = self._start + self._next / self.rate
            clamped = min(max(stamp, last_time), timestamp)
            out.append((stamp, last_value + slope * (clamped - last_time)))
            self._next += 1
        self._last = (timestamp, value)
        return out

    def extend(self, samples: Iterable[tuple[float, float]]) -> list[tuple[float, float]]:
        """Push many samples. Return all grid samples emitted."""
        out = []
        for timestamp, value in samples:
            out.extend(self.push(timestamp, value))
        return out
