"""Evaluation of detector event logs against simulator ground truth."""
from __future__ import annotations
import dataclasses
import json
import logging
import math
import pathlib
from typing import Optional, Sequence, Union

import numpy as np

from .const import (
    DEFAULT_HISTOGRAM_BIN,
    DEFAULT_MAX_WARNING,
    DEFAULT_ROC_POINTS,
    State,
)
from .detector import EVENT_CSV_HEADER
from .errors import EvaluationError, SceneError
from .simgen import GroundTruth, VehicleTruth
from .util import csv_writer, ensure_parent, format_float, read_csv_rows

_LOGGER = logging.getLogger(__name__)

HISTOGRAM_CSV_HEADER = ("bin_start", "bin_end", "count")
ROC_CSV_HEADER = ("threshold", "p_fa", "p_d")
MATCH_CSV_HEADER = ("vehicle_id", "first_visible", "arrival", "onset", "warning", "status")


@dataclasses.dataclass(frozen=True)
class EventTrace:
    """Detector steps read from an event log."""

    timestamps: np.ndarray
    states: np.ndarray
    correlator: np.ndarray
    gamma: np.ndarray

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def duration(self) -> float:
        """Return seconds covered by the log."""
        if len(self) < 2:
            return 0.0
        return float(self.timestamps[-1] - self.timestamps[0])

    def onsets(self) -> list[float]:
        """Return timestamps of GAP to TRAFFIC transitions."""
        traffic = self.states == int(State.TRAFFIC)
        rising = np.flatnonzero(traffic[1:] & ~traffic[:-1]) + 1
        return [float(self.timestamps[pos]) for pos in rising]

    def traffic_during(self, start: float, stop: float) -> bool:
        """Return True if any step in [start, stop] after warm-up is TRAFFIC."""
        inside = (self.timestamps >= start) & (self.timestamps <= stop) & np.isfinite(self.correlator)
        return bool(np.any(self.states[inside] == int(State.TRAFFIC)))


def read_events(path: str) -> EventTrace:
    """Return event trace from timestamp,state,correlator,gamma,margin CSV."""
    try:
        rows = read_csv_rows(path, EVENT_CSV_HEADER)
        return EventTrace(
            timestamps=np.array([float(row["timestamp"]) for row in rows]),
            states=np.array([int(State.parse(row["state"])) for row in rows], dtype=np.int64),
            correlator=np.array([float(row["correlator"]) for row in rows]),
            gamma=np.array([float(row["gamma"]) for row in rows]),
        )
    except (OSError, ValueError, KeyError) as error:
        raise EvaluationError(f"Cannot read events {path}: {error}") from error


@dataclasses.dataclass(frozen=True)
class VehicleMatch:
    """Outcome for one vehicle."""

    vehicle: VehicleTruth
    onset: Optional[float]
    covered: bool = False

    @property
    def detected(self) -> bool:
        """Return True if an onset was matched."""
        return self.onset is not None

    @property
    def warning(self) -> Optional[float]:
        """Return arrival minus onset."""
        return None if self.onset is None else self.vehicle.arrival - self.onset

    @property
    def status(self) -> str:
        """Return detected, covered or missed."""
        if self.detected:
            return "detected"
        return "covered" if self.covered else "missed"


def match_onsets(
    onsets: Sequence[float],
    vehicles: Sequence[VehicleTruth],
    max_warning: float = DEFAULT_MAX_WARNING,
) -> tuple[list[VehicleMatch], list[float]]:
    """Greedily pair each vehicle, in arrival order, with the latest unmatched onset before it.

    Return per-vehicle matches and the unmatched onsets (false alarms).
    """
    free = sorted(float(item) for item in onsets)
    used = [False] * len(free)
    matches = []
    for vehicle in sorted(vehicles, key=lambda item: item.arrival):
        best = None
        for pos, onset in enumerate(free):
            if used[pos] or onset > vehicle.arrival or vehicle.arrival - onset > max_warning:
                continue
            best = pos
        if best is None:
            matches.append(VehicleMatch(vehicle, None))
        else:
            used[best] = True
            matches.append(VehicleMatch(vehicle, free[best]))
    return matches, [onset for pos, onset in enumerate(free) if not used[pos]]


def warning_histogram(
    warnings: Sequence[float], bin_width: float = DEFAULT_HISTOGRAM_BIN
) -> list[tuple[float, float, int]]:
    """Return (bin_start, bin_end, count) rows from 0 to the largest warning."""
    if not bin_width > 0:
        raise EvaluationError("Histogram bin width must be > 0")
    if not len(warnings):
        return []
    top = max(math.ceil(max(warnings) / bin_width), 1)
    edges = np.arange(top + 1) * bin_width
    counts, _ = np.histogram(np.clip(warnings, 0.0, None), bins=edges)
    return [(float(edges[pos]), float(edges[pos + 1]), int(counts[pos])) for pos in range(top)]


def roc_curve(
    trace: EventTrace, vehicles: Sequence[VehicleTruth], points: int = DEFAULT_ROC_POINTS
) -> list[tuple[float, float, float]]:
    """Return (threshold, p_fa, p_d) by sweeping a threshold over logged correlator values.

    A step is positive while a vehicle is visible and negative otherwise; warm-up steps
    are ignored. Rows are ordered by decreasing threshold, so both rates never decrease.
    """
    valid = np.isfinite(trace.correlator)
    stamps = trace.timestamps[valid]
    values = trace.correlator[valid]
    positive = np.zeros(len(stamps), dtype=bool)
    for vehicle in vehicles:
        positive |= (stamps >= vehicle.first_visible) & (stamps <= vehicle.arrival)
    pos_values = np.sort(values[positive])
    neg_values = np.sort(values[~positive])
    if pos_values.size == 0 or neg_values.size == 0:
        _LOGGER.warning("ROC needs both positive and negative steps; skipping")
        return []
    levels = np.unique(np.quantile(values, np.linspace(0.0, 1.0, max(points, 2))))
    levels = np.concatenate(([np.inf], levels[::-1], [-np.inf]))
    rows = []
    for level in levels:
        p_d = (pos_values.size - np.searchsorted(pos_values, level, side="right")) / pos_values.size
        p_fa = (neg_values.size - np.searchsorted(neg_values, level, side="right")) / neg_values.size
        rows.append((float(level), float(p_fa), float(p_d)))
    return rows


@dataclasses.dataclass
class EvalReport:
    """Warning times, counts and curves of one evaluation."""

    matches: list
    false_alarms: list
    duration: float
    histogram: list
    roc: list

    @property
    def warnings(self) -> list[float]:
        """Return warning times of detected vehicles."""
        return [item.warning for item in self.matches if item.detected]

    @property
    def detections(self) -> int:
        """Return number of detected vehicles."""
        return sum(1 for item in self.matches if item.detected)

    @property
    def misses(self) -> int:
        """Return number of vehicles without a matched onset."""
        return len(self.matches) - self.detections

    @property
    def covered(self) -> int:
        """Return misses that were inside a TRAFFIC episode."""
        return sum(1 for item in self.matches if item.covered)

    @property
    def false_alarm_rate(self) -> float:
        """Return false alarms per hour."""
        if self.duration <= 0:
            return 0.0
        return len(self.false_alarms) * 3600.0 / self.duration

    def to_dict(self) -> dict:
        """Return JSON-compatible summary."""
        warnings = self.warnings
        return {
            "vehicles": len(self.matches),
            "detections": self.detections,
            "misses": self.misses,
            "covered": self.covered,
            "false_alarms": len(self.false_alarms),
            "false_alarms_per_hour": self.false_alarm_rate,
            "duration": self.duration,
            "warning_mean": float(np.mean(warnings)) if warnings else None,
            "warning_median": float(np.median(warnings)) if warnings else None,
            "warning_min": float(np.min(warnings)) if warnings else None,
            "onset_delay_mean": (
                float(np.mean([item.onset - item.vehicle.first_visible for item in self.matches if item.detected]))
                if warnings
                else None
            ),
            "false_alarm_times": self.false_alarms,
        }

    def write(self, out_dir: Union[str, pathlib.Path]):
        """Write report.json, matches.csv, histogram.csv and roc.csv."""
        out_dir = pathlib.Path(out_dir)
        with open(ensure_parent(out_dir / "report.json"), "w", encoding="utf-8") as _file:
            json.dump(self.to_dict(), _file, indent=2)
            _file.write("\n")
        with csv_writer(out_dir / "matches.csv", MATCH_CSV_HEADER) as writer:
            for item in self.matches:
                writer.writerow(
                    (
                        item.vehicle.vehicle_id,
                        format_float(item.vehicle.first_visible),
                        format_float(item.vehicle.arrival),
                        "" if item.onset is None else format_float(item.onset),
                        "" if item.warning is None else format_float(item.warning),
                        item.status,
                    )
                )
        with csv_writer(out_dir / "histogram.csv", HISTOGRAM_CSV_HEADER) as writer:
            for start, stop, count in self.histogram:
                writer.writerow((format_float(start), format_float(stop), count))
        with csv_writer(out_dir / "roc.csv", ROC_CSV_HEADER) as writer:
            for level, p_fa, p_d in self.roc:
                writer.writerow((format_float(level), format_float(p_fa), format_float(p_d)))
        _LOGGER.info("Evaluation written to %s", out_dir)


def evaluate(
    trace: EventTrace,
    truth: GroundTruth,
    max_warning: float = DEFAULT_MAX_WARNING,
    bin_width: float = DEFAULT_HISTOGRAM_BIN,
    roc_points: int = DEFAULT_ROC_POINTS,
    allow_empty_truth: bool = False,
) -> EvalReport:
    """Return evaluation of trace against truth."""
    if not len(truth) and not allow_empty_truth:
        raise EvaluationError("Ground truth has no vehicles to match onsets against")
    matches, false_alarms = match_onsets(trace.onsets(), truth.vehicles, max_warning)
    matches = [
        item
        if item.detected
        else dataclasses.replace(
            item, covered=trace.traffic_during(item.vehicle.first_visible, item.vehicle.arrival)
        )
        for item in matches
    ]
    warnings = [item.warning for item in matches if item.detected]
    report = EvalReport(
        matches=matches,
        false_alarms=false_alarms,
        duration=trace.duration,
        histogram=warning_histogram(warnings, bin_width),
        roc=roc_curve(trace, truth.vehicles, roc_points) if len(truth) else [],
    )
    _LOGGER.info(
        "Evaluated %s vehicles: %s detected, %s missed (%s covered), %s false alarms",
        len(matches),
        report.detections,
        report.misses,
        report.covered,
        len(false_alarms),
    )
    return report


def evaluate_files(
    events: str, truth: str, allow_empty_truth: bool = False, **kwargs
) -> EvalReport:
    """Return evaluation of an event CSV against a truth CSV."""
    try:
        ground = GroundTruth.from_csv(truth)
    except SceneError as error:
        raise EvaluationError(str(error)) from error
    return evaluate(read_events(events), ground, allow_empty_truth=allow_empty_truth, **kwargs)
