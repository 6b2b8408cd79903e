"""Training and detection pipelines."""
from __future__ import annotations
import contextlib
import dataclasses
import logging
import math
import sys
import time
from typing import IO, Callable, Iterable, Optional

import numpy as np

from . import activity, influx
from .activity import ActivityParams, ActivitySeries, PulseTemplate, StreamResampler
from .const import State
from .detector import (
    CrossingState,
    Detector,
    DetectorConfig,
    EventLog,
    format_state_line,
    predicted_pd,
)
from .errors import FrameStreamError
from .frame_io import Frame, FrameQueue, FrameStream
from .influx import InfluxParams, InfluxState, SamplePointSet
from .model import Model
from .optflow import LKParams, PyramidCache, dense_flow, sparse_flow
from .util import RateLogger, csv_writer, format_float

_LOGGER = logging.getLogger(__name__)

TRAINING_TRACE_HEADER = ("index", "timestamp", "activity", "dense_plain", "dense_intensified")


@dataclasses.dataclass
class TrainingOptions:
    """Parameters of one training run."""

    lk: LKParams = LKParams()
    influx: InfluxParams = InfluxParams()
    activity: ActivityParams = ActivityParams()
    detector: DetectorConfig = DetectorConfig()
    seed: int = 0
    queue_size: int = 8


@dataclasses.dataclass
class TrainingReport:
    """Result of training."""

    model: Model
    series: ActivitySeries
    maxima: list
    predicted_pd: float
    frames: int

    def summary(self) -> str:
        """Return multi-line operator summary."""
        model = self.model
        pfa = model.influx.pfa
        return "\n".join(
            (
                f"frames: {self.frames} ({model.influx.frames_trained} flow pairs)",
                f"image: {model.width}x{model.height}, stride {model.influx.stride}",
                f"point of first appearance: ({pfa[0]:.1f}, {pfa[1]:.1f})",
                f"sample points: {len(model.points)} of {model.points.requested}",
                f"pulses: {len(self.maxima)}",
                f"template: {len(model.template)} samples at {model.template.rate:g} Hz, "
                f"energy {model.template.energy:.6g}",
                f"sigma: {model.noise.sigma:.6g}",
                f"snr: {math.sqrt(model.template.energy) / model.noise.sigma:.3f}",
                f"predicted P_D at p_fa={model.detector.p_fa:g}: {self.predicted_pd:.4f}",
            )
        )


def _frames(stream: FrameStream, queue_size: int) -> Iterable[Frame]:
    return FrameQueue(stream, queue_size)


def _input_rate(timestamps: np.ndarray, fallback: float) -> float:
    if len(timestamps) < 2:
        return fallback
    return 1.0 / float(np.median(np.diff(timestamps)))


def train_influx(stream: FrameStream, options: TrainingOptions) -> tuple[InfluxState, int]:
    """Accumulate dense flow over frame pairs frame_skip apart. Return state and frame count."""
    params = options.influx
    skip = params.frame_skip
    cache = PyramidCache(options.lk, capacity=2)
    state = None
    anchor: Optional[Frame] = None
    count = 0
    rate = RateLogger("Influx training")
    for position, frame in enumerate(_frames(stream, options.queue_size)):
        count += 1
        if state is None:
            state = InfluxState(frame.width, frame.height, params.stride, params.offset)
        if position % skip:
            continue
        if anchor is not None:
            start = time.monotonic()
            field = dense_flow(anchor, frame, params.stride, options.lk, params.offset, cache)
            influx.accumulate(state, field)
            rate.tick(time.monotonic() - start)
        anchor = frame
    if state is None or state.frames_trained == 0:
        raise FrameStreamError(f"Training needs more than {skip} frames, got {count}")
    _LOGGER.info("Influx map trained on %s flow pairs from %s frames", state.frames_trained, count)
    return state, count


class ActivityTracker:
    """Activity of consecutive frames at fixed sample points."""

    def __init__(self, model_points: SamplePointSet, lk: LKParams):
        self.points = model_points
        self.lk = lk
        self._cache = PyramidCache(lk, capacity=2)
        self._prev: Optional[Frame] = None
        self.last_flow = None

    def reset(self):
        """Forget the previous frame."""
        self._prev = None
        self._cache.clear()

    def push(self, frame: Frame) -> Optional[float]:
        """Return activity between the previous frame and frame, None for the first frame."""
        prev, self._prev = self._prev, frame
        if prev is None:
            return None
        self.last_flow = sparse_flow(prev, frame, self.points.points, self.lk, self._cache)
        return activity.compute_activity(self.last_flow, self.points)


def train(
    stream: FrameStream, options: Optional[TrainingOptions] = None, trace_out: Optional[str] = None
) -> TrainingReport:
    """Train a model from a re-readable stream."""
    options = options or TrainingOptions()
    if not stream.reiterable:
        raise FrameStreamError("Training reads the input twice; use a file source, not stdin")
    params = options.influx

    state, frames = train_influx(stream, options)
    trained = state.to_map()
    if params.two_way:
        trained = influx.nullify_outbound(trained)
    pfa = influx.locate_pfa(trained, params.backtrack_eps)
    width, height = trained.width, trained.height
    intensified = influx.intensify(trained, pfa, params.alpha, params.rho(width, height))
    points = influx.sample_points(
        intensified,
        params.sample_count,
        params.sigma_s(width, height),
        options.seed,
        margin=options.lk.window_radius,
    )

    _LOGGER.info("Computing training activity at %s sample points", len(points))
    tracker = ActivityTracker(points, options.lk)
    indices, stamps, values, trace_rows = [], [], [], []
    dense_cache = PyramidCache(options.lk, capacity=2)
    prev = None
    for frame in _frames(stream, options.queue_size):
        value = tracker.push(frame)
        if value is not None:
            indices.append(frame.index)
            stamps.append(frame.timestamp)
            values.append(value)
            if trace_out:
                field = dense_flow(prev, frame, params.stride, options.lk, params.offset, dense_cache)
                trace_rows.append(
                    (
                        frame.index,
                        frame.timestamp,
                        value,
                        activity.dense_activity(field, trained),
                        activity.dense_activity(field, intensified),
                    )
                )
        prev = frame
    if len(values) < 2:
        raise FrameStreamError("Training needs at least 3 frames for activity")
    raw = ActivitySeries(indices, stamps, values, _input_rate(np.asarray(stamps), stream.fps))
    if trace_out:
        _write_training_trace(trace_out, trace_rows)

    series = activity.resample(raw, options.detector.rate)
    settings = options.activity
    maxima = activity.find_salient_maxima(
        series, settings.min_separation, settings.k_sal, settings.baseline_seconds
    )
    _LOGGER.info("Found %s activity pulses in %.1f s of training", len(maxima), series.duration)
    template = activity.extract_template(
        series, maxima, settings.template_length(series.rate), settings.peak_fraction
    )
    noise = activity.calibrate_noise(
        series,
        maxima,
        template,
        settings.guard,
        activity.estimate_noise(series, maxima, settings.guard),
    )
    model = Model(
        influx=intensified,
        points=points,
        template=template,
        noise=noise,
        fps=stream.fps,
        lk=options.lk,
        influx_params=params,
        activity_params=settings,
        detector=options.detector,
    )
    report = TrainingReport(
        model=model,
        series=series,
        maxima=maxima,
        predicted_pd=predicted_pd(options.detector, noise, template),
        frames=frames,
    )
    _LOGGER.info("Training complete:\n%s", report.summary())
    return report


def _write_training_trace(path: str, rows: list):
    with csv_writer(path, TRAINING_TRACE_HEADER) as writer:
        for index, stamp, value, plain, boosted in rows:
            writer.writerow(
                (index, format_float(stamp), format_float(value), format_float(plain), format_float(boosted))
            )
    _LOGGER.info("Training trace written to %s", path)


def detector_template(model: Model, cfg: DetectorConfig) -> PulseTemplate:
    """Return model template at the detector rate."""
    template = model.template
    if math.isclose(template.rate, cfg.rate, rel_tol=1e-9):
        return template
    _LOGGER.warning(
        "Resampling %g Hz template to detector rate %g Hz; sigma was learned at %g Hz",
        template.rate,
        cfg.rate,
        template.rate,
    )
    return activity.resample(template, cfg.rate)


@dataclasses.dataclass
class DetectionSummary:
    """Counts of one detection run."""

    frames: int = 0
    steps: int = 0
    onsets: list = dataclasses.field(default_factory=list)
    final: Optional[CrossingState] = None
    fps: float = 0.0


class OnlinePipeline:
    """Frame in, crossing states out: sparse flow, activity, resampling, detector."""

    def __init__(self, model: Model, cfg: Optional[DetectorConfig] = None):
        self.model = model
        self.cfg = cfg or model.detector
        self.tracker = ActivityTracker(model.points, model.lk)
        self.resampler = StreamResampler(self.cfg.rate)
        self.detector = Detector(detector_template(model, self.cfg), model.noise, self.cfg)
        self.trace: list[tuple[float, float, State]] = []
        self.record_trace = False
        self._checked = False

    def process(self, frame: Frame) -> list[CrossingState]:
        """Return detector states produced by frame."""
        if not self._checked:
            self.model.check_stream(frame.width, frame.height)
            self._checked = True
        value = self.tracker.push(frame)
        if value is None:
            return []
        states = []
        for stamp, sample in self.resampler.push(frame.timestamp, value):
            state = self.detector.step(sample, stamp)
            states.append(state)
            if self.record_trace:
                self.trace.append((stamp, sample, state.state))
        return states

    def write_trace(self, path: str):
        """Write index,timestamp,activity,state rows at detector rate."""
        if not self.trace:
            _LOGGER.warning("No activity samples to write to %s", path)
            return
        stamps, values, states = zip(*self.trace)
        ActivitySeries(range(len(stamps)), stamps, values, self.cfg.rate).to_csv(path, states)


def run_detection(
    stream: FrameStream,
    model: Model,
    cfg: Optional[DetectorConfig] = None,
    events_out: Optional[str] = None,
    trace_out: Optional[str] = None,
    state_sink: Optional[Callable[[CrossingState], None]] = None,
    stdout: Optional[IO] = None,
    queue_size: int = 8,
) -> DetectionSummary:
    """Run the online pipeline over stream."""
    stdout = stdout if stdout is not None else sys.stdout
    pipeline = OnlinePipeline(model, cfg)
    pipeline.record_trace = bool(trace_out)
    summary = DetectionSummary()
    _LOGGER.info(
        "Detecting with gamma %.6g (p_fa %g, rate %g Hz, predicted P_D %.4f)",
        pipeline.detector.threshold.gamma,
        pipeline.cfg.p_fa,
        pipeline.cfg.rate,
        pipeline.detector.predicted_pd,
    )
    if not math.isclose(stream.fps, model.fps, rel_tol=1e-9):
        _LOGGER.info("Stream runs at %g fps; model was trained at %g fps", stream.fps, model.fps)

    def _on_change(state: CrossingState):
        print(format_state_line(state), file=stdout, flush=True)
        if state.state == State.TRAFFIC and not state.warming_up:
            summary.onsets.append(state.timestamp)

    pipeline.detector.events.on("state_change", _on_change)
    rate = RateLogger("Detection", target_fps=stream.fps)
    with contextlib.ExitStack() as stack:
        log = None
        if events_out:
            log = stack.enter_context(EventLog(events_out, pipeline.detector.threshold.gamma))
        for frame in _frames(stream, queue_size):
            start = time.monotonic()
            states = pipeline.process(frame)
            summary.frames += 1
            for state in states:
                summary.steps += 1
                summary.final = state
                if log is not None:
                    log.write(state)
                if state_sink is not None:
                    state_sink(state)
            rate.tick(time.monotonic() - start)
    summary.fps = rate.rate
    if trace_out:
        pipeline.write_trace(trace_out)
    _LOGGER.info(
        "Detection finished: %s frames, %s steps, %s TRAFFIC onsets",
        summary.frames,
        summary.steps,
        len(summary.onsets),
    )
    return summary
