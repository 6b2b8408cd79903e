"""Tests for the training and detection pipelines."""
import io
import time

import numpy as np
import pytest

from crossgap.const import State
from crossgap.detector import DetectorConfig
from crossgap.errors import FrameStreamError, ModelError
from crossgap.frame_io import Frame, FrameStream
from crossgap.influx import InfluxMap, intensify, sample_points
from crossgap.model import Model
from crossgap.optflow import grid_shape
from crossgap.runtime import (
    ActivityTracker,
    OnlinePipeline,
    TrainingOptions,
    detector_template,
    run_detection,
    train,
    train_influx,
)

from .conftest import shifted, textured


def test_train_influx_learns_drift(frame_stream):
    state, count = train_influx(frame_stream, TrainingOptions())
    assert count == 6
    assert state.frames_trained == 2
    learned = state.to_map()
    assert learned.grid_shape == (8, 10)
    moving = learned.vectors[2:6, 2:8]
    assert np.median(moving[..., 0]) == pytest.approx(0.5, abs=0.15)
    assert np.median(np.abs(moving[..., 1])) < 0.1


def test_train_influx_needs_a_pair():
    luma = np.full((64, 64), 0.5, dtype=np.float32)
    stream = FrameStream.from_frames([Frame(0, 0.0, luma), Frame(1, 0.125, luma)], 8.0)
    with pytest.raises(FrameStreamError, match="more than"):
        train_influx(stream, TrainingOptions())


def test_train_requires_reiterable_stream(frame_stream):
    single = FrameStream(lambda: iter(frame_stream), 8.0, reiterable=False)
    with pytest.raises(FrameStreamError, match="twice"):
        train(single)


def test_activity_tracker_follows_drift(frame_stream, model):
    tracker = ActivityTracker(model.points, model.lk)
    frames = list(frame_stream)
    assert tracker.push(frames[0]) is None
    value = tracker.push(frames[1])
    expected = float(np.sum(model.points.projections[:, 0]) * 0.5)
    assert value == pytest.approx(expected, rel=0.25)
    tracker.reset()
    assert tracker.push(frames[2]) is None


def test_detector_template_resamples_on_rate_change(model):
    assert detector_template(model, DetectorConfig(rate=30.0)) is model.template
    resampled = detector_template(model, DetectorConfig(rate=15.0))
    assert resampled.rate == 15.0
    assert len(resampled) < len(model.template)


def test_pipeline_rejects_other_geometry(model):
    pipeline = OnlinePipeline(model)
    luma = np.full((48, 64), 0.5, dtype=np.float32)
    with pytest.raises(ModelError):
        pipeline.process(Frame(0, 0.0, luma))


def test_run_detection_warm_up_outputs(tmp_path, frame_stream, model):
    events = tmp_path / "events.csv"
    trace = tmp_path / "trace.csv"
    stdout = io.StringIO()
    seen = []
    summary = run_detection(
        frame_stream,
        model,
        events_out=str(events),
        trace_out=str(trace),
        state_sink=seen.append,
        stdout=stdout,
    )
    assert summary.frames == 6
    assert summary.steps == len(seen) > 0
    assert summary.onsets == []
    assert summary.final.state == State.TRAFFIC
    assert all(item.warming_up for item in seen)
    assert stdout.getvalue().splitlines() == ["t=0.125 STATE=TRAFFIC"]
    rows = events.read_text().splitlines()
    assert rows[0] == "timestamp,state,correlator,gamma,margin"
    assert len(rows) == summary.steps + 1
    assert rows[1].split(",")[2] == "nan"
    assert len(trace.read_text().splitlines()) == summary.steps + 1


@pytest.mark.slow
def test_hd_pipeline_keeps_up_with_8_fps(template, noise):
    width, height = 1280, 720
    rows, cols = grid_shape(width, height, 8)
    vectors = np.zeros((rows, cols, 2))
    vectors[..., 1] = 0.5
    influx = InfluxMap(width, height, 8, 0, vectors, np.ones((rows, cols)), frames_trained=1)
    influx = intensify(influx, (640.0, 180.0), 4.0, 100.0)
    points = sample_points(influx, count=2000, sigma_s=400.0, seed=0)
    assert len(points) == 2000
    model = Model(influx=influx, points=points, template=template, noise=noise, fps=8.0)
    base = textured(height, width, seed=9)
    frames = [Frame(k, k / 8.0, shifted(base, 0.0, 0.5 * k)) for k in range(17)]
    pipeline = OnlinePipeline(model)
    pipeline.process(frames[0])
    start = time.perf_counter()
    for frame in frames[1:]:
        pipeline.process(frame)
    elapsed = time.perf_counter() - start
    assert len(frames[1:]) / elapsed >= 8.0
