"""Shared fixtures for crossgap tests."""
import logging

import cv2
import numpy as np
import pytest

from crossgap.activity import NoiseModel, PulseTemplate
from crossgap.frame_io import Frame, FrameStream
from crossgap.influx import InfluxMap, intensify, sample_points
from crossgap.model import Model
from crossgap.optflow import grid_shape


def textured(height: int, width: int, seed: int = 0, blur: float = 2.0) -> np.ndarray:
    """Return smooth random luma in [0.1, 0.9]."""
    rng = np.random.default_rng(seed)
    image = cv2.GaussianBlur(rng.random((height, width)).astype(np.float32), (0, 0), blur)
    image = (image - image.min()) / (image.max() - image.min())
    return (0.1 + 0.8 * image).astype(np.float32)


def shifted(image: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Return image translated by (dx, dy) pixels with reflected borders."""
    matrix = np.float32([[1, 0, dx], [0, 1, dy]])
    moved = cv2.warpAffine(
        image, matrix, image.shape[::-1], flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT
    )
    return np.clip(moved, 0.0, 1.0)


def make_frames(images, fps: float = 8.0):
    """Return frames of luma arrays at fps."""
    return [Frame(index, index / fps, image) for index, image in enumerate(images)]


@pytest.fixture
def texture():
    """Return 128x128 smooth texture."""
    return textured(128, 128)


@pytest.fixture
def frame_stream():
    """Return a small in-memory stream of 6 frames drifting right."""
    base = textured(64, 80, seed=3)
    frames = make_frames([shifted(base, step * 0.5, 0.0) for step in range(6)])
    return FrameStream.from_frames(frames, 8.0)


@pytest.fixture
def template():
    """Return a rising ramp template at 30 Hz."""
    return PulseTemplate(np.linspace(0.1, 1.0, 30), 30.0)


@pytest.fixture
def noise():
    """Return unit noise."""
    return NoiseModel(sigma=1.0)


@pytest.fixture(name="model")
def fixture_model(template, noise):
    """Return a model of rightward drift for 80x64 frames."""
    rows, cols = grid_shape(80, 64, 8)
    vectors = np.zeros((rows, cols, 2))
    vectors[..., 0] = 0.5
    influx = InfluxMap(80, 64, 8, 0, vectors, np.ones((rows, cols)), frames_trained=2)
    influx = intensify(influx, (40.0, 32.0), 4.0, 8.0)
    return Model(
        influx=influx,
        points=sample_points(influx, count=20, sigma_s=30.0, seed=0),
        template=template,
        noise=noise,
        fps=8.0,
    )


@pytest.fixture(name="restore_logging")
def fixture_restore_logging():
    """main() reconfigures the root logger."""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)
