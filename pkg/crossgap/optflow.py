"""Pyramidal iterative Lucas-Kanade optical flow.

One flow core serves both phases: ``sparse_flow`` tracks arbitrary points between two
frames and ``dense_flow`` evaluates it on a regular grid. Image y grows downward, so a
positive ``dy`` is motion toward the bottom of the frame.
"""
from __future__ import annotations
import dataclasses
import logging
from collections import OrderedDict
from typing import NamedTuple, Optional, Sequence, Union

import cv2
import numpy as np

from .const import (
    DEFAULT_EPSILON,
    DEFAULT_MAX_ITERATIONS,
    DEFAULT_MIN_EIGEN,
    DEFAULT_PYRAMID_LEVELS,
    DEFAULT_WINDOW_RADIUS,
    REMAP_CHUNK,
)
from .errors import FlowError
from .frame_io import Frame
from .util import csv_writer, format_float

_LOGGER = logging.getLogger(__name__)

_DET_FLOOR = 1e-12


class FlowVector(NamedTuple):
    """Displacement in pixels. dy > 0 is downward."""

    dx: float
    dy: float

    @property
    def magnitude(self) -> float:
        """Return Euclidean length."""
        return float(np.hypot(self.dx, self.dy))


@dataclasses.dataclass(frozen=True)
class LKParams:
    """Lucas-Kanade tracking parameters."""

    window_radius: int = DEFAULT_WINDOW_RADIUS
    levels: int = DEFAULT_PYRAMID_LEVELS
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    epsilon: float = DEFAULT_EPSILON
    min_eigen: float = DEFAULT_MIN_EIGEN
    max_displacement: Optional[float] = None

    def __post_init__(self):
        if self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.min_eigen < 0:
            raise ValueError("min_eigen must be >= 0")
        if self.max_displacement is not None and not self.max_displacement > 0:
            raise ValueError("max_displacement must be > 0")

    @property
    def window_size(self) -> int:
        """Return window side length in pixels."""
        return 2 * self.window_radius + 1

    @property
    def displacement_limit(self) -> float:
        """Return largest displacement accepted as a valid track."""
        if self.max_displacement is not None:
            return float(self.max_displacement)
        return float(self.window_radius * 2 ** self.levels)


class ImagePyramid:
    """Coarse-to-fine image levels. Level 0 is the original image."""

    def __init__(self, levels: Sequence[np.ndarray]):
        self._levels = [np.ascontiguousarray(level, dtype=np.float32) for level in levels]
        self._gradients: list = [None] * len(self._levels)

    def __repr__(self):
        shapes = ", ".join(f"{level.shape[1]}x{level.shape[0]}" for level in self._levels)
        return f"<{self.__module__}.{self.__class__.__name__} levels=[{shapes}]>"

    def __len__(self) -> int:
        return len(self._levels)

    def __getitem__(self, level: int) -> np.ndarray:
        return self._levels[level]

    @property
    def shape(self) -> tuple[int, int]:
        """Return (height, width) of level 0."""
        return self._levels[0].shape

    def gradients(self, level: int) -> tuple[np.ndarray, np.ndarray]:
        """Return central-difference (gx, gy) of level."""
        if self._gradients[level] is None:
            image = self._levels[level]
            self._gradients[level] = (
                cv2.Sobel(image, cv2.CV_32F, 1, 0, ksize=1, scale=0.5, borderType=cv2.BORDER_REPLICATE),
                cv2.Sobel(image, cv2.CV_32F, 0, 1, ksize=1, scale=0.5, borderType=cv2.BORDER_REPLICATE),
            )
        return self._gradients[level]


def build_pyramid(
    frame: Union[Frame, np.ndarray],
    levels: int,
    window_radius: int = DEFAULT_WINDOW_RADIUS,
) -> ImagePyramid:
    """Return pyramid of levels. Each level is binomially smoothed and halved."""
    if levels < 1:
        raise FlowError("Pyramid needs at least one level")
    image = frame.luma if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float32)
    minimum = 2 ** (levels - 1) * (2 * window_radius + 1)
    if min(image.shape) < minimum:
        raise FlowError(
            f"Image {image.shape[1]}x{image.shape[0]} too small for {levels} levels "
            f"with window radius {window_radius}: need >= {minimum} px"
        )
    pyramid = [np.ascontiguousarray(image, dtype=np.float32)]
    for _ in range(levels - 1):
        pyramid.append(cv2.pyrDown(pyramid[-1]))
    return ImagePyramid(pyramid)


class PyramidCache:
    """Keep pyramids of the most recent frames so each frame is built once."""

    def __init__(self, params: LKParams, capacity: int = 2):
        self.params = params
        self.capacity = capacity
        self._items: OrderedDict = OrderedDict()

    def get(self, frame: Frame) -> ImagePyramid:
        """Return pyramid for frame."""
        pyramid = self._items.get(frame.index)
        if pyramid is None:
            pyramid = build_pyramid(frame, self.params.levels, self.params.window_radius)
            self._items[frame.index] = pyramid
            while len(self._items) > self.capacity:
                self._items.popitem(last=False)
        else:
            self._items.move_to_end(frame.index)
        return pyramid

    def clear(self):
        """Drop all pyramids."""
        self._items.clear()


def _span_length(span: tuple[int, int]) -> int:
    return max(abs(span[1] - span[0]), 1)


@dataclasses.dataclass
class SparseFlow:
    """Displacements of points over a frame span. Invalid tracks are flagged, not zeroed."""

    points: np.ndarray
    vectors: np.ndarray
    valid: np.ndarray
    span: tuple[int, int]

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, item: int) -> tuple[tuple[float, float], FlowVector, bool]:
        x, y = self.points[item]
        dx, dy = self.vectors[item]
        return (float(x), float(y)), FlowVector(float(dx), float(dy)), bool(self.valid[item])

    @property
    def invalid_count(self) -> int:
        """Return number of invalid tracks."""
        return int(len(self.valid) - np.count_nonzero(self.valid))

    def per_frame(self) -> np.ndarray:
        """Return vectors divided by span length. Invalid rows are zero."""
        vectors = self.vectors / _span_length(self.span)
        return np.where(self.valid[:, None], vectors, 0.0)

    def to_csv(self, path: str):
        """Write x,y,dx,dy,valid rows."""
        _write_flow_csv(path, self.points, self.vectors, self.valid)


@dataclasses.dataclass
class DenseFlowField:
    """Per-frame flow on a regular grid.

    Node (row, col) sits at pixel (offset + (col + 0.5) * stride, offset + (row + 0.5) * stride).
    """

    stride: int
    offset: int
    vectors: np.ndarray
    valid: np.ndarray
    span: tuple[int, int]

    @property
    def grid_shape(self) -> tuple[int, int]:
        """Return (rows, cols)."""
        return self.valid.shape

    def points(self) -> np.ndarray:
        """Return node pixel coordinates, shape (rows, cols, 2)."""
        rows, cols = self.grid_shape
        return grid_points(rows, cols, self.stride, self.offset)

    def to_csv(self, path: str):
        """Write x,y,dx,dy,valid rows in row-major node order."""
        _write_flow_csv(
            path,
            self.points().reshape(-1, 2),
            self.vectors.reshape(-1, 2),
            self.valid.ravel(),
        )


def _write_flow_csv(path: str, points: np.ndarray, vectors: np.ndarray, valid: np.ndarray):
    with csv_writer(path, ("x", "y", "dx", "dy", "valid")) as writer:
        for (x, y), (dx, dy), ok in zip(points, vectors, valid):
            writer.writerow(
                (format_float(x), format_float(y), format_float(dx), format_float(dy), int(ok))
            )


def grid_shape(width: int, height: int, stride: int, offset: int = 0) -> tuple[int, int]:
    """Return (rows, cols) of a grid over an image."""
    if stride < 1:
        raise FlowError("Grid stride must be >= 1")
    if offset < 0:
        raise FlowError("Grid offset must be >= 0")
    return (max((height - offset) // stride, 0), max((width - offset) // stride, 0))


def grid_points(rows: int, cols: int, stride: int, offset: int = 0) -> np.ndarray:
    """Return node pixel coordinates, shape (rows, cols, 2) as (x, y)."""
    xs = offset + (np.arange(cols) + 0.5) * stride
    ys = offset + (np.arange(rows) + 0.5) * stride
    grid_x, grid_y = np.meshgrid(xs, ys)
    return np.stack((grid_x, grid_y), axis=-1)


def _window_offsets(radius: int) -> tuple[np.ndarray, np.ndarray]:
    off_y, off_x = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return off_x.ravel().astype(np.float32), off_y.ravel().astype(np.float32)


def _sample(image: np.ndarray, map_x: np.ndarray, map_y: np.ndarray) -> np.ndarray:
    """Return bilinear samples of image at (map_x, map_y), one row per point."""
    out = np.empty(map_x.shape, dtype=np.float32)
    for start in range(0, map_x.shape[0], REMAP_CHUNK):
        stop = start + REMAP_CHUNK
        out[start:stop] = cv2.remap(
            image,
            np.ascontiguousarray(map_x[start:stop], dtype=np.float32),
            np.ascontiguousarray(map_y[start:stop], dtype=np.float32),
            cv2.INTER_LINEAR,
            borderMode=cv2.BORDER_REPLICATE,
        )
    return out


def _inside(points: np.ndarray, width: int, height: int, margin: float) -> np.ndarray:
    return (
        (points[:, 0] >= margin)
        & (points[:, 0] <= width - 1 - margin)
        & (points[:, 1] >= margin)
        & (points[:, 1] <= height - 1 - margin)
    )


def _track(
    prev: ImagePyramid,
    nxt: ImagePyramid,
    points: np.ndarray,
    params: LKParams,
) -> tuple[np.ndarray, np.ndarray]:
    """Return (displacements, valid) of points from prev to nxt."""
    count = len(points)
    off_x, off_y = _window_offsets(params.window_radius)
    window_pixels = off_x.size
    guess = np.zeros((count, 2), dtype=np.float64)
    valid = np.ones(count, dtype=bool)
    flow = guess

    for level in range(len(prev) - 1, -1, -1):
        scale = 2.0 ** level
        level_points = (points / scale).astype(np.float32)
        win_x = level_points[:, 0:1] + off_x
        win_y = level_points[:, 1:2] + off_y
        grad_x, grad_y = prev.gradients(level)
        template = _sample(prev[level], win_x, win_y)
        ix = _sample(grad_x, win_x, win_y)
        iy = _sample(grad_y, win_x, win_y)
        gxx = np.einsum("ij,ij->i", ix, ix, dtype=np.float64)
        gyy = np.einsum("ij,ij->i", iy, iy, dtype=np.float64)
        gxy = np.einsum("ij,ij->i", ix, iy, dtype=np.float64)
        det = gxx * gyy - gxy * gxy

        delta = np.zeros((count, 2), dtype=np.float64)
        active = det > _DET_FLOOR
        for _ in range(params.max_iterations):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            shift = (guess[idx] + delta[idx]).astype(np.float32)
            warped = _sample(nxt[level], win_x[idx] + shift[:, 0:1], win_y[idx] + shift[:, 1:2])
            warped -= template[idx]
            b_x = -np.einsum("ij,ij->i", ix[idx], warped).astype(np.float64)
            b_y = -np.einsum("ij,ij->i", iy[idx], warped).astype(np.float64)
            step_x = (gyy[idx] * b_x - gxy[idx] * b_y) / det[idx]
            step_y = (gxx[idx] * b_y - gxy[idx] * b_x) / det[idx]
            delta[idx, 0] += step_x
            delta[idx, 1] += step_y
            converged = np.hypot(step_x, step_y) < params.epsilon
            active[idx[converged]] = False

        if level > 0:
            guess = 2.0 * (guess + delta)
        else:
            flow = guess + delta
            trace = 0.5 * (gxx + gyy)
            min_eigen = trace - np.sqrt(np.maximum(trace * trace - det, 0.0))
            valid &= (min_eigen / window_pixels) >= params.min_eigen
    return flow, valid


def sparse_flow(
    prev: Frame,
    nxt: Frame,
    points: Union[np.ndarray, Sequence[Sequence[float]]],
    params: Optional[LKParams] = None,
    cache: Optional[PyramidCache] = None,
) -> SparseFlow:
    """Track points from prev to nxt."""
    params = params or LKParams()
    if prev.shape != nxt.shape:
        raise FlowError(
            f"Frame dimensions differ: {prev.width}x{prev.height} vs {nxt.width}x{nxt.height}"
        )
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) == 0:
        raise FlowError("Point list is empty")
    if cache is not None:
        prev_pyramid, next_pyramid = cache.get(prev), cache.get(nxt)
    else:
        prev_pyramid = build_pyramid(prev, params.levels, params.window_radius)
        next_pyramid = build_pyramid(nxt, params.levels, params.window_radius)

    vectors, valid = _track(prev_pyramid, next_pyramid, points, params)
    width, height = prev.width, prev.height
    margin = params.window_radius
    valid &= np.all(np.isfinite(vectors), axis=1)
    vectors = np.where(np.isfinite(vectors), vectors, 0.0)
    valid &= _inside(points, width, height, margin)
    valid &= _inside(points + vectors, width, height, margin)
    valid &= np.hypot(vectors[:, 0], vectors[:, 1]) <= params.displacement_limit
    flow = SparseFlow(points, vectors, valid, (prev.index, nxt.index))
    _LOGGER.debug(
        "Sparse flow %s->%s: %s points, %s invalid",
        prev.index,
        nxt.index,
        len(points),
        flow.invalid_count,
    )
    return flow


def dense_flow(
    prev: Frame,
    nxt: Frame,
    stride: int,
    params: Optional[LKParams] = None,
    offset: int = 0,
    cache: Optional[PyramidCache] = None,
) -> DenseFlowField:
    """Return per-frame flow at every grid node. Invalid nodes are zero."""
    if stride < 1:
        raise FlowError("Grid stride must be >= 1")
    if prev.shape != nxt.shape:
        raise FlowError(
            f"Frame dimensions differ: {prev.width}x{prev.height} vs {nxt.width}x{nxt.height}"
        )
    rows, cols = grid_shape(prev.width, prev.height, stride, offset)
    if rows == 0 or cols == 0:
        raise FlowError(f"Stride {stride} leaves no grid nodes in {prev.width}x{prev.height}")
    nodes = grid_points(rows, cols, stride, offset).reshape(-1, 2)
    flow = sparse_flow(prev, nxt, nodes, params, cache)
    vectors = flow.per_frame().reshape(rows, cols, 2)
    return DenseFlowField(
        stride=stride,
        offset=offset,
        vectors=vectors,
        valid=flow.valid.reshape(rows, cols).copy(),
        span=flow.span,
    )
