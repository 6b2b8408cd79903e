"""Influx map training, point of first appearance and sample point selection."""
from __future__ import annotations
import dataclasses
import logging
import math
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.cluster.hierarchy import fclusterdata

from .const import (
    CANDIDATE_BUDGET_FACTOR,
    DEFAULT_ALPHA,
    DEFAULT_BACKTRACK_EPS,
    DEFAULT_FRAME_SKIP,
    DEFAULT_RHO_FRACTION,
    DEFAULT_SAMPLE_COUNT,
    DEFAULT_SIGMA_S_FRACTION,
    DEFAULT_STRIDE,
    DEFAULT_WINDOW_RADIUS,
    PFA_CLUSTER_RADIUS,
    SEED_QUANTILE,
)
from .errors import InfluxError
from .optflow import DenseFlowField, grid_points, grid_shape

_LOGGER = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class InfluxParams:
    """Training parameters for the influx map and sample points."""

    stride: int = DEFAULT_STRIDE
    offset: int = 0
    frame_skip: int = DEFAULT_FRAME_SKIP
    two_way: bool = False
    alpha: float = DEFAULT_ALPHA
    rho_fraction: float = DEFAULT_RHO_FRACTION
    sigma_s_fraction: float = DEFAULT_SIGMA_S_FRACTION
    backtrack_eps: float = DEFAULT_BACKTRACK_EPS
    sample_count: int = DEFAULT_SAMPLE_COUNT

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.offset < 0:
            raise ValueError("offset must be >= 0")
        if self.frame_skip < 1:
            raise ValueError("frame_skip must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not self.rho_fraction > 0 or not self.sigma_s_fraction > 0:
            raise ValueError("rho_fraction and sigma_s_fraction must be > 0")
        if not 0 < self.backtrack_eps < 1:
            raise ValueError("backtrack_eps must lie in (0, 1)")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")

    def rho(self, width: int, height: int) -> float:
        """Return intensification radius in pixels."""
        return self.rho_fraction * math.hypot(width, height)

    def sigma_s(self, width: int, height: int) -> float:
        """Return sampling standard deviation in pixels."""
        return self.sigma_s_fraction * math.hypot(width, height)


@dataclasses.dataclass(frozen=True)
class InfluxMap:
    """Expected inbound motion per grid node in per-frame pixel units."""

    width: int
    height: int
    stride: int
    offset: int
    vectors: np.ndarray
    weights: np.ndarray
    pfa: Optional[tuple[float, float]] = None
    frames_trained: int = 0
    nullified_outbound: bool = False

    def __post_init__(self):
        rows, cols = grid_shape(self.width, self.height, self.stride, self.offset)
        vectors = np.array(self.vectors, dtype=np.float64)
        weights = np.array(self.weights, dtype=np.float64)
        if vectors.shape != (rows, cols, 2) or weights.shape != (rows, cols):
            raise InfluxError(
                f"Map grid {vectors.shape[:2]} does not match {rows}x{cols} for "
                f"{self.width}x{self.height} at stride {self.stride}"
            )
        if np.any(weights < 1.0):
            raise InfluxError("Intensification weights must be >= 1")
        vectors.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "weights", weights)
        if self.pfa is not None:
            object.__setattr__(self, "pfa", (float(self.pfa[0]), float(self.pfa[1])))

    @property
    def grid_shape(self) -> tuple[int, int]:
        """Return (rows, cols)."""
        return self.weights.shape

    def points(self) -> np.ndarray:
        """Return node pixel coordinates, shape (rows, cols, 2)."""
        rows, cols = self.grid_shape
        return grid_points(rows, cols, self.stride, self.offset)

    def magnitude(self) -> np.ndarray:
        """Return |m| per node."""
        return np.hypot(self.vectors[..., 0], self.vectors[..., 1])

    def effective(self) -> np.ndarray:
        """Return w * m per node."""
        return self.weights[..., None] * self.vectors

    def to_grid(self, points: np.ndarray) -> np.ndarray:
        """Return fractional (row, col) grid coordinates of pixel points (x, y)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        cols = (points[:, 0] - self.offset) / self.stride - 0.5
        rows = (points[:, 1] - self.offset) / self.stride - 0.5
        return np.stack((rows, cols))

    def interpolate(self, field: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Return bilinear samples of a per-node field at pixel points."""
        coords = self.to_grid(points)
        if field.ndim == 2:
            return ndimage.map_coordinates(field, coords, order=1, mode="nearest")
        return np.stack(
            [
                ndimage.map_coordinates(field[..., channel], coords, order=1, mode="nearest")
                for channel in range(field.shape[-1])
            ],
            axis=-1,
        )

    def projection_at(self, points: np.ndarray) -> np.ndarray:
        """Return w * m interpolated at pixel points, shape (n, 2)."""
        return self.interpolate(self.effective(), points)

    def nearest_node(self, point: Sequence[float]) -> tuple[int, int]:
        """Return (row, col) of node nearest to pixel point."""
        rows, cols = self.grid_shape
        row, col = np.rint(self.to_grid(point)).ravel()
        return int(np.clip(row, 0, rows - 1)), int(np.clip(col, 0, cols - 1))


class InfluxState:
    """Running per-node mean of valid training flow. Single writer."""

    def __init__(self, width: int, height: int, stride: int = DEFAULT_STRIDE, offset: int = 0):
        self.width = width
        self.height = height
        self.stride = stride
        self.offset = offset
        rows, cols = grid_shape(width, height, stride, offset)
        if rows == 0 or cols == 0:
            raise InfluxError(f"Stride {stride} leaves no grid nodes in {width}x{height}")
        self.sums = np.zeros((rows, cols, 2), dtype=np.float64)
        self.counts = np.zeros((rows, cols), dtype=np.int64)
        self.frames_trained = 0

    def __repr__(self):
        return (
            f"<{self.__module__}.{self.__class__.__name__} "
            f"grid={self.counts.shape} frames_trained={self.frames_trained}>"
        )

    @property
    def grid_shape(self) -> tuple[int, int]:
        """Return (rows, cols)."""
        return self.counts.shape

    def mean(self) -> np.ndarray:
        """Return per-node mean; nodes without valid samples are zero."""
        counts = np.maximum(self.counts, 1)[..., None]
        return np.where(self.counts[..., None] > 0, self.sums / counts, 0.0)

    def to_map(self) -> InfluxMap:
        """Return frozen map of the current mean."""
        if self.frames_trained == 0:
            raise InfluxError("Influx map has no training frames")
        return InfluxMap(
            width=self.width,
            height=self.height,
            stride=self.stride,
            offset=self.offset,
            vectors=self.mean(),
            weights=np.ones(self.grid_shape),
            frames_trained=self.frames_trained,
        )


def accumulate(state: InfluxState, flow: DenseFlowField) -> InfluxState:
    """Add valid vectors of flow to the running mean."""
    if (
        flow.stride != state.stride
        or flow.offset != state.offset
        or flow.grid_shape != state.grid_shape
    ):
        raise InfluxError(
            f"Flow grid {flow.grid_shape} stride {flow.stride} does not match map grid "
            f"{state.grid_shape} stride {state.stride}"
        )
    valid = flow.valid
    state.sums[valid] += flow.vectors[valid]
    state.counts[valid] += 1
    state.frames_trained += 1
    return state


def nullify_outbound(influx: InfluxMap) -> InfluxMap:
    """Return map with upward (dy < 0) vectors set to zero."""
    vectors = np.array(influx.vectors)
    upward = vectors[..., 1] < 0
    vectors[upward] = 0.0
    _LOGGER.debug("Nullified %s outbound cells", int(np.count_nonzero(upward)))
    return dataclasses.replace(influx, vectors=vectors, nullified_outbound=True)


def locate_pfa(
    influx: InfluxMap,
    eps: float = DEFAULT_BACKTRACK_EPS,
    cluster_radius: float = PFA_CLUSTER_RADIUS,
    seed_quantile: float = SEED_QUANTILE,
) -> tuple[float, float]:
    """Return point of first appearance by back-tracking strong influx vectors."""
    magnitude = influx.magnitude()
    peak = float(magnitude.max()) if magnitude.size else 0.0
    if not peak > 0:
        raise InfluxError("Influx map is all zero; cannot locate point of first appearance")
    nonzero = magnitude > 0
    level = np.quantile(magnitude[nonzero], seed_quantile)
    seeds = nonzero & (magnitude >= level)
    positions = influx.points()[seeds].astype(np.float64)

    step = influx.stride / 2.0
    stop_level = eps * peak
    max_steps = int(math.ceil(4 * (influx.width + influx.height) / step))
    upper = np.array([influx.width - 1, influx.height - 1], dtype=np.float64)
    active = np.ones(len(positions), dtype=bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        local = influx.interpolate(influx.vectors, positions[idx])
        norm = np.hypot(local[:, 0], local[:, 1])
        weak = norm < stop_level
        active[idx[weak]] = False
        idx, local, norm = idx[~weak], local[~weak], norm[~weak]
        moved = positions[idx] - step * local / norm[:, None]
        outside = np.any((moved < 0) | (moved > upper), axis=1)
        positions[idx] = np.clip(moved, 0.0, upper)
        active[idx[outside]] = False
    if np.any(active):
        _LOGGER.debug("%s back-tracks hit the step limit", int(np.count_nonzero(active)))

    if len(positions) == 1:
        pfa = positions[0]
    else:
        labels = fclusterdata(
            positions, t=cluster_radius * influx.stride, criterion="distance", method="single"
        )
        largest = np.argmax(np.bincount(labels))
        pfa = positions[labels == largest].mean(axis=0)
    _LOGGER.info(
        "Point of first appearance at (%.1f, %.1f) from %s seeds", pfa[0], pfa[1], len(positions)
    )
    return float(pfa[0]), float(pfa[1])


def intensify(
    influx: InfluxMap, pfa: Sequence[float], alpha: float = DEFAULT_ALPHA, rho: float = 1.0
) -> InfluxMap:
    """Return map with weights 1 + alpha * exp(-d^2 / (2 rho^2)) around pfa."""
    if alpha < 0:
        raise InfluxError("alpha must be >= 0")
    if not rho > 0:
        raise InfluxError("rho must be > 0")
    offset = influx.points() - np.asarray(pfa, dtype=np.float64)
    distance_sq = np.sum(offset * offset, axis=-1)
    weights = 1.0 + alpha * np.exp(-distance_sq / (2.0 * rho * rho))
    return dataclasses.replace(influx, weights=weights, pfa=(float(pfa[0]), float(pfa[1])))


@dataclasses.dataclass(frozen=True)
class SamplePointSet:
    """Online sample points with their projection vectors w * m."""

    points: np.ndarray
    projections: np.ndarray
    requested: int
    shortfall: bool = False

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_points(cls, influx: InfluxMap, points: np.ndarray, requested: int) -> SamplePointSet:
        """Return set with projections recomputed from the map."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return cls(
            points=points,
            projections=influx.projection_at(points),
            requested=requested,
            shortfall=len(points) < requested,
        )


def sample_points(
    influx: InfluxMap,
    count: int = DEFAULT_SAMPLE_COUNT,
    sigma_s: float = 1.0,
    seed: int = 0,
    margin: float = DEFAULT_WINDOW_RADIUS,
) -> SamplePointSet:
    """Return up to count distinct grid nodes drawn from a Gaussian around the pfa."""
    if count < 1:
        raise InfluxError("Sample count must be >= 1")
    if not sigma_s > 0:
        raise InfluxError("sigma_s must be > 0")
    if influx.pfa is None:
        raise InfluxError("Influx map has no point of first appearance")
    support = influx.magnitude() > 0
    if not np.any(support):
        raise InfluxError("Influx map has zero support; cannot sample points")

    rng = np.random.default_rng(seed)
    rows, cols = influx.grid_shape
    nodes = influx.points()
    center = np.asarray(influx.pfa, dtype=np.float64)
    budget = CANDIDATE_BUDGET_FACTOR * count
    drawn = 0
    chosen: list[int] = []
    seen: set = set()
    while len(chosen) < count and drawn < budget:
        batch = min(max(count, 256), budget - drawn)
        candidates = rng.normal(center, sigma_s, size=(batch, 2))
        drawn += batch
        col = np.floor((candidates[:, 0] - influx.offset) / influx.stride).astype(np.int64)
        row = np.floor((candidates[:, 1] - influx.offset) / influx.stride).astype(np.int64)
        keep = (row >= 0) & (row < rows) & (col >= 0) & (col < cols)
        row, col = row[keep], col[keep]
        node = nodes[row, col]
        keep = (
            (node[:, 0] >= margin)
            & (node[:, 0] <= influx.width - 1 - margin)
            & (node[:, 1] >= margin)
            & (node[:, 1] <= influx.height - 1 - margin)
            & support[row, col]
        )
        for key in (row[keep] * cols + col[keep]).tolist():
            if key in seen:
                continue
            seen.add(key)
            chosen.append(key)
            if len(chosen) == count:
                break

    if not chosen:
        raise InfluxError(f"No usable sample point within {budget} candidates")
    cells = np.array(chosen, dtype=np.int64)
    points = nodes[cells // cols, cells % cols].reshape(-1, 2)
    result = SamplePointSet.from_points(influx, points, count)
    if result.shortfall:
        _LOGGER.warning(
            "Sampled %s of %s requested points after %s candidates", len(result), count, drawn
        )
    else:
        _LOGGER.debug("Sampled %s points from %s candidates", len(result), drawn)
    return result
