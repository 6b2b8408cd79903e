"""Tests for influx map training, pfa localization and point sampling."""
import dataclasses

import numpy as np
import pytest

from crossgap.errors import InfluxError
from crossgap.influx import (
    InfluxMap,
    InfluxParams,
    InfluxState,
    SamplePointSet,
    accumulate,
    intensify,
    locate_pfa,
    nullify_outbound,
    sample_points,
)
from crossgap.optflow import DenseFlowField, grid_points, grid_shape

WIDTH, HEIGHT, STRIDE = 160, 96, 8


def _field(vectors, valid=None):
    valid = np.ones(vectors.shape[:2], dtype=bool) if valid is None else valid
    return DenseFlowField(STRIDE, 0, vectors, valid, (0, 1))


def _map(vectors, weights=None, pfa=None):
    rows, cols = vectors.shape[:2]
    return InfluxMap(
        width=WIDTH,
        height=HEIGHT,
        stride=STRIDE,
        offset=0,
        vectors=vectors,
        weights=np.ones((rows, cols)) if weights is None else weights,
        pfa=pfa,
        frames_trained=1,
    )


def _diverging(source):
    """Return unit vectors pointing away from source, tapering to zero within one stride."""
    rows, cols = grid_shape(WIDTH, HEIGHT, STRIDE)
    offset = grid_points(rows, cols, STRIDE) - np.asarray(source)
    distance = np.hypot(offset[..., 0], offset[..., 1])
    scale = np.minimum(distance / STRIDE, 1.0) / np.maximum(distance, 1e-9)
    return offset * scale[..., None]


def test_constant_field_accumulates_exactly():
    rows, cols = grid_shape(WIDTH, HEIGHT, STRIDE)
    rng = np.random.default_rng(1)
    vectors = rng.normal(size=(rows, cols, 2))
    state = InfluxState(WIDTH, HEIGHT, STRIDE)
    for _ in range(100):
        accumulate(state, _field(vectors))
    assert state.frames_trained == 100
    assert np.max(np.abs(state.mean() - vectors)) <= 1e-9


def test_invalid_vectors_are_excluded_from_mean():
    rows, cols = grid_shape(WIDTH, HEIGHT, STRIDE)
    state = InfluxState(WIDTH, HEIGHT, STRIDE)
    valid = np.ones((rows, cols), dtype=bool)
    valid[0, 0] = False
    accumulate(state, _field(np.full((rows, cols, 2), 2.0), valid))
    accumulate(state, _field(np.full((rows, cols, 2), 4.0)))
    mean = state.mean()
    assert mean[0, 0].tolist() == [4.0, 4.0]
    assert mean[1, 1].tolist() == [3.0, 3.0]
    assert state.counts[0, 0] == 1


def test_never_valid_node_is_zero():
    rows, cols = grid_shape(WIDTH, HEIGHT, STRIDE)
    state = InfluxState(WIDTH, HEIGHT, STRIDE)
    accumulate(state, _field(np.ones((rows, cols, 2)), np.zeros((rows, cols), dtype=bool)))
    assert np.all(state.to_map().vectors == 0.0)


def test_accumulate_rejects_other_grid():
    state = InfluxState(WIDTH, HEIGHT, STRIDE)
    field = DenseFlowField(4, 0, np.zeros((24, 40, 2)), np.ones((24, 40), dtype=bool), (0, 1))
    with pytest.raises(InfluxError):
        accumulate(state, field)


def test_untrained_state_has_no_map():
    with pytest.raises(InfluxError):
        InfluxState(WIDTH, HEIGHT, STRIDE).to_map()


def test_nullify_outbound_removes_upward_cells():
    rows, cols = grid_shape(WIDTH, HEIGHT, STRIDE)
    rng = np.random.default_rng(2)
    influx = nullify_outbound(_map(rng.normal(size=(rows, cols, 2))))
    assert influx.nullified_outbound
    assert not np.any(influx.vectors[..., 1] < 0)
    downward = influx.vectors[..., 1] > 0
    assert np.all(influx.vectors[downward][:, 0] != 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_locate_pfa_finds_diverging_source(seed):
    """The back-tracked cluster lands within one stride of the true source."""
    rng = np.random.default_rng(seed)
    source = (
        float(rng.uniform(2 * STRIDE, WIDTH - 2 * STRIDE)),
        float(rng.uniform(2 * STRIDE, HEIGHT - 2 * STRIDE)),
    )
    pfa = locate_pfa(_map(_diverging(source)))
    assert np.hypot(pfa[0] - source[0], pfa[1] - source[1]) <= STRIDE


def test_locate_pfa_on_zero_map_raises():
    rows, cols = grid_shape(WIDTH, HEIGHT, STRIDE)
    with pytest.raises(InfluxError):
        locate_pfa(_map(np.zeros((rows, cols, 2))))


def test_intensify_weights_peak_at_pfa():
    rows, cols = grid_shape(WIDTH, HEIGHT, STRIDE)
    influx = intensify(_map(np.ones((rows, cols, 2))), (4.0, 4.0), alpha=4.0, rho=10.0)
    assert influx.pfa == (4.0, 4.0)
    assert influx.weights[0, 0] == pytest.approx(5.0)
    assert np.all(influx.weights >= 1.0)
    assert influx.weights[-1, -1] == pytest.approx(1.0)
    flat = intensify(_map(np.ones((rows, cols, 2))), (4.0, 4.0), alpha=0.0, rho=10.0)
    assert np.all(flat.weights == 1.0)
    with pytest.raises(InfluxError):
        intensify(influx, (4.0, 4.0), alpha=1.0, rho=0.0)


def test_map_rejects_weights_below_one():
    rows, cols = grid_shape(WIDTH, HEIGHT, STRIDE)
    with pytest.raises(InfluxError):
        _map(np.zeros((rows, cols, 2)), weights=np.full((rows, cols), 0.5))


def test_projection_at_node_equals_effective_vector():
    rows, cols = grid_shape(WIDTH, HEIGHT, STRIDE)
    rng = np.random.default_rng(4)
    influx = intensify(_map(rng.normal(size=(rows, cols, 2))), (80.0, 40.0), 2.0, 20.0)
    nodes = influx.points()[3:5, 6:8].reshape(-1, 2)
    expected = influx.effective()[3:5, 6:8].reshape(-1, 2)
    assert np.allclose(influx.projection_at(nodes), expected)
    assert influx.nearest_node((52.0, 28.0)) == (3, 6)


def _trained_map():
    rows, cols = grid_shape(WIDTH, HEIGHT, STRIDE)
    vectors = np.zeros((rows, cols, 2))
    vectors[..., 1] = 1.0
    return intensify(_map(vectors), (80.0, 24.0), 4.0, 10.0)


def test_sample_points_are_distinct_supported_nodes():
    influx = _trained_map()
    points = sample_points(influx, count=100, sigma_s=30.0, seed=7)
    assert len(points) == 100
    assert not points.shortfall
    assert len({tuple(point) for point in points.points.tolist()}) == 100
    nodes = {tuple(point) for point in influx.points().reshape(-1, 2).tolist()}
    assert all(tuple(point) in nodes for point in points.points.tolist())
    assert points.points[:, 0].min() >= 7 and points.points[:, 0].max() <= WIDTH - 8
    assert np.allclose(points.projections, influx.projection_at(points.points))


def test_sample_points_deterministic_per_seed():
    influx = _trained_map()
    first = sample_points(influx, count=50, sigma_s=30.0, seed=3)
    again = sample_points(influx, count=50, sigma_s=30.0, seed=3)
    other = sample_points(influx, count=50, sigma_s=30.0, seed=4)
    assert np.array_equal(first.points, again.points)
    assert not np.array_equal(first.points, other.points)


def test_sample_points_shortfall_when_support_is_small():
    rows, cols = grid_shape(WIDTH, HEIGHT, STRIDE)
    vectors = np.zeros((rows, cols, 2))
    vectors[5, 5:10, 1] = 1.0
    influx = intensify(_map(vectors), (60.0, 44.0), 4.0, 10.0)
    points = sample_points(influx, count=20, sigma_s=20.0, seed=0)
    assert len(points) == 5
    assert points.shortfall
    assert points.requested == 20


def test_sample_points_without_support_raises():
    rows, cols = grid_shape(WIDTH, HEIGHT, STRIDE)
    influx = intensify(_map(np.zeros((rows, cols, 2))), (80.0, 40.0), 4.0, 10.0)
    with pytest.raises(InfluxError, match="zero support"):
        sample_points(influx, count=10, sigma_s=10.0)


def test_sample_points_requires_pfa():
    rows, cols = grid_shape(WIDTH, HEIGHT, STRIDE)
    with pytest.raises(InfluxError):
        sample_points(_map(np.ones((rows, cols, 2))), count=10, sigma_s=10.0)


def test_sample_point_set_from_points_recomputes_projections():
    influx = _trained_map()
    original = sample_points(influx, count=30, sigma_s=30.0, seed=1)
    rebuilt = SamplePointSet.from_points(influx, original.points, 30)
    assert np.array_equal(rebuilt.projections, original.projections)


def test_influx_params_derived_radii():
    params = InfluxParams()
    assert params.rho(300, 400) == pytest.approx(25.0)
    assert params.sigma_s(300, 400) == pytest.approx(100.0)
    with pytest.raises(ValueError):
        InfluxParams(backtrack_eps=1.5)
    with pytest.raises(ValueError):
        dataclasses.replace(params, stride=0)


def test_sample_points_concentrate_near_pfa():
    influx = _trained_map()
    points = sample_points(influx, count=60, sigma_s=30.0, seed=2)
    pfa = np.asarray(influx.pfa)
    sampled = np.hypot(*(points.points - pfa).T).mean()
    nodes = influx.points().reshape(-1, 2)
    inside = (nodes[:, 0] >= 7) & (nodes[:, 0] <= WIDTH - 8) & (nodes[:, 1] >= 7) & (nodes[:, 1] <= HEIGHT - 8)
    uniform = np.hypot(*(nodes[inside] - pfa).T).mean()
    assert sampled < uniform


def test_nullify_outbound_is_idempotent():
    rows, cols = grid_shape(WIDTH, HEIGHT, STRIDE)
    once = nullify_outbound(_map(np.random.default_rng(3).normal(size=(rows, cols, 2))))
    twice = nullify_outbound(once)
    assert np.array_equal(twice.vectors, once.vectors)
    assert np.array_equal(twice.weights, once.weights)


@pytest.mark.parametrize("shift", [(24.0, 16.0), (-32.0, 8.0), (40.0, -16.0)])
def test_locate_pfa_moves_with_the_scene(shift):
    source = (68.0, 44.0)
    moved_source = (source[0] + shift[0], source[1] + shift[1])
    pfa = locate_pfa(_map(_diverging(source)))
    moved = locate_pfa(_map(_diverging(moved_source)))
    difference = np.subtract(moved, pfa) - np.asarray(shift)
    assert np.hypot(*difference) <= STRIDE


@pytest.mark.parametrize("direction, expected", [((0.0, 1.0), (None, 0.0)), ((1.0, 0.0), (0.0, None))])
def test_uniform_field_backtracks_to_upstream_border(direction, expected):
    rows, cols = grid_shape(WIDTH, HEIGHT, STRIDE)
    vectors = np.broadcast_to(np.asarray(direction), (rows, cols, 2)).copy()
    pfa = locate_pfa(_map(vectors))
    for axis, value in enumerate(expected):
        if value is not None:
            assert pfa[axis] == pytest.approx(value)
    assert 0.0 <= pfa[0] <= WIDTH - 1
    assert 0.0 <= pfa[1] <= HEIGHT - 1


def test_intensify_keeps_direction_and_pulls_peak_to_pfa():
    rows, cols = grid_shape(WIDTH, HEIGHT, STRIDE)
    points = grid_points(rows, cols, STRIDE)
    vectors = np.zeros((rows, cols, 2))
    vectors[..., 0] = points[..., 0] / WIDTH
    vectors[..., 1] = 0.3 * points[..., 1] / HEIGHT
    plain = _map(vectors)
    pfa = (36.0, 44.0)
    boosted = intensify(plain, pfa, alpha=4.0, rho=20.0)
    assert np.array_equal(boosted.vectors, plain.vectors)
    before, after = plain.effective(), boosted.effective()
    cross = before[..., 0] * after[..., 1] - before[..., 1] * after[..., 0]
    assert np.allclose(cross, 0.0, atol=1e-12)
    assert np.all(np.sum(before * after, axis=-1) >= 0.0)

    def peak_distance(influx):
        magnitude = np.hypot(*np.moveaxis(influx.effective(), -1, 0))
        row, col = np.unravel_index(np.argmax(magnitude), magnitude.shape)
        return np.hypot(*(points[row, col] - np.asarray(pfa)))

    assert peak_distance(boosted) < peak_distance(plain)
    assert peak_distance(boosted) <= STRIDE
