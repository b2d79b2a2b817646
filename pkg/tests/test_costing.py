import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from checks import TooManyPaths, bellman_ford_min, brute_force_min, maze_nodes, random_grid
from conftest import make_env, ramp_env
from terracost import costing as co
from terracost.errors import EmptyPath, EmptyWindow, FormatError, InvalidArg, SegmentError, Unreachable
from terracost.pathseg import Path
from terracost.regnet import Model, ModelSpec
from terracost.synthgen import OracleConfig, OraclePredictor, TrajectoryLog

ORACLE = OraclePredictor(OracleConfig(current_noise=0.0), 7, 1.0 / 40)


class Scripted:
    """Returns preset (w, v) pairs, one per call."""

    def __init__(self, pairs):
        self.pairs = iter(pairs)

    def predict(self, planes):
        w, v = zip(*(next(self.pairs) for _ in range(len(planes))))
        return np.array(w), np.array(v)


class PositiveModel:
    """Untrained network with its speed head mapped to positive values."""

    def __init__(self, seed=0):
        spec = ModelSpec(input_side=40, stem_channels=4, stem_stride=2, channels_per_stage=(4,))
        self.model = Model.initialise(spec, 100.0, 1.0, seed=seed)

    def predict(self, planes):
        w, v = self.model.predict(planes)
        return w, np.exp(v)


@pytest.fixture(scope="module")
def bumpy_env():
    n = 201
    y, x = np.mgrid[0:n, 0:n] * 0.05
    h = 600.0 + 0.3 * np.sin(x / 1.3) * np.cos(y / 1.7) + 0.05 * x
    classes = np.where(x < 5.0, 5, 6)
    return make_env(h, classes)


# -- path cost ---------------------------------------------------------------------


def test_two_segment_example(flat_env):
    path = Path([(1.0, 3.0), (3.0, 3.0)])
    cost = co.path_cost(flat_env, Scripted([(100.0, 0.5), (120.0, 1.0)]), path)
    assert cost.traversal_time == 3.0
    assert cost.energy == 320.0
    assert [sc.time for sc in cost.per_segment] == [2.0, 1.0]
    assert cost.covered_length == 2.0


def test_short_path_is_empty(flat_env):
    with pytest.raises(EmptyPath):
        co.path_cost(flat_env, ORACLE, Path([(1.0, 1.0), (1.5, 1.0)]))


def test_tail_shorter_than_d_is_dropped(flat_env):
    cost = co.path_cost(flat_env, ORACLE, Path([(1.0, 3.0), (3.7, 3.0)]))
    assert len(cost.per_segment) == 2 and cost.covered_length == 2.0


def test_out_of_bounds_segment_reports_index(flat_env):
    with pytest.raises(SegmentError) as info:
        co.path_cost(flat_env, ORACLE, Path([(3.0, 3.0), (5.0, 3.0), (7.0, 3.0)]))
    assert info.value.index == 3  # segment 2 ends on the last cell centre


def test_non_positive_speed_is_rejected(flat_env):
    with pytest.raises(InvalidArg):
        co.path_cost(flat_env, Scripted([(50.0, 0.0)]), Path([(2.0, 3.0), (3.0, 3.0)]))


def test_oracle_on_flat_ground(flat_env):
    cost = co.path_cost(flat_env, ORACLE, Path([(1.0, 3.0), (5.0, 3.0)]))
    assert cost.traversal_time == pytest.approx(4.0, rel=1e-9)
    assert all(sc.energy == pytest.approx(sc.w_hat * sc.time, rel=1e-12) for sc in cost.per_segment)


lattice_walks = st.lists(st.sampled_from([(1, 0), (0, 1), (-1, 0), (0, -1)]), min_size=2, max_size=7)


def _walk(moves, start=(4, 4), lo=2, hi=8):
    pts = [start]
    for dx, dy in moves:
        x, y = pts[-1][0] + dx, pts[-1][1] + dy
        if lo <= x <= hi and lo <= y <= hi:
            pts.append((x, y))
    return [(float(x), float(y)) for x, y in pts]


@given(moves=lattice_walks, cut=st.integers(1, 6), seed=st.integers(0, 3))
def test_split_cost_is_exactly_additive(bumpy_env, moves, cut, seed):
    pts = _walk(moves)
    if len(pts) < 3:
        return
    cut = 1 + cut % (len(pts) - 2)
    for predictor in (ORACLE, PositiveModel(seed)):
        whole = co.path_cost(bumpy_env, predictor, Path(pts))
        head = co.path_cost(bumpy_env, predictor, Path(pts[: cut + 1]))
        tail = co.path_cost(bumpy_env, predictor, Path(pts[cut:]))
        joined = head + tail
        assert joined.traversal_time == whole.traversal_time
        assert joined.energy == whole.energy
        assert joined.per_segment == whole.per_segment


# -- energy from a log --------------------------------------------------------------


def _log(t, v, i):
    t = np.asarray(t, dtype=np.float64)
    z = np.zeros_like(t)
    return TrajectoryLog(t, z, z, np.broadcast_to(np.float64(v), t.shape).copy(),
                         np.broadcast_to(np.float64(i), t.shape).copy(), z)


def test_energy_example():
    log = _log([0.5, 1.0, 1.5, 2.0], 24.0, 5.0)
    assert co.energy_from_log(log, 0.0, 2.0) == pytest.approx(240.0, rel=1e-12)


def test_energy_single_record():
    assert co.energy_from_log(_log([1.0], 24.0, 2.0), 0.0, 3.0) == pytest.approx(144.0, rel=1e-12)


@pytest.mark.parametrize("k", [1, 10, 1000])
def test_energy_identity_for_constant_power(k):
    t_s, t_g = 3.0, 7.5
    t = t_s + (t_g - t_s) * np.arange(1, k + 1) / k
    e = co.energy_from_log(_log(t, 24.0, 3.25), t_s, t_g)
    assert abs(e - 24.0 * 3.25 * (t_g - t_s)) <= 1e-9 * 24.0 * 3.25 * (t_g - t_s)


@given(a=st.floats(0.1, 10.0), b=st.floats(0.1, 10.0))
def test_energy_is_linear_in_power(a, b):
    t = np.arange(1, 11) * 0.1
    rng = np.random.default_rng(0)
    i1, i2 = rng.uniform(1, 5, 10), rng.uniform(1, 5, 10)
    e = lambda cur: co.energy_from_log(_log(t, 24.0, cur), 0.0, 1.0)  # noqa: E731
    assert e(a * i1 + b * i2) == pytest.approx(a * e(i1) + b * e(i2), rel=1e-12)


def test_energy_window_errors():
    log = _log([1.0, 2.0], 24.0, 1.0)
    with pytest.raises(EmptyWindow):
        co.energy_from_log(log, 2.0, 2.0)
    with pytest.raises(EmptyWindow):
        co.energy_from_log(log, 2.0, 3.0)


# -- cost grid ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def flat_grid():
    return co.build_cost_grid(make_env(np.full((121, 121), 600.0), 6), ORACLE)


def test_flat_grid_edges_are_uniform(flat_grid):
    for k in range(8):
        t = flat_grid.time[..., k]
        t = t[np.isfinite(t)]
        assert len(t) > 0
        assert np.ptp(t) <= 1e-6
        assert t[0] == pytest.approx(co.SQRT2 if k % 2 else 1.0, rel=1e-9)


def test_edges_need_room_for_their_patch(flat_grid):
    assert flat_grid.shape == (7, 7)
    # on the north border only the southward patch stays inside the raster
    south = 6
    live = np.isfinite(flat_grid.time[0, 1:-1])
    assert live[:, south].all() and live.sum() == 5
    assert not np.isfinite(flat_grid.time[0, 0]).any()
    assert np.isfinite(flat_grid.time[3, 3]).all()


def test_uphill_edge_costs_more_energy():
    grid = co.build_cost_grid(ramp_env(slope_deg=10.0), ORACLE)
    east, west = 0, 4
    assert grid.energy[3, 2, east] > grid.energy[3, 3, west]
    assert grid.time[3, 2, east] > grid.time[3, 3, west]


def test_non_traversable_nodes_are_absent():
    classes = np.full((121, 121), 6)
    classes[50:71, 50:71] = 2
    grid = co.build_cost_grid(make_env(np.full((121, 121), 600.0), classes), ORACLE)
    assert not grid.nodes[3, 3]
    assert not np.isfinite(grid.time[3, 3]).any()
    assert not np.isfinite(grid.time[2, 2, 7])


def test_grid_csv_round_trip(tmp_path, flat_grid):
    p = tmp_path / "grid.csv"
    co.write_cost_grid_csv(flat_grid, p)
    back = co.read_cost_grid_csv(p, flat_grid.geo, flat_grid.nodes)
    for name in ("time", "energy", "w_hat", "v_hat"):
        a, b = getattr(flat_grid, name), getattr(back, name)
        assert np.array_equal(np.isfinite(a), np.isfinite(b))
        np.testing.assert_allclose(b[np.isfinite(b)], a[np.isfinite(a)], rtol=1e-12)
    p.write_text("row,col,dir,time\n")
    with pytest.raises(FormatError):
        co.read_cost_grid_csv(p, flat_grid.geo, flat_grid.nodes)


# -- planning --------------------------------------------------------------------------


def test_flat_plan_is_straight(flat_grid):
    path, cost = co.plan(flat_grid, (1.0, 3.0), (5.0, 3.0))
    assert path.points.tolist() == [[float(x), 3.0] for x in range(1, 6)]
    assert cost.traversal_time == pytest.approx(4.0, rel=1e-9)
    assert cost.covered_length == 4.0


def test_plan_to_self(flat_grid):
    path, cost = co.plan(flat_grid, (3.0, 3.0), (3.0, 3.0))
    assert path is None
    assert cost.traversal_time == 0.0 and cost.energy == 0.0


def test_island_goal_is_unreachable():
    nodes = np.ones((5, 5), dtype=bool)
    nodes[2, :] = False
    grid = random_grid(nodes, np.random.default_rng(0))
    with pytest.raises(Unreachable):
        co.shortest_nodes(grid, (0, 0), (4, 4))
    with pytest.raises(Unreachable):
        co.shortest_nodes(grid, (0, 0), (2, 2))


def test_unknown_objective(flat_grid):
    with pytest.raises(InvalidArg):
        co.shortest_nodes(flat_grid, (1, 1), (2, 2), "distance")


def test_route_cost_matches_search_cost():
    grid = random_grid(np.ones((6, 6), dtype=bool), np.random.default_rng(5))
    for objective in ("time", "energy"):
        c, nodes = co.shortest_nodes(grid, (0, 0), (5, 4), objective)
        rc = co.route_cost(grid, nodes)
        assert c == pytest.approx(rc.traversal_time if objective == "time" else rc.energy, rel=1e-12)


@pytest.mark.parametrize("side", [2, 3, 4])
@pytest.mark.parametrize("seed", range(3))
def test_planner_matches_exhaustive_search_on_open_grids(side, seed):
    rng = np.random.default_rng(seed)
    grid = random_grid(np.ones((side, side), dtype=bool), rng)
    for objective in ("time", "energy"):
        c, _ = co.shortest_nodes(grid, (0, 0), (side - 1, side - 1), objective)
        assert c == pytest.approx(brute_force_min(grid, (0, 0), (side - 1, side - 1), objective), rel=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_planner_matches_exhaustive_search_on_20x20_mazes(seed):
    rng = np.random.default_rng(100 + seed)
    nodes = maze_nodes(10, rng, extra_openings=6)
    assert nodes.shape == (20, 20)
    grid = random_grid(nodes, rng, diagonals=False)
    for objective in ("time", "energy"):
        c, _ = co.shortest_nodes(grid, (0, 0), (19, 19), objective)
        try:
            bf = brute_force_min(grid, (0, 0), (19, 19), objective)
        except TooManyPaths:
            pytest.fail("maze has too many simple paths for exhaustive search")
        assert c == pytest.approx(bf, rel=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_planner_matches_bellman_ford_on_20x20_open_grids(seed):
    rng = np.random.default_rng(seed)
    nodes = rng.random((20, 20)) > 0.15
    nodes[0, 0] = nodes[19, 19] = True
    grid = random_grid(nodes, rng)
    for objective in ("time", "energy"):
        ref = bellman_ford_min(grid, (0, 0), (19, 19), objective)
        if not math.isfinite(ref):
            with pytest.raises(Unreachable):
                co.shortest_nodes(grid, (0, 0), (19, 19), objective)
            continue
        c, _ = co.shortest_nodes(grid, (0, 0), (19, 19), objective)
        assert c == pytest.approx(ref, rel=1e-12)
