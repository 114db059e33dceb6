import json
import math

import numpy as np
import pytest

from fgnav.core import ContractViolation, Se2Pose
from fgnav.distance import FREE, OCCUPIED, GridMap
from fgnav.sim import (
    CSV_COLUMNS,
    ClearanceOracle,
    Disc,
    LidarConfig,
    NavRun,
    Polygon,
    SimWorld,
    compute_metrics,
    episode_seeds,
    obstacle_points,
    obstacles_from_json,
    raycast_scan,
    replay_ground_truth,
    run_navigation,
    true_ranges,
    write_aggregate_csv,
)
from fgnav.worlds import circuit_map, goal_sequence, load_circuit, load_goals, shipped_path, square_room

from .oracles import ray_segment

ROOM8 = square_room(8.0)


def quiet_world(grid, obstacles=(), **lidar):
    return SimWorld(grid, list(obstacles), lidar=LidarConfig(noise_sigma=0.0, **lidar))


def open_grid():
    return GridMap(np.full((40, 40), FREE, np.int8), 0.05, Se2Pose(-1.0, -1.0, 0.0))


# -- lidar ---------------------------------------------------------------------------

def test_perpendicular_wall_at_two_meters():
    grid = square_room()
    pose = Se2Pose(1.0, 0.0, 0.0)
    world = quiet_world(grid)
    r = true_ranges(world, pose)
    ahead = int(np.argmin(np.abs(world.lidar.angles())))
    assert abs(r[ahead] - 2.0) <= grid.resolution / 2
    scan = raycast_scan(world, pose)
    hit = scan.endpoints[np.argmin(np.abs(np.arctan2(scan.endpoints[:, 1], scan.endpoints[:, 0])))]
    np.testing.assert_allclose(hit, [r[ahead], 0.0], atol=1e-9)


def test_grid_ranges_match_cell_edge_oracle():
    grid = square_room()
    pose = Se2Pose(0.3, -0.4, 0.7)
    r = true_ranges(quiet_world(grid), pose)
    ang = pose.theta + LidarConfig().angles()
    # interior walls are axis-aligned: their faces are at +-3 m
    for a, got in zip(ang, r):
        d = np.array([math.cos(a), math.sin(a)])
        o = np.array([pose.x, pose.y])
        faces = [np.array(p) for p in ([3, -3], [3, 3], [-3, 3], [-3, -3])]
        want = min(ray_segment(o, d, faces[i], faces[(i + 1) % 4]) for i in range(4))
        assert abs(got - want) < 1e-9


def test_miss_emits_no_endpoint():
    scan = raycast_scan(SimWorld(open_grid()), Se2Pose())
    assert scan.endpoints.shape == (0, 2)


def test_beam_past_max_range_is_dropped():
    world = quiet_world(square_room(), max_range=1.5)
    # only the wall 1 m ahead is within reach
    scan = raycast_scan(world, Se2Pose(2.0, 0.0, 0.0))
    r = np.hypot(*scan.endpoints.T)
    assert len(r) > 0 and np.all(r < 1.5)
    assert np.all(scan.endpoints[:, 0] > 0.99)


def test_same_seed_gives_identical_scan():
    w1 = SimWorld(square_room(), rng_seed=11)
    w2 = SimWorld(square_room(), rng_seed=11)
    w3 = SimWorld(square_room(), rng_seed=12)
    pose = Se2Pose(0.2, 0.1, 0.3)
    a, b, c = (raycast_scan(w, pose).endpoints for w in (w1, w2, w3))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_disc_ranges_land_on_the_circle():
    disc = Disc(1.0, 0.5, 0.3)
    world = quiet_world(open_grid(), [disc])
    r = true_ranges(world, Se2Pose())
    ang = world.lidar.angles()
    hit = np.isfinite(r)
    assert hit.any()
    p = np.stack([r[hit] * np.cos(ang[hit]), r[hit] * np.sin(ang[hit])], 1)
    np.testing.assert_allclose(np.hypot(p[:, 0] - 1.0, p[:, 1] - 0.5), 0.3, atol=1e-9)
    # beams that miss pass farther than the radius from the center
    d = np.stack([np.cos(ang), np.sin(ang)], 1)[~hit]
    fwd = d @ np.array([1.0, 0.5])
    perp = np.abs(d[:, 0] * 0.5 - d[:, 1] * 1.0)
    assert np.all((perp > 0.3 - 1e-9) | (fwd < 0))


def test_polygon_ranges_match_ray_segment_oracle():
    poly = Polygon([[0.5, -0.3], [0.9, -0.2], [0.8, 0.4], [0.4, 0.2]])
    world = quiet_world(open_grid(), [poly])
    pose = Se2Pose(-0.2, 0.1, 0.4)
    r = true_ranges(world, pose)
    o = np.array([pose.x, pose.y])
    a, b = poly.edges()
    for ang, got in zip(pose.theta + world.lidar.angles(), r):
        d = np.array([math.cos(ang), math.sin(ang)])
        want = min(ray_segment(o, d, p, q) for p, q in zip(a, b))
        assert got == pytest.approx(want, abs=1e-9) or (math.isinf(got) and math.isinf(want))


def test_obstacles_from_json_and_outline_spacing():
    obs = obstacles_from_json({"discs": [{"x": 1, "y": 2, "radius": 0.5}],
                               "polygons": [{"vertices": [[0, 0], [1, 0], [0, 1]]}]})
    assert isinstance(obs[0], Disc) and isinstance(obs[1], Polygon)
    pts = obstacle_points(obs[:1], 0.05)
    np.testing.assert_allclose(np.hypot(pts[:, 0] - 1, pts[:, 1] - 2), 0.5)
    gaps = np.hypot(*np.diff(np.vstack([pts, pts[:1]]), axis=0).T)
    assert gaps.max() <= 0.05 + 1e-12
    with pytest.raises(ValueError):
        Polygon([[0, 0], [1, 1]])


# -- clearance -----------------------------------------------------------------------

def test_clearance_oracle_against_brute_force():
    rng = np.random.default_rng(3)
    cells = np.full((30, 30), FREE, np.int8)
    cells[rng.random((30, 30)) < 0.05] = OCCUPIED
    grid = GridMap(cells, 0.1, Se2Pose(-1.5, -1.5, 0.0))
    world = SimWorld(grid, [Disc(0.3, 0.3, 0.2)])
    oracle = ClearanceOracle(world)
    pts = rng.uniform(-1.4, 1.4, (200, 2))
    got = oracle(pts)
    rows, cols = np.nonzero(cells == OCCUPIED)
    lo = np.stack([grid.origin.x + cols * 0.1, grid.origin.y + rows * 0.1], 1)
    for p, g in zip(pts, got):
        dx = np.maximum(np.maximum(lo[:, 0] - p[0], p[0] - lo[:, 0] - 0.1), 0)
        dy = np.maximum(np.maximum(lo[:, 1] - p[1], p[1] - lo[:, 1] - 0.1), 0)
        want = min(np.hypot(dx, dy).min(), max(math.hypot(p[0] - 0.3, p[1] - 0.3) - 0.2, 0.0))
        assert g == pytest.approx(want, abs=1e-9)
    assert oracle.in_collision(np.array([[0.3, 0.3]]))[0]


# -- metrics -------------------------------------------------------------------------

def make_run(gt, est, dt=0.1):
    t = dt * np.arange(len(gt))[:, None]
    return NavRun(goals=[(0.0, 0.0, None)],
                  gt_trajectory=np.hstack([t, gt]),
                  est_trajectory=np.hstack([t, est]),
                  controls=np.zeros((0, 3)))


def test_metrics_on_collinear_poses():
    gt = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    m = compute_metrics(make_run(gt, gt))
    assert m.path_length == pytest.approx(2.0)
    assert m.ape_trans == {"mean": 0.0, "std": 0.0}
    assert m.duration == pytest.approx(0.2)


def test_metrics_constant_offset():
    gt = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    m = compute_metrics(make_run(gt, gt + [0.0, 0.1, 0.0]))
    assert m.ape_trans["mean"] == pytest.approx(0.1)
    assert m.ape_trans["std"] == pytest.approx(0.0, abs=1e-15)
    assert m.ape_rot["mean"] == 0.0


def test_metrics_rotation_error_wraps():
    gt = np.array([[0.0, 0, math.pi - 0.01]])
    est = np.array([[0.0, 0, -math.pi + 0.01]])
    assert compute_metrics(make_run(gt, est)).ape_rot["mean"] == pytest.approx(0.02)


def test_metrics_reject_mismatched_timestamps():
    run = make_run(np.zeros((3, 3)), np.zeros((3, 3)))
    run.est_trajectory[1, 0] += 0.05
    with pytest.raises(ContractViolation):
        compute_metrics(run)
    run = make_run(np.zeros((3, 3)), np.zeros((3, 3)))
    run.est_trajectory = run.est_trajectory[:2]
    with pytest.raises(ContractViolation):
        compute_metrics(run)


# -- closed loop ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def straight_run():
    world = SimWorld(ROOM8, rng_seed=5)
    return run_navigation(world, [(1.5, 0.0, None)], Se2Pose(-1.5, 0.0, 0.0))


@pytest.fixture(scope="module")
def behind_run():
    return run_navigation(SimWorld(ROOM8, rng_seed=5), [(-3.0, 0.0, None)], Se2Pose())


@pytest.fixture(scope="module")
def disc_run():
    world = SimWorld(ROOM8, [Disc(0.0, 0.1, 0.4)], rng_seed=5)
    return run_navigation(world, [(2.5, 0.0, None)], Se2Pose(-2.5, 0.0, 0.0))


def test_goal_ahead_is_reached(straight_run):
    run = straight_run
    assert [e["type"] for e in run.events] == ["goal_reached"]
    m = compute_metrics(run)
    # the run ends once inside the goal tolerance, up to 0.2 m short
    assert 3.0 - 0.2 <= m.path_length <= 3.6
    assert np.hypot(*(run.gt_trajectory[-1, 1:3] - [1.5, 0.0])) < 0.25


def test_goal_behind_drives_backwards(behind_run):
    run = behind_run
    assert run.events[-1]["type"] == "goal_reached"
    v = run.controls[:, 1]
    assert v.min() < 0
    assert np.any((v[:-1] < 0) & (v[1:] >= 0)) or np.any((v[:-1] >= 0) & (v[1:] < 0))


def test_disc_on_route_is_avoided(disc_run):
    run = disc_run
    assert run.events[-1]["type"] == "goal_reached"
    assert not run.safety_violation
    assert compute_metrics(run).min_clearance >= 0.05


def test_goal_with_heading_is_reached_in_position_and_heading():
    world = SimWorld(ROOM8, rng_seed=9)
    run = run_navigation(world, [(1.0, 0.0, math.pi / 2)], Se2Pose(-1.0, 0.0, 0.0))
    assert run.events[-1]["type"] == "goal_reached"
    est = run.est_trajectory[-1]
    assert math.hypot(est[1] - 1.0, est[2]) < 0.2
    assert abs(math.remainder(est[3] - math.pi / 2, 2 * math.pi)) < 0.15


@pytest.mark.parametrize("name", ["straight_run", "behind_run", "disc_run"])
def test_run_invariants(name, request):
    run = request.getfixturevalue(name)
    T_s = 0.1
    np.testing.assert_allclose(replay_ground_truth(run, T_s), run.gt_trajectory[:, 1:], atol=1e-9)
    assert np.all(np.abs(run.controls[:, 1]) <= 1.0 + 1e-4)
    assert np.all(np.abs(run.controls[:, 2]) <= 1.0 + 1e-4)
    assert np.array_equal(run.gt_trajectory[:, 0], run.est_trajectory[:, 0])
    assert np.all(np.diff(run.gt_trajectory[:, 0]) > 0)
    assert not any(s["clamp_fired"] for s in run.solves if s["converged"])
    back = NavRun.from_dict(json.loads(run.to_json()))
    assert back.to_json() == run.to_json()


def test_same_seed_same_run(straight_run):
    again = run_navigation(SimWorld(ROOM8, rng_seed=5), [(1.5, 0.0, None)], Se2Pose(-1.5, 0.0, 0.0))
    assert again.to_json() == straight_run.to_json()


def test_aggregate_csv(tmp_path, straight_run, behind_run):
    path = tmp_path / "agg.csv"
    write_aggregate_csv(str(path), [straight_run, behind_run])
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == CSV_COLUMNS
    assert len(lines) == 3
    assert lines[1].startswith("0,0,") and lines[2].startswith("1,0,")


def test_episode_seeds_are_stable_and_distinct():
    a = episode_seeds(7, 5)
    assert a == episode_seeds(7, 5)
    assert len(set(a)) == 5
    assert episode_seeds(7, 3) == a[:3]
    assert episode_seeds(8, 5) != a


# -- worlds --------------------------------------------------------------------------

def test_goal_sequence_loop_without_start():
    goals = [(0.0, 0.0, None), (1.0, 0.0, 0.5), (1.0, 1.0, None)]
    start, todo = goal_sequence(goals, loop=True)
    assert start == Se2Pose(0.0, 0.0, 0.0)
    assert todo == goals[1:] + goals[:1]
    start, todo = goal_sequence(goals, loop=False, start=Se2Pose(5, 5, 0))
    assert start == Se2Pose(5, 5, 0)
    assert todo == goals


def test_load_goals(tmp_path):
    p = tmp_path / "g.json"
    p.write_text(json.dumps({"goals": [{"x": 1, "y": 2}, {"x": 3, "y": 4, "theta": 0.5}],
                             "start": {"x": 0, "y": 0}}))
    goals, loop, start = load_goals(str(p))
    assert goals == [(1.0, 2.0, None), (3.0, 4.0, 0.5)]
    assert loop is False and start == Se2Pose(0, 0, 0)
    p.write_text(json.dumps({"goals": []}))
    with pytest.raises(ValueError):
        load_goals(str(p))


def test_shipped_circuit_matches_generator():
    shipped = load_circuit()
    assert np.array_equal(shipped.cells, circuit_map().cells)
    goals, loop, _ = load_goals(shipped_path("circuit_goals.json"))
    assert loop and len(goals) >= 4
    oracle = ClearanceOracle(SimWorld(shipped))
    assert np.all(oracle(np.array([g[:2] for g in goals])) > 0.5)
