"""Closed-loop navigation harness: plant, lidar, localize -> plan -> control.

Everything random is drawn from generators seeded by ``SimWorld.rng_seed``,
so an episode is a pure function of the world, goals and configs.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .constraints import ConstrainedSolverConfig
from .core import ContractViolation, Se2Pose, wrap_angle
from .distance import OCCUPIED, DistanceField, GridMap, build_distance_field
from .localizer import LocalizerConfig, OdometryPrior, Scan, localize
from .mpc import (
    ControlInput,
    GlobalPath,
    MpcConfig,
    PlanningError,
    _project,
    blocked_cells,
    default_solver_config,
    mpc_step,
    plan_global,
    unicycle_step,
)

log = logging.getLogger(__name__)


# -- world -----------------------------------------------------------------------

@dataclass
class Disc:
    x: float
    y: float
    radius: float


@dataclass
class Polygon:
    vertices: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        if len(self.vertices) < 3:
            raise ValueError("a polygon needs at least three vertices")

    def edges(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.vertices, np.roll(self.vertices, -1, axis=0)


Obstacle = Union[Disc, Polygon]


@dataclass
class LidarConfig:
    n_beams: int = 360
    fov: float = 2.0 * math.pi
    max_range: float = 10.0
    noise_sigma: float = 0.01

    def angles(self) -> np.ndarray:
        """Beam angles in the robot frame, centered on the heading."""
        if abs(self.fov - 2.0 * math.pi) < 1e-12:
            return -math.pi + self.fov * np.arange(self.n_beams) / self.n_beams
        return -0.5 * self.fov + self.fov * np.arange(self.n_beams) / max(self.n_beams - 1, 1)


@dataclass
class OdomNoise:
    sigma_v: float = 0.05
    sigma_w: float = 0.05


@dataclass
class SimWorld:
    static_map: GridMap
    extra_obstacles: List[Obstacle] = field(default_factory=list)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    odom_noise: OdomNoise = field(default_factory=OdomNoise)
    rng_seed: int = 0


def obstacles_from_json(data: dict) -> List[Obstacle]:
    """``{discs: [{x, y, radius}], polygons: [{vertices: [[x, y], ...]}]}``."""
    out: List[Obstacle] = []
    for d in data.get("discs", []):
        out.append(Disc(float(d["x"]), float(d["y"]), float(d.get("radius", d.get("r")))))
    for p in data.get("polygons", []):
        out.append(Polygon(p["vertices"] if isinstance(p, dict) else p))
    return out


def obstacle_points(obstacles: Sequence[Obstacle], spacing: float) -> np.ndarray:
    """Outline samples of each obstacle, at most ``spacing`` apart."""
    pts = []
    for ob in obstacles:
        if isinstance(ob, Disc):
            n = max(8, int(math.ceil(2 * math.pi * ob.radius / spacing)))
            a = 2 * math.pi * np.arange(n) / n
            pts.append(np.stack([ob.x + ob.radius * np.cos(a), ob.y + ob.radius * np.sin(a)], 1))
        else:
            for a, b in zip(*ob.edges()):
                n = max(1, int(math.ceil(np.hypot(*(b - a)) / spacing)))
                t = np.arange(n)[:, None] / n
                pts.append(a + t * (b - a))
    return np.vstack(pts) if pts else np.zeros((0, 2))


# -- lidar -------------------------------------------------------------------------

def _grid_ranges(grid: GridMap, origin: np.ndarray, dirs: np.ndarray, max_range: float) -> np.ndarray:
    # march samples along every beam in cell units; between two samples the
    # ray can also clip one corner cell, so both candidates are tested too.
    # The range is the smallest exact slab entry over occupied cells touched.
    res = grid.resolution
    occ = grid.cells == OCCUPIED
    o = grid.world_to_map(origin[None, :])[0]
    ct, st = math.cos(grid.origin.theta), math.sin(grid.origin.theta)
    du = (ct * dirs[:, 0] + st * dirs[:, 1])
    dv = (-st * dirs[:, 0] + ct * dirs[:, 1])
    reach = min(max_range / res, math.hypot(grid.width, grid.height) + math.hypot(*o))
    step = 1.0 / 3.0
    t = step * np.arange(0, int(math.ceil(reach / step)) + 2)
    col = np.floor(o[0] + du[:, None] * t[None, :]).astype(np.intp)
    row = np.floor(o[1] + dv[:, None] * t[None, :]).astype(np.intp)
    cand_c = np.concatenate([col, col[:, 1:], col[:, :-1]], axis=1)
    cand_r = np.concatenate([row, row[:, :-1], row[:, 1:]], axis=1)
    inside = (cand_r >= 0) & (cand_r < grid.height) & (cand_c >= 0) & (cand_c < grid.width)
    hit = np.zeros(cand_c.shape, dtype=bool)
    hit[inside] = occ[cand_r[inside], cand_c[inside]]
    out = np.full(len(dirs), np.inf)
    b, k = np.nonzero(hit)
    if b.size == 0:
        return out
    c0 = cand_c[b, k].astype(float)
    r0 = cand_r[b, k].astype(float)
    u, v = du[b], dv[b]
    with np.errstate(divide="ignore", invalid="ignore"):
        tu0, tu1 = (c0 - o[0]) / u, (c0 + 1 - o[0]) / u
        tv0, tv1 = (r0 - o[1]) / v, (r0 + 1 - o[1]) / v
    inside_u = (o[0] >= c0) & (o[0] <= c0 + 1)
    inside_v = (o[1] >= r0) & (o[1] <= r0 + 1)
    enter_u = np.where(u != 0, np.minimum(tu0, tu1), np.where(inside_u, -np.inf, np.inf))
    leave_u = np.where(u != 0, np.maximum(tu0, tu1), np.where(inside_u, np.inf, -np.inf))
    enter_v = np.where(v != 0, np.minimum(tv0, tv1), np.where(inside_v, -np.inf, np.inf))
    leave_v = np.where(v != 0, np.maximum(tv0, tv1), np.where(inside_v, np.inf, -np.inf))
    enter = np.maximum(enter_u, enter_v)
    leave = np.minimum(leave_u, leave_v)
    ok = (enter <= leave) & (leave >= 0)
    np.minimum.at(out, b[ok], np.maximum(enter[ok], 0.0) * res)
    return out


def _disc_ranges(ob: Disc, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    oc = origin - np.array([ob.x, ob.y])
    b = dirs @ oc
    c = oc @ oc - ob.radius ** 2
    disc = b * b - c
    out = np.full(len(dirs), np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t1, t2 = -b - sq, -b + sq
    out[ok & (t1 >= 0)] = t1[ok & (t1 >= 0)]
    inside = ok & (t1 < 0) & (t2 >= 0)
    out[inside] = 0.0
    return out


def _polygon_ranges(ob: Polygon, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    a, b = ob.edges()
    e = b - a                                    # (E, 2)
    w = a - origin                               # (E, 2)
    # solve origin + t*dir = a + s*e for every beam/edge pair
    den = dirs[:, None, 0] * e[None, :, 1] - dirs[:, None, 1] * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[None, :, 0] * e[None, :, 1] - w[None, :, 1] * e[None, :, 0]) / den
        s = (w[None, :, 0] * dirs[:, None, 1] - w[None, :, 1] * dirs[:, None, 0]) / den
    valid = (den != 0) & (t >= 0) & (s >= 0) & (s <= 1)
    t = np.where(valid, t, np.inf)
    out = t.min(axis=1)
    if _inside_polygon(ob, origin[None, :])[0]:
        out[:] = 0.0
    return out


def _inside_polygon(ob: Polygon, pts: np.ndarray) -> np.ndarray:
    a, b = ob.edges()
    x, y = pts[:, 0:1], pts[:, 1:2]
    cond = (a[None, :, 1] > y) != (b[None, :, 1] > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xs = a[None, :, 0] + (y - a[None, :, 1]) * (b[None, :, 0] - a[None, :, 0]) / (
            b[None, :, 1] - a[None, :, 1])
    return (np.count_nonzero(cond & (x < xs), axis=1) % 2) == 1


def true_ranges(world: SimWorld, pose: Se2Pose) -> np.ndarray:
    """Noise-free range of every beam; ``inf`` where nothing is hit."""
    angles = pose.theta + world.lidar.angles()
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    origin = np.array([pose.x, pose.y])
    r = _grid_ranges(world.static_map, origin, dirs, world.lidar.max_range)
    for ob in world.extra_obstacles:
        other = _disc_ranges(ob, origin, dirs) if isinstance(ob, Disc) else _polygon_ranges(ob, origin, dirs)
        r = np.minimum(r, other)
    return r


def raycast_scan(world: SimWorld, true_pose: Se2Pose,
                 rng: Optional[np.random.Generator] = None, timestamp: float = 0.0) -> Scan:
    """Simulated scan in the robot frame; beams without a return are dropped.

    Without ``rng`` a generator seeded from ``world.rng_seed`` is used, so the
    same seed and pose always give the same scan.
    """
    rng = np.random.default_rng(world.rng_seed) if rng is None else rng
    lid = world.lidar
    r = true_ranges(world, true_pose)
    noise = rng.normal(0.0, lid.noise_sigma, r.size) if lid.noise_sigma > 0 else np.zeros(r.size)
    hit = r < lid.max_range
    rn = np.maximum(r[hit] + noise[hit], 0.0)
    a = lid.angles()[hit]
    pts = np.stack([rn * np.cos(a), rn * np.sin(a)], axis=1)
    return Scan(pts, lid.max_range, timestamp)


# -- clearance ---------------------------------------------------------------------

class ClearanceOracle:
    """Exact distance from points to occupied cells (as squares) and extra obstacles."""

    def __init__(self, world: SimWorld):
        grid = world.static_map
        self.grid = grid
        rc = np.argwhere(grid.cells == OCCUPIED)
        self._centers = rc[:, ::-1] + 0.5          # (col, row) in cell units
        self._tree = cKDTree(self._centers) if len(rc) else None
        self.obstacles = list(world.extra_obstacles)

    def __call__(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        out = np.full(len(pts), np.inf)
        if self._tree is not None:
            uv = self.grid.world_to_map(pts)
            k = min(9, len(self._centers))
            _, idx = self._tree.query(uv, k=k)
            idx = np.asarray(idx).reshape(len(pts), -1)
            delta = np.abs(self._centers[idx] - uv[:, None, :]) - 0.5
            d = np.hypot(*np.maximum(delta, 0.0).transpose(2, 0, 1)).min(axis=1)
            out = np.minimum(out, d * self.grid.resolution)
        for ob in self.obstacles:
            if isinstance(ob, Disc):
                d = np.maximum(np.hypot(pts[:, 0] - ob.x, pts[:, 1] - ob.y) - ob.radius, 0.0)
            else:
                a, b = ob.edges()
                e = b - a
                w = pts[:, None, :] - a[None, :, :]
                t = np.clip((w * e).sum(-1) / (e * e).sum(-1), 0.0, 1.0)
                d = np.hypot(*(w - t[..., None] * e).transpose(2, 0, 1)).min(axis=1)
                d[_inside_polygon(ob, pts)] = 0.0
            out = np.minimum(out, d)
        return out

    def in_collision(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        rc = self.grid.cell_of(pts)
        h, w = self.grid.cells.shape
        inside = (rc[:, 0] >= 0) & (rc[:, 0] < h) & (rc[:, 1] >= 0) & (rc[:, 1] < w)
        hit = np.zeros(len(pts), dtype=bool)
        hit[inside] = self.grid.cells[rc[inside, 0], rc[inside, 1]] == OCCUPIED
        for ob in self.obstacles:
            if isinstance(ob, Disc):
                hit |= np.hypot(pts[:, 0] - ob.x, pts[:, 1] - ob.y) < ob.radius
            else:
                hit |= _inside_polygon(ob, pts)
        return hit


# -- navigation run ------------------------------------------------------------------

@dataclass
class NavConfig:
    mpc: MpcConfig = field(default_factory=MpcConfig)
    solver: ConstrainedSolverConfig = field(default_factory=default_solver_config)
    localizer: LocalizerConfig = field(default_factory=LocalizerConfig)
    goal_tolerance: float = 0.2
    heading_tolerance: float = 0.15
    goal_timeout: float = 60.0
    replan_period: float = 2.0
    inflation_radius: float = 0.3
    dynamic_threshold: float = 0.15
    blocked_lookahead: float = 3.0
    field_range: float = 2.0
    localize: bool = True


Goal = Tuple[float, float, Optional[float]]


@dataclass
class NavRun:
    """One episode. Trajectory rows are ``[t, x, y, theta]``, control rows ``[t, v, w]``."""

    goals: List[Goal]
    gt_trajectory: np.ndarray
    est_trajectory: np.ndarray
    controls: np.ndarray
    events: List[dict] = field(default_factory=list)
    noise: Optional[np.ndarray] = None
    clearance: Optional[np.ndarray] = None
    segments: List[dict] = field(default_factory=list)
    solves: List[dict] = field(default_factory=list)
    seed: Optional[int] = None
    safety_violation: bool = False

    def __post_init__(self):
        self.gt_trajectory = np.asarray(self.gt_trajectory, dtype=float).reshape(-1, 4)
        self.est_trajectory = np.asarray(self.est_trajectory, dtype=float).reshape(-1, 4)
        self.controls = np.asarray(self.controls, dtype=float).reshape(-1, 3)

    def to_dict(self) -> dict:
        def rows(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "seed": self.seed,
            "goals": [list(g) for g in self.goals],
            "events": self.events,
            "segments": self.segments,
            "safety_violation": self.safety_violation,
            "gt_trajectory": rows(self.gt_trajectory),
            "est_trajectory": rows(self.est_trajectory),
            "controls": rows(self.controls),
            "noise": rows(self.noise),
            "clearance": rows(self.clearance),
            "solves": self.solves,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "NavRun":
        opt = lambda k: None if d.get(k) is None else np.asarray(d[k], dtype=float)  # noqa: E731
        return cls(
            goals=[tuple(g) for g in d["goals"]],
            gt_trajectory=d["gt_trajectory"],
            est_trajectory=d["est_trajectory"],
            controls=d["controls"],
            events=d.get("events", []),
            noise=opt("noise"),
            clearance=opt("clearance"),
            segments=d.get("segments", []),
            solves=d.get("solves", []),
            seed=d.get("seed"),
            safety_violation=bool(d.get("safety_violation", False)),
        )


def _with_points(grid: GridMap, pts: np.ndarray) -> GridMap:
    cells = grid.cells.copy()
    if len(pts):
        rc = grid.cell_of(pts)
        ok = (rc[:, 0] >= 0) & (rc[:, 0] < grid.height) & (rc[:, 1] >= 0) & (rc[:, 1] < grid.width)
        cells[rc[ok, 0], rc[ok, 1]] = OCCUPIED
    return GridMap(cells, grid.resolution, grid.origin)


def _snap_free(grid: GridMap, blocked: np.ndarray, p) -> np.ndarray:
    """``p`` itself, or the center of the nearest unblocked cell when p is blocked."""
    r, c = grid.cell_of(np.asarray(p, dtype=float)[None, :])[0]
    h, w = blocked.shape
    if 0 <= r < h and 0 <= c < w and not blocked[r, c]:
        return np.asarray(p, dtype=float)
    if blocked.all():
        raise PlanningError("no free cell in the map")
    r, c = min(max(r, 0), h - 1), min(max(c, 0), w - 1)
    _, (ri, ci) = ndimage.distance_transform_edt(blocked, return_indices=True)
    return grid.cell_center(ri[r, c], ci[r, c])


class Navigator:
    """The localize -> plan -> control stack, one cycle per :meth:`step` call."""

    def __init__(self, static_map: GridMap, cfg: NavConfig, start: Se2Pose):
        self.cfg = cfg
        self.map = static_map
        # localization ignores unknown space, planning and the potential treat it as occupied
        self.loc_field = build_distance_field(static_map, cfg.field_range, unknown_as_occupied=False)
        self.plan_field = build_distance_field(static_map, cfg.field_range, unknown_as_occupied=True)
        self.plan_map = GridMap(np.where(static_map.cells == 0, 0, OCCUPIED).astype(np.int8),
                                static_map.resolution, static_map.origin)
        self.estimate = start
        self.command = ControlInput(0.0, 0.0)
        self.path: Optional[GlobalPath] = None
        self.last_plan = -np.inf
        self.warm = None
        self.dynamic = np.zeros((0, 2))

    def set_goal(self, goal: Goal):
        self.goal = goal
        self.path = None
        self.warm = None
        self.hold = None

    def localize(self, scan: Scan, odom_command: ControlInput):
        prior = OdometryPrior(unicycle_step(self.estimate, odom_command, self.cfg.mpc.T_s))
        if not self.cfg.localize:
            self.estimate = prior.predicted_pose
            return None
        self.estimate, rep = localize(scan, prior, self.loc_field, self.cfg.localizer)
        return rep

    def update_dynamic(self, scan: Scan):
        pts = self.estimate.transform_points(scan.endpoints) if len(scan.endpoints) else np.zeros((0, 2))
        if len(pts):
            d = self.plan_field.distance_at(pts)
            pts = pts[d > self.cfg.dynamic_threshold]
        self.dynamic = pts
        self.field = self.plan_field.with_points(pts) if len(pts) else self.plan_field

    def reached(self) -> bool:
        gx, gy, gth = self.goal
        e = self.estimate
        if math.hypot(e.x - gx, e.y - gy) >= self.cfg.goal_tolerance:
            return False
        return gth is None or abs(wrap_angle(e.theta - gth)) < self.cfg.heading_tolerance

    def _path_blocked(self) -> bool:
        if self.path is None or not len(self.dynamic):
            return False
        wp = self.path.waypoints
        if len(wp) < 2:
            return False
        cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(wp, axis=0).T))])
        s0 = _project(wp, np.array([self.estimate.x, self.estimate.y]), cum)
        s = np.arange(s0, min(s0 + self.cfg.blocked_lookahead, cum[-1]), self.map.resolution)
        if not len(s):
            return False
        samples = np.stack([np.interp(s, cum, wp[:, 0]), np.interp(s, cum, wp[:, 1])], axis=1)
        d, _ = cKDTree(self.dynamic).query(samples)
        return bool(np.min(d) < self.cfg.inflation_radius)

    def plan(self, t: float):
        due = self.path is None or t - self.last_plan >= self.cfg.replan_period - 1e-9
        if not (due or self._path_blocked()):
            return
        grid = _with_points(self.plan_map, self.dynamic)
        blocked = blocked_cells(grid, self.cfg.inflation_radius)
        start = _snap_free(grid, blocked, (self.estimate.x, self.estimate.y))
        try:
            path = plan_global(grid, start, self.goal[:2], self.cfg.inflation_radius, smooth=True)
        except PlanningError as exc:
            log.debug("replanning failed at t=%.2f: %s", t, exc)
            if self.path is None:
                path = plan_global(self.plan_map, _snap_free(self.plan_map, blocked_cells(
                    self.plan_map, self.cfg.inflation_radius), start), self.goal[:2],
                    self.cfg.inflation_radius, smooth=True)
            else:
                path = self.path
        if path is not self.path and len(path.waypoints):
            # begin the path at the robot even when the start was snapped
            path = GlobalPath(np.vstack([[self.estimate.x, self.estimate.y], path.waypoints])
                              if not np.allclose(path.waypoints[0], [self.estimate.x, self.estimate.y])
                              else path.waypoints)
        self.path = path
        self.last_plan = t

    def _tracked_path(self) -> GlobalPath:
        # Inside the position tolerance with the heading still off, trading
        # position error against heading error can park the robot at a
        # stationary point of the horizon cost. Holding the current spot and
        # only asking for the goal heading makes it turn in place instead.
        gx, gy, gth = self.goal
        if gth is None:
            return self.path
        dist = math.hypot(self.estimate.x - gx, self.estimate.y - gy)
        if self.hold is None and dist < 0.75 * self.cfg.goal_tolerance:
            self.hold = np.array([[self.estimate.x, self.estimate.y]])
            self.warm = None
        elif self.hold is not None and dist >= 2.0 * self.cfg.goal_tolerance:
            self.hold = None
            self.warm = None
        return self.path if self.hold is None else GlobalPath(self.hold)

    def control(self):
        res = mpc_step(self.estimate, self._tracked_path(), self.field, self.cfg.mpc, self.cfg.solver,
                       warm_start=self.warm, goal_heading=self.goal[2])
        self.warm = res.shifted() if res.converged else None
        self.command = res.u0
        return res


def run_navigation(world: SimWorld, goals: Sequence[Goal], start: Se2Pose,
                   cfg: Optional[NavConfig] = None,
                   solve_times: Optional[List[float]] = None) -> NavRun:
    """Drive through ``goals`` in order and record everything.

    Each cycle of length ``T_s``: raycast at the true pose, predict the pose
    from the previous command, localize, check the goal, replan if due, solve
    the MPC and advance the plant with the command plus actuation noise. A goal
    that is not reached within ``goal_timeout`` is aborted and the run moves on.
    ``solve_times`` (wall-clock seconds per MPC solve) is filled when given; it
    is kept out of the run record so records stay reproducible.
    """
    cfg = cfg or NavConfig()
    T = cfg.mpc.T_s
    scan_rng, act_rng = [np.random.default_rng(s) for s in
                         np.random.SeedSequence(world.rng_seed).spawn(2)]
    nav = Navigator(world.static_map, cfg, start)
    clear = ClearanceOracle(world)
    gt = start
    times, gts, ests, ctrls, noises = [], [], [], [], []
    events, segments, solves = [], [], []
    safety = False
    k = 0
    odom_cmd = ControlInput(0.0, 0.0)
    timeout_steps = int(round(cfg.goal_timeout / T))
    for gi, goal in enumerate(goals):
        nav.set_goal(goal)
        seg_start = k
        status = "aborted"
        for _ in range(timeout_steps + 1):
            t = k * T
            scan = raycast_scan(world, gt, scan_rng, t)
            if k > 0:
                nav.localize(scan, odom_cmd)
            nav.update_dynamic(scan)
            times.append(t)
            gts.append(gt.as_array())
            ests.append(nav.estimate.as_array())
            if nav.reached():
                status = "reached"
                ctrls.append((0.0, 0.0))
                noises.append((0.0, 0.0))
                k += 1
                break
            nav.plan(t)
            t0 = time.perf_counter()
            res = nav.control()
            if solve_times is not None:
                solve_times.append(time.perf_counter() - t0)
            u = res.u0
            solves.append({
                "converged": bool(res.converged),
                "clamp_fired": bool(res.clamp_fired),
                "iterations": int(res.report.iterations),
                "max_abs_v": float(np.max(np.abs(res.controls[:, 0]))),
                "max_abs_w": float(np.max(np.abs(res.controls[:, 1]))),
            })
            n = act_rng.normal(0.0, 1.0, 2) * (world.odom_noise.sigma_v, world.odom_noise.sigma_w)
            ctrls.append((u.v, u.w))
            noises.append((float(n[0]), float(n[1])))
            gt = unicycle_step(gt, ControlInput(u.v + n[0], u.w + n[1]), T)
            odom_cmd = u
            k += 1
        else:
            # the final recorded cycle already ran past the timeout
            pass
        end = k - 1
        if status == "reached":
            # the robot rests at the goal; the next segment starts from here
            odom_cmd = ControlInput(0.0, 0.0)
            gt = Se2Pose(*gts[-1])
        events.append({"type": "goal_reached" if status == "reached" else "aborted",
                       "goal": gi, "t": times[end], "step": end})
        segments.append({"goal": gi, "start": seg_start, "end": end, "status": status})

    gt_arr = np.array(gts)
    c = clear(gt_arr[:, :2])
    safety = bool(clear.in_collision(gt_arr[:, :2]).any())
    t_arr = np.array(times)[:, None]
    ctrl_arr = np.array(ctrls, dtype=float)
    return NavRun(
        goals=[tuple(g) for g in goals],
        gt_trajectory=np.hstack([t_arr, gt_arr]),
        est_trajectory=np.hstack([t_arr, np.array(ests)]),
        controls=np.hstack([t_arr, ctrl_arr]),
        events=events,
        noise=np.array(noises, dtype=float),
        clearance=c,
        segments=segments,
        solves=solves,
        seed=world.rng_seed,
        safety_violation=safety,
    )


def replay_ground_truth(run: NavRun, T_s: float) -> np.ndarray:
    """Rebuild the true trajectory from the first pose, commands and noise draws."""
    gt = run.gt_trajectory[:, 1:]
    out = [gt[0]]
    pose = Se2Pose.from_array(gt[0])
    for i in range(1, len(gt)):
        v, w = run.controls[i - 1, 1:] + run.noise[i - 1]
        pose = unicycle_step(pose, ControlInput(v, w), T_s)
        out.append(pose.as_array())
    return np.array(out)


# -- metrics -------------------------------------------------------------------------

@dataclass
class Metrics:
    path_length: float
    duration: float
    ape_trans: Dict[str, float]
    ape_rot: Dict[str, float]
    min_clearance: float

    def to_dict(self) -> dict:
        return {
            "path_length": self.path_length,
            "duration": self.duration,
            "ape_trans": dict(self.ape_trans),
            "ape_rot": dict(self.ape_rot),
            "min_clearance": self.min_clearance,
        }


def compute_metrics(run: NavRun, start: int = 0, end: Optional[int] = None) -> Metrics:
    """Path length, duration, APE and clearance over rows ``start..end`` (inclusive)."""
    gt, est = run.gt_trajectory, run.est_trajectory
    if len(gt) != len(est) or not np.array_equal(gt[:, 0], est[:, 0]):
        raise ContractViolation("ground truth and estimate must share timestamps")
    if len(gt) == 0:
        raise ContractViolation("empty trajectory")
    end = len(gt) - 1 if end is None else end
    sl = slice(start, end + 1)
    g, e = gt[sl], est[sl]
    length = float(np.sum(np.hypot(*np.diff(g[:, 1:3], axis=0).T))) if len(g) > 1 else 0.0
    et = np.hypot(e[:, 1] - g[:, 1], e[:, 2] - g[:, 2])
    er = np.abs(wrap_angle(e[:, 3] - g[:, 3]))
    clearance = float("nan") if run.clearance is None else float(np.min(run.clearance[sl]))
    return Metrics(
        path_length=length,
        duration=float(g[-1, 0] - g[0, 0]),
        ape_trans={"mean": float(et.mean()), "std": float(et.std())},
        ape_rot={"mean": float(er.mean()), "std": float(er.std())},
        min_clearance=clearance,
    )


def segment_metrics(run: NavRun) -> List[Tuple[dict, Metrics]]:
    return [(seg, compute_metrics(run, seg["start"], seg["end"])) for seg in run.segments]


CSV_COLUMNS = ["episode", "segment", "path_length_m", "duration_s",
               "ape_trans_mean", "ape_rot_mean", "min_clearance"]


def write_aggregate_csv(path: str, runs: Sequence[NavRun]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for ep, run in enumerate(runs):
            for seg, m in segment_metrics(run):
                w.writerow([ep, seg["goal"], repr(m.path_length), repr(m.duration),
                            repr(m.ape_trans["mean"]), repr(m.ape_rot["mean"]),
                            repr(m.min_clearance)])


def episode_seeds(seed: int, episodes: int) -> List[int]:
    """Independent per-episode seeds derived from one master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(episodes)]
