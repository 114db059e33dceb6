"""Unicycle MPC as a constrained factor graph, plus the global grid planner."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .constraints import (
    ConstrainedReport,
    ConstrainedSolverConfig,
    ConstraintBlock,
    ConstraintKind,
    optimize_constrained,
)
from .core import CostFactor, FactorGraph, PriorFactor, Se2Pose, Variable, wrap_angle
from .distance import DistanceField, GridMap, PotentialParams, build_distance_field


@dataclass(frozen=True)
class ControlInput:
    v: float = 0.0
    w: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.w])


@dataclass
class MpcConfig:
    N: int = 20
    T_s: float = 0.1
    v_max: float = 1.0
    w_max: float = 1.0
    omega_x: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0, 0.1]))
    omega_u: np.ndarray = field(default_factory=lambda: np.diag([0.1, 0.05]))
    omega_p: np.ndarray = field(default_factory=lambda: np.diag([1e3, 1e3, 1e3]))
    omega_o: float = 50.0
    potential: PotentialParams = field(default_factory=PotentialParams)
    v_ref: Optional[float] = None
    heading_lookahead: float = 0.2

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("horizon N must be at least 2")
        if self.T_s <= 0 or self.v_max <= 0 or self.w_max <= 0:
            raise ValueError("T_s, v_max and w_max must be positive")
        for name in ("omega_x", "omega_u", "omega_p"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.v_ref is None:
            self.v_ref = 0.8 * self.v_max


def default_solver_config() -> ConstrainedSolverConfig:
    # growing rho settles the control-limit multipliers in far fewer iterations;
    # the vortex term is not a gradient of the merit, so instead of step
    # halving a little diagonal damping keeps the iteration from cycling
    return ConstrainedSolverConfig(max_outer_iterations=100, rho_growth=3.0, damping=0.02)


# -- kinematics -------------------------------------------------------------

def unicycle_f(x: np.ndarray, u: np.ndarray, T_s: float) -> np.ndarray:
    """Midpoint-heading unicycle integration, array form."""
    v, w = u[0], u[1]
    a = x[2] + 0.5 * w * T_s
    return np.array([
        x[0] + v * T_s * math.cos(a),
        x[1] + v * T_s * math.sin(a),
        wrap_angle(x[2] + w * T_s),
    ])


def unicycle_jacobians(x: np.ndarray, u: np.ndarray, T_s: float) -> Tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of :func:`unicycle_f` w.r.t. the state and the control."""
    v, w = u[0], u[1]
    a = x[2] + 0.5 * w * T_s
    c, s = math.cos(a), math.sin(a)
    Fx = np.array([[1.0, 0.0, -v * T_s * s], [0.0, 1.0, v * T_s * c], [0.0, 0.0, 1.0]])
    Fu = np.array([
        [T_s * c, -0.5 * v * T_s * T_s * s],
        [T_s * s, 0.5 * v * T_s * T_s * c],
        [0.0, T_s],
    ])
    return Fx, Fu


def unicycle_step(x: Se2Pose, u: ControlInput, T_s: float) -> Se2Pose:
    return Se2Pose.from_array(unicycle_f(x.as_array(), (u.v, u.w), T_s))


# -- factors ----------------------------------------------------------------

class MotionFactor(CostFactor):
    """Soft kinematic link ``e = x_{n+1} - f(x_n, u_n)``."""

    angular = (2,)

    def __init__(self, x_id: int, u_id: int, xn_id: int, T_s: float, information):
        super().__init__([x_id, u_id, xn_id], information=information)
        self.T_s = T_s
        self._I = np.eye(3)

    def error(self, x, u, xn):
        T = self.T_s
        v, w = u[0], u[1]
        a = x[2] + 0.5 * w * T
        return np.array([
            xn[0] - x[0] - v * T * math.cos(a),
            xn[1] - x[1] - v * T * math.sin(a),
            wrap_angle(xn[2] - x[2] - w * T),
        ])

    def jacobians(self, x, u, xn):
        T = self.T_s
        v, w = u[0], u[1]
        a = x[2] + 0.5 * w * T
        c, s = math.cos(a), math.sin(a)
        vT = v * T
        Jx = np.array([[-1.0, 0.0, vT * s], [0.0, -1.0, -vT * c], [0.0, 0.0, -1.0]])
        Ju = np.array([[-T * c, 0.5 * vT * T * s], [-T * s, -0.5 * vT * T * c], [0.0, -T]])
        return [Jx, Ju, self._I]


class ObstacleFactor(CostFactor):
    """``e = g(x_n)`` on the obstacle potential.

    The Jacobian is the repulsive gradient plus the vortex tangent, so steps
    also slide states along equipotential lines; the error stays the true
    potential.
    """

    def __init__(self, x_id: int, df: DistanceField, params: PotentialParams,
                 heading_hint: Sequence[float], information: float):
        super().__init__([x_id], information=[[information]])
        self.df = df
        self.params = params
        self.hint = (float(heading_hint[0]), float(heading_hint[1]))
        self._key = None
        self._val = None

    def _eval(self, x):
        key = (x[0], x[1])
        if key != self._key:
            p = self.params
            d, gx, gy = self.df.distance_and_gradient(x[0], x[1])
            if d < p.mu:
                g, slope = p.cap, 0.0
            elif d < p.rho:
                g, slope = p.k * (1.0 / d - 1.0 / p.rho), -p.k / (d * d)
            else:
                g, slope = 0.0, 0.0
            jx, jy = slope * gx, slope * gy
            norm = math.hypot(gx, gy)
            if g > 0.0 and norm > 1e-12:
                tx, ty = -gy / norm, gx / norm
                if tx * self.hint[0] + ty * self.hint[1] < 0.0:
                    tx, ty = -tx, -ty
                # a GN step moves along -J, so the tangent enters with the
                # sense opposite to the hint to slide states forward
                jx -= p.vortex_gain * g * tx
                jy -= p.vortex_gain * g * ty
            self._key = key
            self._val = (np.array([g]), [np.array([[jx, jy, 0.0]])])
        return self._val

    def error(self, x):
        return self._eval(x)[0]

    def jacobians(self, x):
        return self._eval(x)[1]


_LIMIT_J = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])


class ControlLimits(ConstraintBlock):
    """``|v| <= v_max`` and ``|w| <= w_max`` as four rows of ``D u + d <= 0``."""

    def __init__(self, u_id: int, v_max: float, w_max: float):
        super().__init__([u_id], kind=ConstraintKind.INEQUALITY)
        self.d = np.array([-v_max, -v_max, -w_max, -w_max])
        self._J = [_LIMIT_J]

    def residual(self, u):
        return _LIMIT_J @ u + self.d

    def jacobians(self, u):
        return self._J


# -- global planning ----------------------------------------------------------

class PlanningError(RuntimeError):
    pass


class NoPathError(PlanningError):
    pass


class CollisionError(PlanningError):
    """Start or goal lies in an occupied or inflated cell (or off the map)."""


@dataclass
class GlobalPath:
    waypoints: np.ndarray

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float).reshape(-1, 2)

    @property
    def total_length(self) -> float:
        if len(self.waypoints) < 2:
            return 0.0
        return float(np.sum(np.hypot(*np.diff(self.waypoints, axis=0).T)))


def blocked_cells(grid: GridMap, inflation_radius: float) -> np.ndarray:
    """Occupied or unknown cells, grown by the inflation radius."""
    occ = grid.occupied(unknown_as_occupied=True)
    if inflation_radius <= 0 or not occ.any():
        return occ
    df = build_distance_field(grid, inflation_radius + grid.resolution, unknown_as_occupied=True)
    return df.values <= inflation_radius


_NEIGHBORS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def grid_graph(free: np.ndarray, resolution: float):
    """Sparse 8-connected adjacency over free cells (diagonals cost sqrt(2) res)."""
    h, w = free.shape
    idx = np.arange(h * w).reshape(h, w)
    rows, cols, data = [], [], []
    for dr, dc in _NEIGHBORS:
        r0, r1 = max(0, -dr), h - max(0, dr)
        c0, c1 = max(0, -dc), w - max(0, dc)
        a = free[r0:r1, c0:c1] & free[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        src = idx[r0:r1, c0:c1][a]
        dst = idx[r0 + dr:r1 + dr, c0 + dc:c1 + dc][a]
        rows.append(src)
        cols.append(dst)
        data.append(np.full(src.size, resolution * math.hypot(dr, dc)))
    return coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(h * w, h * w)
    ).tocsr()


def _visible(grid: GridMap, blocked: np.ndarray, a: np.ndarray, b: np.ndarray) -> bool:
    n = max(2, int(math.ceil(np.hypot(*(b - a)) / (0.25 * grid.resolution))) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    r, c = grid.cell_of(a + t * (b - a)).T
    h, w = blocked.shape
    inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
    return bool(inside.all() and not blocked[r, c].any())


def shortcut(grid: GridMap, blocked: np.ndarray, waypoints: np.ndarray) -> np.ndarray:
    """Greedy line-of-sight simplification of a grid path."""
    wp = np.asarray(waypoints, dtype=float)
    if len(wp) <= 2:
        return wp
    out = [wp[0]]
    anchor = wp[0]
    for j in range(1, len(wp) - 1):
        if not _visible(grid, blocked, anchor, wp[j + 1]):
            anchor = wp[j]
            out.append(anchor)
    out.append(wp[-1])
    return np.array(out)


def plan_global(grid: GridMap, start, goal, inflation_radius: float = 0.0,
                smooth: bool = False) -> GlobalPath:
    """Shortest 8-connected path between the cells of two world points.

    With ``smooth`` the exact start and goal replace the end cell centers and
    the path is shortened by line-of-sight checks against the blocked cells.
    Without it the waypoints are the raw cell centers of the grid path.
    """
    blocked = blocked_cells(grid, inflation_radius)
    (sr, sc), (gr, gc) = grid.cell_of(np.array([start, goal], dtype=float))
    h, w = blocked.shape
    for name, r, c in (("start", sr, sc), ("goal", gr, gc)):
        if not (0 <= r < h and 0 <= c < w):
            raise CollisionError(f"{name} is outside the map")
        if blocked[r, c]:
            raise CollisionError(f"{name} is in collision")
    if (sr, sc) == (gr, gc):
        if smooth:
            return GlobalPath(np.array([start, goal], dtype=float))
        return GlobalPath(grid.cell_center([sr], [sc]))
    graph = grid_graph(~blocked, grid.resolution)
    s_idx, g_idx = sr * w + sc, gr * w + gc
    dist, pred = dijkstra(graph, indices=s_idx, return_predecessors=True)
    if not np.isfinite(dist[g_idx]):
        raise NoPathError("goal is not reachable from start")
    chain = [g_idx]
    while chain[-1] != s_idx:
        chain.append(pred[chain[-1]])
    chain = np.array(chain[::-1])
    wp = grid.cell_center(chain // w, chain % w)
    if smooth:
        wp[0], wp[-1] = start, goal
        wp = shortcut(grid, blocked, wp)
    return GlobalPath(wp)


# -- reference and graph --------------------------------------------------------

@dataclass
class ReferenceTrajectory:
    x_ref: np.ndarray            # (N+1, 3)
    u_ref: np.ndarray            # (N, 2)
    heading_weight: np.ndarray   # (N+1,), 0 where the heading is free

    def __post_init__(self):
        if len(self.x_ref) != len(self.u_ref) + 1:
            raise ValueError("x_ref must have exactly one more entry than u_ref")


def _project(waypoints: np.ndarray, p: np.ndarray, cum: np.ndarray) -> float:
    a = waypoints[:-1]
    seg = waypoints[1:] - a
    L2 = np.einsum("ij,ij->i", seg, seg)
    t = np.clip(np.einsum("ij,ij->i", p - a, seg) / np.where(L2 > 0, L2, 1.0), 0.0, 1.0)
    closest = a + t[:, None] * seg
    k = int(np.argmin(np.hypot(*(closest - p).T)))
    return float(cum[k] + t[k] * math.sqrt(L2[k]))


def make_reference(path: GlobalPath, current_pose: Se2Pose, cfg: MpcConfig,
                   goal_heading: Optional[float] = None) -> ReferenceTrajectory:
    """Resample the path ahead of the robot at spacing ``v_ref * T_s``.

    Samples past the end repeat the goal; their controls are zero and, unless
    the goal has a heading, their heading weight is zero.
    """
    wp = path.waypoints
    if len(wp) == 0:
        raise ValueError("empty path")
    N = cfg.N
    if len(wp) == 1:
        wp = np.vstack([wp, wp])
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(wp, axis=0).T))])
    L = float(cum[-1])
    p = np.array([current_pose.x, current_pose.y])
    s0 = _project(wp, p, cum) if L > 0 else 0.0
    s = np.minimum(s0 + cfg.v_ref * cfg.T_s * np.arange(N + 1), L)
    xs = np.interp(s, cum, wp[:, 0])
    ys = np.interp(s, cum, wp[:, 1])
    if L > 0:
        a = cfg.heading_lookahead
        sb = np.maximum(s - a, 0.0)
        sf = np.minimum(s + a, L)
        sb = np.where(sf - sb < a, np.maximum(sf - a, 0.0), sb)
        th = np.arctan2(np.interp(sf, cum, wp[:, 1]) - np.interp(sb, cum, wp[:, 1]),
                        np.interp(sf, cum, wp[:, 0]) - np.interp(sb, cum, wp[:, 0]))
    else:
        th = np.full(N + 1, current_pose.theta)
    at_goal = s >= L
    weight = np.ones(N + 1)
    if goal_heading is None:
        weight[at_goal] = 0.0
    else:
        th = np.where(at_goal, goal_heading, th)
    u_ref = np.zeros((N, 2))
    u_ref[:, 0] = np.diff(s) / cfg.T_s
    return ReferenceTrajectory(np.stack([xs, ys, wrap_angle(th)], axis=1), u_ref, weight)


@dataclass
class MpcGraph:
    graph: FactorGraph
    state_ids: List[int]
    control_ids: List[int]


def build_mpc_graph(x0: Se2Pose, ref: ReferenceTrajectory, df: DistanceField, cfg: MpcConfig,
                    initial: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> MpcGraph:
    """Interleaved ``x0, u0, x1, ..., xN`` with x0 fixed.

    ``initial`` optionally gives (states (N+1, 3), controls (N, 2)) as the
    starting guess; otherwise the reference itself is used.
    """
    N = cfg.N
    if len(ref.x_ref) != N + 1:
        raise ValueError(f"reference has {len(ref.x_ref)} states, expected {N + 1}")
    states, controls = (ref.x_ref, ref.u_ref) if initial is None else initial
    g = FactorGraph()
    xs, us = [], []
    for n in range(N + 1):
        if n == 0:
            xs.append(g.add_variable(Variable.se2(x0, fixed=True)))
        else:
            xs.append(g.add_variable(Variable.se2(states[n])))
        if n < N:
            us.append(g.add_variable(Variable.vector(controls[n])))
    for n in range(N + 1):
        om = cfg.omega_x
        if ref.heading_weight[n] != 1.0:
            om = om.copy()
            om[2, 2] *= ref.heading_weight[n]
        g.add_factor(PriorFactor(xs[n], ref.x_ref[n], om, se2=True))
    for n in range(N):
        g.add_factor(PriorFactor(us[n], ref.u_ref[n], cfg.omega_u))
    for n in range(N):
        g.add_factor(MotionFactor(xs[n], us[n], xs[n + 1], cfg.T_s, cfg.omega_p))
    for n in range(1, N + 1):
        th = ref.x_ref[n][2]
        g.add_factor(ObstacleFactor(xs[n], df, cfg.potential, (math.cos(th), math.sin(th)),
                                    cfg.omega_o))
    for n in range(N):
        g.add_constraint(ControlLimits(us[n], cfg.v_max, cfg.w_max))
    return MpcGraph(g, xs, us)


@dataclass
class MpcResult:
    u0: ControlInput
    states: np.ndarray
    controls: np.ndarray
    report: ConstrainedReport
    converged: bool
    clamp_fired: bool
    raw_u0: ControlInput
    reference: ReferenceTrajectory
    initial_states: np.ndarray

    @property
    def predicted(self) -> List[Se2Pose]:
        return [Se2Pose.from_array(s) for s in self.states]

    def shifted(self) -> Tuple[np.ndarray, np.ndarray]:
        """Warm start for the next cycle: drop the first step, repeat the last."""
        states = np.vstack([self.states[1:], self.states[-1:]])
        controls = np.vstack([self.controls[1:], self.controls[-1:]])
        return states, controls


def mpc_step(x0: Se2Pose, path: GlobalPath, df: DistanceField,
             cfg: Optional[MpcConfig] = None,
             ccfg: Optional[ConstrainedSolverConfig] = None,
             warm_start: Optional[Tuple[np.ndarray, np.ndarray]] = None,
             goal_heading: Optional[float] = None) -> MpcResult:
    """Solve one horizon and return the first control.

    A solve that does not converge yields a zero control. The final clip to the
    actuation limits is a safety net; ``clamp_fired`` reports whether it moved
    the control by more than the solver's inequality tolerance.
    """
    cfg = cfg or MpcConfig()
    ccfg = ccfg or default_solver_config()
    ref = make_reference(path, x0, cfg, goal_heading)
    initial = None
    if warm_start is not None:
        states, controls = warm_start
        states = np.array(states, dtype=float)
        states[0] = x0.as_array()
        initial = (states, np.asarray(controls, dtype=float))
    mg = build_mpc_graph(x0, ref, df, cfg, initial)
    init_states = np.array([mg.graph.variables[i].value for i in mg.state_ids])
    report = optimize_constrained(mg.graph, ccfg)
    states = np.array([mg.graph.variables[i].value for i in mg.state_ids])
    controls = np.array([mg.graph.variables[i].value for i in mg.control_ids])
    raw = ControlInput(float(controls[0, 0]), float(controls[0, 1]))
    if report.converged:
        v = min(max(raw.v, -cfg.v_max), cfg.v_max)
        w = min(max(raw.w, -cfg.w_max), cfg.w_max)
        fired = abs(raw.v) > cfg.v_max + ccfg.eps_d or abs(raw.w) > cfg.w_max + ccfg.eps_d
        u0 = ControlInput(v, w)
    else:
        u0 = ControlInput(0.0, 0.0)
        fired = False
    return MpcResult(u0, states, controls, report, report.converged, fired, raw, ref, init_states)
