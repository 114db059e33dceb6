"""Pose tracking by registering lidar endpoints on a static distance field."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .core import (
    ContractViolation,
    CostFactor,
    FactorGraph,
    PriorFactor,
    Se2Pose,
    SingularSystemError,
    SolverConfig,
    Variable,
    optimize,
)
from .distance import DistanceField

log = logging.getLogger(__name__)

DEFAULT_PRIOR_INFORMATION = np.diag([25.0, 25.0, 100.0])


@dataclass
class Scan:
    endpoints: np.ndarray
    max_range: float = 10.0
    timestamp: float = 0.0

    def __post_init__(self):
        self.endpoints = np.asarray(self.endpoints, dtype=float).reshape(-1, 2)

    @classmethod
    def from_ranges(cls, angle_min: float, angle_increment: float, ranges,
                    range_max: float, timestamp: float = 0.0) -> "Scan":
        """Endpoints of a polar scan; readings at or beyond range_max are misses."""
        r = np.asarray(ranges, dtype=float)
        a = angle_min + angle_increment * np.arange(r.size)
        hit = np.isfinite(r) & (r < range_max) & (r > 0)
        pts = np.stack([r[hit] * np.cos(a[hit]), r[hit] * np.sin(a[hit])], axis=1)
        return cls(pts, range_max, timestamp)


@dataclass
class OdometryPrior:
    predicted_pose: Se2Pose
    information: np.ndarray = field(default_factory=lambda: DEFAULT_PRIOR_INFORMATION.copy())


@dataclass
class LocalizerConfig:
    low_distance_scale: float = 0.25
    discard_distance: float = 0.3
    max_endpoint_range: float = 10.0
    # both default to the field resolution
    map_resolution_threshold: Optional[float] = None
    sigma: Optional[float] = None

    def resolved(self, df: DistanceField) -> "LocalizerConfig":
        thr = df.resolution if self.map_resolution_threshold is None else self.map_resolution_threshold
        sigma = df.resolution if self.sigma is None else self.sigma
        if self.discard_distance <= thr:
            raise ContractViolation("discard_distance must exceed the resolution threshold")
        return LocalizerConfig(self.low_distance_scale, self.discard_distance,
                               self.max_endpoint_range, thr, sigma)


class ScanFactor(CostFactor):
    """All endpoint terms of one scan, stacked row by row.

    Row k is the scalar term ``w_k * d(X z_k)^2`` with ``w_k = 1/sigma^2``,
    scaled by ``low_distance_scale`` when the distance is under the map
    resolution. Endpoints at ``discard_distance`` or farther contribute a
    constant (their residual is clamped) and no Jacobian, which is the same as
    dropping them for this linearization. The residual returned is already
    whitened.
    """

    def __init__(self, variable: int, endpoints: np.ndarray, df: DistanceField,
                 cfg: LocalizerConfig):
        super().__init__([variable])
        self.endpoints = np.asarray(endpoints, dtype=float).reshape(-1, 2)
        self.df = df
        self.cfg = cfg
        self._w = 1.0 / cfg.sigma ** 2
        self._cache_key = None
        self._cache = None

    def _eval(self, x: np.ndarray):
        key = (x[0], x[1], x[2])
        if key != self._cache_key:
            c, s = math.cos(x[2]), math.sin(x[2])
            z = self.endpoints
            p = np.empty_like(z)
            p[:, 0] = c * z[:, 0] - s * z[:, 1] + x[0]
            p[:, 1] = s * z[:, 0] + c * z[:, 1] + x[1]
            d = self.df.distance_at(p)
            keep = d < self.cfg.discard_distance
            w = np.where(d < self.cfg.map_resolution_threshold,
                         self.cfg.low_distance_scale * self._w, self._w)
            sw = np.sqrt(w)
            e = sw * np.minimum(d, self.cfg.discard_distance)
            self._cache_key = key
            self._cache = (p, d, keep, sw, e, c, s)
        return self._cache

    def error(self, x):
        return self._eval(x)[4]

    def jacobians(self, x):
        p, d, keep, sw, e, c, s = self._eval(x)
        J = np.zeros((d.size, 3))
        if keep.any():
            grad = self.df.gradient(p[keep])
            z = self.endpoints[keep]
            dth_x = -s * z[:, 0] - c * z[:, 1]
            dth_y = c * z[:, 0] - s * z[:, 1]
            swk = sw[keep]
            J[keep, 0] = swk * grad[:, 0]
            J[keep, 1] = swk * grad[:, 1]
            J[keep, 2] = swk * (grad[:, 0] * dth_x + grad[:, 1] * dth_y)
        return [J]

    def retained(self, x) -> int:
        return int(np.count_nonzero(self._eval(np.asarray(x, dtype=float))[2]))


def build_localization_graph(scan: Scan, prior: OdometryPrior, df: DistanceField,
                             cfg: Optional[LocalizerConfig] = None) -> FactorGraph:
    """One pose variable, the odometry prior and the scan's endpoint terms."""
    if df.source != "static":
        raise ContractViolation("localization must use the static distance field")
    cfg = (cfg or LocalizerConfig()).resolved(df)
    graph = FactorGraph()
    i = graph.add_variable(Variable.se2(prior.predicted_pose))
    graph.add_factor(PriorFactor(i, prior.predicted_pose.as_array(), prior.information, se2=True))
    pts = scan.endpoints
    if pts.size:
        pts = pts[np.hypot(pts[:, 0], pts[:, 1]) <= cfg.max_endpoint_range]
    if pts.size:
        graph.add_factor(ScanFactor(i, pts, df, cfg))
    return graph


@dataclass
class LocalizeReport:
    iterations: int
    converged: bool
    cost: float
    retained_endpoints: int
    prior_only: bool = False
    fallback: bool = False
    per_iteration_cost: List[float] = field(default_factory=list)
    stalled: bool = False

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "cost": self.cost,
            "retained_endpoints": self.retained_endpoints,
            "prior_only": self.prior_only,
            "fallback": self.fallback,
            "per_iteration_cost": list(self.per_iteration_cost),
            "stalled": self.stalled,
        }


def default_solver_config() -> SolverConfig:
    return SolverConfig(max_iterations=20, dx_tolerance=1e-4, step_halving=True)


def localize(scan: Scan, prior: OdometryPrior, df: DistanceField,
             cfg: Optional[LocalizerConfig] = None,
             solver_cfg: Optional[SolverConfig] = None) -> Tuple[Se2Pose, LocalizeReport]:
    """Refine the odometry prediction against the scan.

    A singular system falls back to the prior pose with ``report.fallback``.
    """
    graph = build_localization_graph(scan, prior, df, cfg)
    solver_cfg = solver_cfg or default_solver_config()
    scan_factor = next((f for f in graph.factors if isinstance(f, ScanFactor)), None)
    try:
        rep = optimize(graph, solver_cfg)
    except SingularSystemError as exc:
        log.warning("localization fell back to the prior: %s", exc)
        return prior.predicted_pose, LocalizeReport(0, False, float("nan"), 0,
                                                    scan_factor is None, True)
    x = graph.variables[0].value
    retained = 0 if scan_factor is None else scan_factor.retained(x)
    report = LocalizeReport(rep.iterations, rep.converged, rep.final_cost, retained,
                            prior_only=retained == 0, per_iteration_cost=rep.per_iteration_cost,
                            stalled=rep.stalled)
    return Se2Pose.from_array(x), report


def localization_cost(pose: Se2Pose, scan: Scan, prior: OdometryPrior, df: DistanceField,
                      cfg: Optional[LocalizerConfig] = None) -> float:
    """The objective :func:`localize` minimizes, evaluated at ``pose``."""
    graph = build_localization_graph(scan, prior, df, cfg)
    return graph.cost([pose.as_array()])

