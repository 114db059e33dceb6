"""Augmented-Lagrangian constraint blocks on top of the Gauss-Newton engine.

A constraint block holds a residual ``r(x)`` that must be zero (equality) or
non-positive (inequality), its multipliers and a penalty weight. During the
primal step each block adds ``(rho/2) J^T J`` to ``H`` and
``(rho/2) J^T r + (1/2) J^T lambda`` to ``b``; the dual step then moves the
multipliers. Inequality components are only included while they are active
(``lambda_i > 0`` or ``r_i > 0``).
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .core import (
    ContractViolation,
    FactorGraph,
    SolverConfig,
    gn_step,
    numeric_jacobians,
)


class ConstraintKind(enum.Enum):
    EQUALITY = "equality"
    INEQUALITY = "inequality"


class ConstraintBlock:
    """One constraint ``r(x) = 0`` or ``r(x) <= 0`` over a few variables."""

    def __init__(
        self,
        variables: Sequence[int],
        residual_fn: Optional[Callable[..., np.ndarray]] = None,
        jacobian_fn: Optional[Callable[..., Sequence[np.ndarray]]] = None,
        kind: ConstraintKind = ConstraintKind.EQUALITY,
        rho: float = 1.0,
        lam=None,
    ):
        if rho <= 0:
            raise ContractViolation("penalty rho must be positive")
        self.variables = tuple(int(v) for v in variables)
        self._residual_fn = residual_fn
        self._jacobian_fn = jacobian_fn
        self.kind = ConstraintKind(kind)
        self.rho = float(rho)
        self.lam = None if lam is None else np.asarray(lam, dtype=float).reshape(-1).copy()
        if self.lam is not None and self.is_inequality and np.any(self.lam < 0):
            raise ContractViolation("inequality multipliers must be non-negative")

    @property
    def is_inequality(self) -> bool:
        return self.kind is ConstraintKind.INEQUALITY

    def residual(self, *vals: np.ndarray) -> np.ndarray:
        return self._residual_fn(*vals)

    def jacobians(self, *vals: np.ndarray) -> List[np.ndarray]:
        if self._jacobian_fn is not None:
            return [np.atleast_2d(np.asarray(J, dtype=float)) for J in self._jacobian_fn(*vals)]
        return numeric_jacobians(self.residual, vals)

    def evaluate(self, values: Sequence[np.ndarray]) -> np.ndarray:
        r = np.atleast_1d(np.asarray(self.residual(*[values[i] for i in self.variables]), float))
        if self.lam is None:
            self.lam = np.zeros(r.size)
        elif self.lam.size != r.size:
            raise ContractViolation(
                f"multiplier size {self.lam.size} does not match residual size {r.size}"
            )
        return r

    def active_mask(self, r: np.ndarray) -> np.ndarray:
        if not self.is_inequality:
            return np.ones(r.size, dtype=bool)
        return (self.lam > 0) | (r > 0)

    def violation(self, values: Sequence[np.ndarray]) -> float:
        r = self.evaluate(values)
        if self.is_inequality:
            r = np.maximum(r, 0.0)
        return float(np.max(np.abs(r))) if r.size else 0.0

    def penalty(self, values: Sequence[np.ndarray], mask: Optional[np.ndarray] = None) -> float:
        """``lambda^T r + (rho/2) |r|^2`` over the given (or currently active) rows."""
        r = self.evaluate(values)
        mask = self.active_mask(r) if mask is None else mask
        r = r[mask]
        return float(self.lam[mask] @ r + 0.5 * self.rho * (r @ r))


def constraint_contribution(c: ConstraintBlock, current_values: Sequence[np.ndarray]):
    """``(H_add, b_add)`` of one block over its variables' concatenated dimensions.

    ``current_values`` is the full list of graph values, indexed by variable id.
    """
    H_add, b_add, _, _ = _contribution(c, current_values)
    return H_add, b_add


def _contribution(c: ConstraintBlock, values, gate: bool = True):
    # also returns the active mask and the penalty at these values
    r = c.evaluate(values)
    mask = c.active_mask(r) if gate else np.ones(r.size, dtype=bool)
    if not mask.any():
        d = sum(values[i].size for i in c.variables)
        return np.zeros((d, d)), np.zeros(d), mask, 0.0
    J = np.hstack(c.jacobians(*[values[i] for i in c.variables]))
    lam = c.lam
    if not mask.all():
        J = J[mask]
        r = r[mask]
        lam = lam[mask]
    H_add = 0.5 * c.rho * (J.T @ J)
    b_add = 0.5 * c.rho * (J.T @ r) + 0.5 * (J.T @ lam)
    return H_add, b_add, mask, float(lam @ r + 0.5 * c.rho * (r @ r))


def dual_update(c: ConstraintBlock, current_values: Sequence[np.ndarray]) -> np.ndarray:
    """Method-of-multipliers step; inequality multipliers are clamped at zero."""
    return _dual_step(c, c.evaluate(current_values))


def _dual_step(c: ConstraintBlock, r: np.ndarray) -> np.ndarray:
    lam = c.lam + c.rho * r
    if c.is_inequality:
        lam = np.maximum(lam, 0.0)
    c.lam = lam
    return lam


@dataclass
class ConstrainedSolverConfig:
    inner_gn_iterations: int = 1
    max_outer_iterations: int = 100
    eps_x: float = 1e-4
    eps_c: float = 1e-4
    eps_d: float = 1e-4
    rho_init: float = 1.0
    rho_growth: float = 1.0
    rho_max: float = 1e4
    damping: float = 0.0
    step_halving: bool = False
    warm_start_multipliers: bool = False
    # False folds satisfied inequality rows into the penalty too (ungated form)
    gate_inequalities: bool = True

    def __post_init__(self):
        if min(self.eps_x, self.eps_c, self.eps_d) <= 0:
            raise ContractViolation("tolerances must be positive")
        if self.rho_growth < 1:
            raise ContractViolation("rho_growth must be >= 1")
        if self.rho_init <= 0 or self.rho_max < self.rho_init:
            raise ContractViolation("need 0 < rho_init <= rho_max")
        if self.inner_gn_iterations < 1 or self.max_outer_iterations < 1:
            raise ContractViolation("iteration counts must be positive")

    def as_solver_config(self) -> SolverConfig:
        """The unconstrained config this one reduces to without constraints."""
        return SolverConfig(
            max_iterations=self.max_outer_iterations * self.inner_gn_iterations,
            dx_tolerance=self.eps_x,
            damping=self.damping,
            step_halving=self.step_halving,
        )


@dataclass
class ConstrainedReport:
    iterations: int
    final_cost: float
    max_eq_violation: float
    max_ineq_violation: float
    converged: bool
    gn_iterations: int = 0
    per_iteration_cost: List[float] = field(default_factory=list)
    violation_trace: List[List[float]] = field(default_factory=list)
    stalled: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _violations(graph: FactorGraph, values) -> tuple:
    eq = 0.0
    ineq = 0.0
    for c in graph.constraints:
        v = c.violation(values)
        if c.is_inequality:
            ineq = max(ineq, v)
        else:
            eq = max(eq, v)
    return eq, ineq


def optimize_constrained(
    graph: FactorGraph, cfg: Optional[ConstrainedSolverConfig] = None
) -> ConstrainedReport:
    """Alternate primal Gauss-Newton steps and multiplier updates.

    Stops when the last primal step is below ``eps_x`` and the equality and
    inequality violations (infinity norm) are below ``eps_c`` / ``eps_d``.
    The reported cost is F over cost factors only. Without constraint blocks
    the step sequence is exactly that of :func:`fgnav.core.optimize`.
    """
    cfg = ConstrainedSolverConfig() if cfg is None else cfg
    blocks = graph.constraints
    for c in blocks:
        if not cfg.warm_start_multipliers or c.lam is None:
            c.lam = None
        if not cfg.warm_start_multipliers:
            c.rho = cfg.rho_init
    values = graph.values()
    for c in blocks:
        c.evaluate(values)

    per_iter: List[float] = []
    trace: List[List[float]] = []
    converged = False
    stalled = False
    accepted = True
    gn_total = 0
    outer = 0
    prev_violation = np.inf
    for outer in range(1, cfg.max_outer_iterations + 1):
        norm = np.inf
        for _ in range(cfg.inner_gn_iterations):
            extra = 0.0
            if blocks:
                values = graph.values()
                terms = []
                masks = []
                for c in blocks:
                    H_add, b_add, mask, pen = _contribution(c, values, cfg.gate_inequalities)
                    if mask.any():
                        terms.append((c.variables, H_add, b_add))
                    masks.append(mask)
                    extra += pen
                merit = _merit(graph, blocks, masks)
            else:
                terms = ()
                merit = None
            norm, cost, accepted = gn_step(graph, cfg.damping, cfg.step_halving, terms, merit, extra)
            gn_total += 1
            per_iter.append(cost)
            if norm < cfg.eps_x or not accepted:
                break
        values = graph.values()
        eq = ineq = 0.0
        moved = False
        for c in blocks:
            r = c.evaluate(values)
            if c.is_inequality:
                ineq = max(ineq, float(np.max(r, initial=0.0)))
            elif r.size:
                eq = max(eq, float(np.max(np.abs(r))))
            before = c.lam
            if not np.array_equal(_dual_step(c, r), before):
                moved = True
        trace.append([eq, ineq])
        if norm < cfg.eps_x and eq < cfg.eps_c and ineq < cfg.eps_d:
            converged = True
            break
        if not accepted and not moved:
            stalled = True
            break
        violation = max(eq, ineq)
        if cfg.rho_growth > 1 and violation > 0.25 * prev_violation:
            for c in blocks:
                c.rho = min(c.rho * cfg.rho_growth, cfg.rho_max)
        prev_violation = violation

    eq, ineq = _violations(graph, graph.values())
    return ConstrainedReport(
        iterations=outer,
        final_cost=graph.cost(),
        max_eq_violation=eq,
        max_ineq_violation=ineq,
        converged=converged,
        gn_iterations=gn_total,
        per_iteration_cost=per_iter,
        violation_trace=trace,
        stalled=stalled,
    )


def _merit(graph: FactorGraph, blocks, masks):
    def merit(values):
        total = graph.cost(values)
        for c, m in zip(blocks, masks):
            total += c.penalty(values, m)
        return total

    return merit
