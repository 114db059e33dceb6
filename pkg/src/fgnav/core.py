"""Factor graph data model and Gauss-Newton iterative least squares.

Variables are stored in insertion order; that order is the block ordering of
the linear system ``H dx = -b``. Fixed variables keep their slot in the graph
but contribute no columns.

The cost is ``F(x) = sum_k e_k^T Omega_k e_k`` (no 1/2 factor), so ``H`` and
``b`` below are half the Hessian and half the gradient of ``F``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import lapack

SE2 = "se2"
VECTOR = "vector"

NUMERIC_STEP = 1e-5
MAX_HALVINGS = 5

TWO_PI = 2.0 * math.pi


class ContractViolation(ValueError):
    """Raised when an operation is called with arguments breaking its contract."""


class SingularSystemError(np.linalg.LinAlgError):
    """The linear system is not positive definite.

    Attributes:
        variable: id of the first variable whose block made the Cholesky
            factorization fail, or None if it could not be located.
    """

    def __init__(self, message: str, variable: Optional[int] = None):
        super().__init__(message)
        self.variable = variable


class InactiveFactor(Exception):
    """Raised by an error function that is undefined at the current values."""


def wrap_angle(a):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    if np.ndim(a) == 0:
        r = math.remainder(float(a), TWO_PI)
        return r + TWO_PI if r <= -math.pi else r
    a = np.asarray(a, dtype=float)
    r = np.remainder(a + math.pi, TWO_PI) - math.pi
    return np.where(r <= -math.pi, r + TWO_PI, r)


@dataclass(frozen=True)
class Se2Pose:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @classmethod
    def from_array(cls, a) -> "Se2Pose":
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        """Map (n, 2) points from this pose's frame into the parent frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        out = np.empty_like(pts)
        out[:, 0] = c * pts[:, 0] - s * pts[:, 1] + self.x
        out[:, 1] = s * pts[:, 0] + c * pts[:, 1] + self.y
        return out

    def compose(self, other: "Se2Pose") -> "Se2Pose":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Se2Pose(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def inverse(self) -> "Se2Pose":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Se2Pose(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)


@dataclass
class Variable:
    """A graph variable: an SE(2) pose or a plain real vector."""

    value: np.ndarray
    kind: str = VECTOR
    fixed: bool = False

    def __post_init__(self):
        self.value = np.array(self.value, dtype=float).reshape(-1)
        if self.kind not in (SE2, VECTOR):
            raise ContractViolation(f"unknown variable kind {self.kind!r}")
        if self.kind == SE2:
            if self.value.size != 3:
                raise ContractViolation("an SE(2) variable needs exactly 3 values")
            self.value[2] = wrap_angle(self.value[2])

    @classmethod
    def se2(cls, pose, fixed: bool = False) -> "Variable":
        if isinstance(pose, Se2Pose):
            pose = pose.as_array()
        return cls(pose, SE2, fixed)

    @classmethod
    def vector(cls, values, fixed: bool = False) -> "Variable":
        return cls(values, VECTOR, fixed)

    @property
    def dim(self) -> int:
        return self.value.size

    def pose(self) -> Se2Pose:
        return Se2Pose.from_array(self.value)


def box_plus(v: Variable, delta) -> Variable:
    """Apply a perturbation; SE(2) updates are additive with angle wrapping."""
    delta = np.asarray(delta, dtype=float).reshape(-1)
    if delta.size != v.dim:
        raise ContractViolation(
            f"perturbation of size {delta.size} for a variable of dimension {v.dim}"
        )
    return Variable(v.value + delta, v.kind, v.fixed)


def _plus_values(kind: str, value: np.ndarray, delta: np.ndarray) -> np.ndarray:
    out = value + delta
    if kind == SE2:
        out[2] = wrap_angle(out[2])
    return out


def sqrt_information(omega: np.ndarray) -> np.ndarray:
    """Return W with W^T W = omega for a symmetric PSD information matrix."""
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    if np.count_nonzero(omega - np.diag(np.diagonal(omega))) == 0:
        d = np.diagonal(omega)
        if np.any(d < 0):
            raise ContractViolation("information matrix has negative eigenvalues")
        return np.diag(np.sqrt(d))
    if not np.allclose(omega, omega.T, atol=1e-12):
        raise ContractViolation("information matrix is not symmetric")
    w, V = np.linalg.eigh(omega)
    if w.min() < -1e-12 * max(1.0, abs(w.max())):
        raise ContractViolation("information matrix has negative eigenvalues")
    return np.sqrt(np.clip(w, 0.0, None))[:, None] * V.T


_WHITENERS: dict = {}


def _whitener(omega: np.ndarray):
    # (diagonal, None) or (None, full W); cached since graphs are often
    # rebuilt with the same few information matrices
    key = (omega.shape, omega.tobytes())
    hit = _WHITENERS.get(key)
    if hit is None:
        W = sqrt_information(omega)
        if np.count_nonzero(W - np.diag(np.diagonal(W))) == 0:
            hit = (np.diagonal(W).copy(), None)
        else:
            hit = (None, W)
        if len(_WHITENERS) > 256:
            _WHITENERS.clear()
        _WHITENERS[key] = hit
    return hit


def numeric_jacobians(
    fn: Callable[..., np.ndarray],
    values: Sequence[np.ndarray],
    h: float = NUMERIC_STEP,
    angular: Sequence[int] = (),
) -> List[np.ndarray]:
    """Central-difference Jacobian blocks of ``fn(*values)`` w.r.t. each argument.

    Residual components listed in ``angular`` are differenced with wrapping.
    """
    values = [np.asarray(v, dtype=float) for v in values]
    blocks = []
    for i, v in enumerate(values):
        cols = []
        for j in range(v.size):
            args_p = list(values)
            args_m = list(values)
            vp = v.copy()
            vm = v.copy()
            vp[j] += h
            vm[j] -= h
            args_p[i] = vp
            args_m[i] = vm
            diff = np.atleast_1d(np.asarray(fn(*args_p), dtype=float)) - np.atleast_1d(
                np.asarray(fn(*args_m), dtype=float)
            )
            for a in angular:
                diff[a] = wrap_angle(diff[a])
            cols.append(diff / (2.0 * h))
        blocks.append(np.column_stack(cols))
    return blocks


class CostFactor:
    """A least-squares term ``e(x)^T Omega e(x)`` over a few variables.

    Either pass ``error_fn`` (and optionally ``jacobian_fn``) or subclass and
    override :meth:`error` / :meth:`jacobians`. Both receive the connected
    variables' values as arrays, in ``variables`` order; subclasses must return
    1-D residual arrays. Without an analytic Jacobian, central differences with
    step 1e-5 are used. ``information`` defaults to the identity.
    """

    angular: Tuple[int, ...] = ()

    def __init__(
        self,
        variables: Sequence[int],
        error_fn: Optional[Callable[..., np.ndarray]] = None,
        jacobian_fn: Optional[Callable[..., Sequence[np.ndarray]]] = None,
        information=None,
        angular: Sequence[int] = (),
    ):
        self.variables = tuple(int(v) for v in variables)
        self._error_fn = error_fn
        self._jacobian_fn = jacobian_fn
        if angular:
            self.angular = tuple(angular)
        self.information = None
        # whitening: _sd (diagonal) or _W (full); both None means identity
        self._sd = None
        self._W = None
        if information is not None:
            self.information = np.atleast_2d(np.asarray(information, dtype=float))
            self._sd, self._W = _whitener(self.information)

    def error(self, *vals: np.ndarray) -> np.ndarray:
        if self._error_fn is None:
            raise NotImplementedError
        return np.atleast_1d(np.asarray(self._error_fn(*vals), dtype=float))

    def jacobians(self, *vals: np.ndarray) -> List[np.ndarray]:
        if self._jacobian_fn is not None:
            return [np.atleast_2d(np.asarray(J, dtype=float)) for J in self._jacobian_fn(*vals)]
        return numeric_jacobians(self.error, vals, angular=self.angular)

    def _check(self, m: int):
        if self.information is not None and self.information.shape != (m, m):
            raise ContractViolation(
                f"information is {self.information.shape}, residual has size {m}"
            )

    def whiten(self, e: np.ndarray, blocks: Optional[List[np.ndarray]] = None):
        """Scale a residual (and Jacobian blocks) by the square-root information."""
        if self._sd is not None:
            if self._sd.size != e.size:
                self._check(e.size)
            sd = self._sd
            we = sd * e
            return we, None if blocks is None else [sd[:, None] * J for J in blocks]
        if self._W is not None:
            if self._W.shape[1] != e.size:
                self._check(e.size)
            W = self._W
            return W @ e, None if blocks is None else [W @ J for J in blocks]
        return e, blocks

    def cost(self, *vals: np.ndarray) -> float:
        try:
            e = self.error(*vals)
        except InactiveFactor:
            return 0.0
        we = self.whiten(e)[0]
        return float(we @ we)


def linearize(f: CostFactor, current_values: Sequence[np.ndarray]):
    """Residual and Jacobian blocks of a factor at the given values.

    ``current_values`` holds the values of the factor's own variables, in
    order. Raises :class:`InactiveFactor` if the error is undefined there.
    """
    e = np.asarray(f.error(*current_values), dtype=float)
    J = f.jacobians(*current_values)
    return e, J


class FactorGraph:
    """Variables, cost factors and constraint blocks with a fixed ordering."""

    def __init__(self):
        self.variables: List[Variable] = []
        self.factors: List[CostFactor] = []
        self.constraints: list = []

    def add_variable(self, var: Variable) -> int:
        self.variables.append(var)
        return len(self.variables) - 1

    def add_factor(self, factor: CostFactor) -> CostFactor:
        self._check_ids(factor.variables)
        self.factors.append(factor)
        return factor

    def add_constraint(self, block):
        self._check_ids(block.variables)
        self.constraints.append(block)
        return block

    def _check_ids(self, ids):
        for i in ids:
            if not 0 <= i < len(self.variables):
                raise ContractViolation(f"unknown variable id {i}")

    def values(self) -> List[np.ndarray]:
        return [v.value for v in self.variables]

    def cost(self, values: Optional[Sequence[np.ndarray]] = None) -> float:
        """F(x) over cost factors only; inactive factors count zero."""
        values = self.values() if values is None else values
        total = 0.0
        for f in self.factors:
            total += f.cost(*[values[i] for i in f.variables])
        return total

    def layout(self) -> Tuple[List[Optional[int]], int]:
        """Column offset of each variable (None when fixed) and the system size."""
        offsets: List[Optional[int]] = []
        n = 0
        for v in self.variables:
            if v.fixed:
                offsets.append(None)
            else:
                offsets.append(n)
                n += v.dim
        return offsets, n


@dataclass
class QuadraticSystem:
    H: np.ndarray
    b: np.ndarray
    c: float
    offsets: List[Optional[int]] = field(default_factory=list)


@dataclass
class SolverConfig:
    max_iterations: int = 50
    dx_tolerance: float = 1e-4
    damping: float = 0.0
    step_halving: bool = False

    def __post_init__(self):
        if self.dx_tolerance <= 0:
            raise ContractViolation("dx_tolerance must be positive")
        if self.damping < 0:
            raise ContractViolation("damping must be non-negative")
        if self.max_iterations < 1:
            raise ContractViolation("max_iterations must be at least 1")


@dataclass
class OptimizeReport:
    iterations: int
    final_cost: float
    converged: bool
    per_iteration_cost: List[float] = field(default_factory=list)
    # a step was rejected even after halving, so the iterate can no longer move
    stalled: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def build_system(
    graph: FactorGraph,
    constraint_terms: Iterable[Tuple[Sequence[int], np.ndarray, np.ndarray]] = (),
    damping: float = 0.0,
    values: Optional[Sequence[np.ndarray]] = None,
) -> QuadraticSystem:
    """Assemble ``H = sum J^T Omega J`` and ``b = sum J^T Omega e``.

    ``constraint_terms`` are extra ``(variable_ids, H_add, b_add)`` blocks,
    where ``H_add``/``b_add`` span the concatenated dimensions of the listed
    variables; fixed variables' rows and columns are dropped.
    """
    values = graph.values() if values is None else values
    offsets, n = graph.layout()
    rows_e = []
    rows_J = []
    m_total = 0
    c = 0.0
    for f in graph.factors:
        vals = [values[i] for i in f.variables]
        try:
            e = f.error(*vals)
            blocks = f.jacobians(*vals)
        except InactiveFactor:
            continue
        we, wblocks = f.whiten(e, blocks)
        c += float(we @ we)
        placed = []
        for vid, WJ in zip(f.variables, wblocks):
            off = offsets[vid]
            if off is not None:
                placed.append((off, WJ))
        if placed:
            rows_e.append(we)
            rows_J.append(placed)
            m_total += we.size

    Jfull = np.zeros((m_total, n))
    efull = np.empty(m_total)
    r = 0
    for we, placed in zip(rows_e, rows_J):
        m = we.size
        efull[r : r + m] = we
        for off, WJ in placed:
            Jfull[r : r + m, off : off + WJ.shape[1]] += WJ
        r += m
    H = Jfull.T @ Jfull
    b = Jfull.T @ efull

    for ids, H_add, b_add in constraint_terms:
        _scatter(H, b, offsets, [graph.variables[i].dim for i in ids], ids, H_add, b_add)
    if damping:
        H[np.diag_indices_from(H)] += damping
    return QuadraticSystem(H, b, c, offsets)


def _scatter(H, b, offsets, dims, ids, H_add, b_add):
    H_add = np.atleast_2d(H_add)
    b_add = np.atleast_1d(b_add)
    starts = np.concatenate([[0], np.cumsum(dims)])
    for a, ia in enumerate(ids):
        oa = offsets[ia]
        if oa is None:
            continue
        sa = slice(starts[a], starts[a + 1])
        b[oa : oa + dims[a]] += b_add[sa]
        for bb, ib in enumerate(ids):
            ob = offsets[ib]
            if ob is None:
                continue
            H[oa : oa + dims[a], ob : ob + dims[bb]] += H_add[sa, starts[bb] : starts[bb + 1]]


def solve_linear(sys: QuadraticSystem) -> np.ndarray:
    """Solve ``H dx = -b`` by Cholesky in the given variable ordering."""
    n = sys.b.size
    if n == 0:
        return np.zeros(0)
    L, info = lapack.dpotrf(sys.H, lower=1, clean=0)
    if info != 0:
        col = info - 1 if info > 0 else None
        var = None
        if col is not None and sys.offsets:
            starts = [(o, i) for i, o in enumerate(sys.offsets) if o is not None]
            for o, i in starts:
                if o <= col:
                    var = i
        raise SingularSystemError(
            f"system is not positive definite (first failing block: variable {var})", var
        )
    dx, info = lapack.dpotrs(L, -sys.b, lower=1)
    return dx


def _apply(graph: FactorGraph, offsets, dx: np.ndarray, scale: float = 1.0):
    out = []
    for v, off in zip(graph.variables, offsets):
        if off is None:
            out.append(v.value)
        else:
            out.append(_plus_values(v.kind, v.value, scale * dx[off : off + v.dim]))
    return out


def _commit(graph: FactorGraph, values):
    for v, val in zip(graph.variables, values):
        if not v.fixed:
            v.value = val


def gn_step(
    graph: FactorGraph,
    damping: float,
    step_halving: bool,
    terms: Sequence = (),
    merit: Optional[Callable[[Sequence[np.ndarray]], float]] = None,
    merit_extra: float = 0.0,
) -> Tuple[float, float, bool]:
    """One linearize/build/solve/update cycle.

    Returns ``(|dx|, F before the step, accepted)``.

    ``merit`` defaults to the cost F; it decides step acceptance when step
    halving is enabled, and ``merit_extra`` is its non-F part at the current
    values. A step that still increases the merit after five
    halvings is rejected (the graph is left unchanged).
    """
    sys = build_system(graph, terms, damping)
    dx = solve_linear(sys)
    norm = float(np.linalg.norm(dx))
    trial = _apply(graph, sys.offsets, dx)
    if not step_halving:
        _commit(graph, trial)
        return norm, sys.c, True
    merit = graph.cost if merit is None else merit
    current = sys.c + merit_extra
    value = merit(trial)
    scale = 1.0
    halvings = 0
    while value > current and halvings < MAX_HALVINGS:
        scale *= 0.5
        halvings += 1
        trial = _apply(graph, sys.offsets, dx, scale)
        value = merit(trial)
    if value <= current:
        _commit(graph, trial)
        return norm, sys.c, True
    return norm, sys.c, False


def optimize(graph: FactorGraph, cfg: Optional[SolverConfig] = None) -> OptimizeReport:
    """Gauss-Newton until ``|dx|_2 < dx_tolerance`` or ``max_iterations``.

    The iteration that detects convergence is counted, so a quadratic problem
    reaches its optimum after the first step and reports two iterations.
    ``per_iteration_cost`` holds F at the start of each iteration. With step
    halving, a step rejected outright ends the run with ``stalled`` set: every
    later iteration would propose the same step from the same point.
    """
    cfg = SolverConfig() if cfg is None else cfg
    per_iter = []
    converged = False
    stalled = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        norm, cost, accepted = gn_step(graph, cfg.damping, cfg.step_halving)
        per_iter.append(cost)
        if norm < cfg.dx_tolerance:
            converged = True
            break
        if not accepted:
            stalled = True
            break
    final = graph.cost()
    return OptimizeReport(it, final, converged, per_iter, stalled)


class PriorFactor(CostFactor):
    """Unary prior ``e = x - z`` (heading difference wrapped for SE(2))."""

    def __init__(self, variable: int, measurement, information=None, se2: bool = False):
        super().__init__([variable], information=information, angular=(2,) if se2 else ())
        self.measurement = np.asarray(measurement, dtype=float).reshape(-1)
        self.se2 = se2
        self._J = [np.eye(self.measurement.size)]

    def error(self, x):
        e = x - self.measurement
        if self.se2:
            e[2] = wrap_angle(e[2])
        return e

    def jacobians(self, x):
        return self._J
