import json

import numpy as np
import pytest

from fgnav.constraints import (
    ConstrainedSolverConfig,
    ConstraintBlock,
    ConstraintKind,
    constraint_contribution,
    dual_update,
    optimize_constrained,
)
from fgnav.core import ContractViolation, CostFactor, FactorGraph, SolverConfig, Variable, optimize

from .oracles import qp_kkt_oracle

EQ = ConstraintKind.EQUALITY
INEQ = ConstraintKind.INEQUALITY


def linear_block(a, b, kind, ids=(0,), rho=1.0, lam=None):
    a = np.atleast_2d(np.asarray(a, float))
    b = np.atleast_1d(np.asarray(b, float))
    return ConstraintBlock(list(ids), lambda x: a @ x + b, lambda x: [a], kind, rho, lam)


def random_qp(rng):
    """Strictly convex QP with 1..6 variables and 1..6 mixed rows, feasible by construction."""
    n = int(rng.integers(1, 7))
    m = int(rng.integers(1, 7))
    m_eq = int(rng.integers(0, min(m, n - 1) + 1)) if n > 1 else 0
    m_in = m - m_eq
    L = rng.normal(size=(n, n)) + 2 * np.eye(n)
    z = 2 * rng.normal(size=n)
    xf = rng.normal(size=n)
    A_eq = rng.normal(size=(m_eq, n))
    b_eq = -A_eq @ xf
    A_in = rng.normal(size=(m_in, n))
    slack = rng.uniform(0, 1, m_in) * (rng.random(m_in) < 0.6)
    b_in = -A_in @ xf - slack
    return n, L, z, A_eq, b_eq, A_in, b_in


def qp_graph(n, L, z, A_eq, b_eq, A_in, b_in, scale=1.0, grouped=False):
    g = FactorGraph()
    g.add_variable(Variable.vector(np.zeros(n)))
    g.add_factor(CostFactor([0], lambda x: L @ x - z, lambda x: [L], information=scale * np.eye(n)))
    if grouped:
        if len(A_eq):
            g.add_constraint(linear_block(A_eq, b_eq, EQ))
        if len(A_in):
            g.add_constraint(linear_block(A_in, b_in, INEQ))
    else:
        for a, b in zip(A_eq, b_eq):
            g.add_constraint(linear_block(a, b, EQ))
        for a, b in zip(A_in, b_in):
            g.add_constraint(linear_block(a, b, INEQ))
    return g


QP_CFG = ConstrainedSolverConfig(rho_growth=3.0)


# -- contributions and dual steps ---------------------------------------------------

def test_contribution_equality_zero_multiplier():
    c = linear_block([1.0], [-2.0], EQ, rho=2.0)
    H, b = constraint_contribution(c, [np.array([0.0])])
    np.testing.assert_allclose(H, [[1.0]])
    np.testing.assert_allclose(b, [-2.0])


def test_contribution_equality_with_multiplier():
    c = linear_block([1.0], [-2.0], EQ, rho=2.0, lam=[4.0])
    H, b = constraint_contribution(c, [np.array([2.0])])
    np.testing.assert_allclose(H, [[1.0]])
    np.testing.assert_allclose(b, [2.0])


def test_contribution_inactive_inequality():
    c = linear_block([1.0], [-1.0], INEQ)
    H, b = constraint_contribution(c, [np.array([0.0])])
    np.testing.assert_array_equal(H, [[0.0]])
    np.testing.assert_array_equal(b, [0.0])


def test_contribution_gates_per_row():
    a = np.array([[1.0], [1.0]])
    c = ConstraintBlock([0], lambda x: a @ x + np.array([-1.0, 1.0]), lambda x: [a], INEQ)
    H, b = constraint_contribution(c, [np.array([0.0])])
    # row 0 satisfied (r = -1), row 1 violated (r = 1)
    np.testing.assert_allclose(H, [[0.5]])
    np.testing.assert_allclose(b, [0.5])


@pytest.mark.parametrize("kind,lam,rho,r,expected", [
    (INEQ, 0.0, 1.0, 0.5, 0.5),
    (INEQ, 0.2, 1.0, -1.0, 0.0),
    (EQ, 1.0, 2.0, -0.25, 0.5),
])
def test_dual_update(kind, lam, rho, r, expected):
    c = linear_block([1.0], [r], kind, rho=rho, lam=[lam])
    np.testing.assert_allclose(dual_update(c, [np.array([0.0])]), [expected])


def test_negative_inequality_multiplier_rejected():
    with pytest.raises(ContractViolation):
        linear_block([1.0], [0.0], INEQ, lam=[-1.0])


def test_config_contract():
    with pytest.raises(ContractViolation):
        ConstrainedSolverConfig(rho_growth=0.5)
    with pytest.raises(ContractViolation):
        ConstrainedSolverConfig(eps_c=0.0)


# -- small problems ----------------------------------------------------------------

def test_inequality_active_at_bound():
    g = FactorGraph()
    g.add_variable(Variable.vector([0.0]))
    g.add_factor(CostFactor([0], lambda x: x - 3.0))
    c = g.add_constraint(linear_block([1.0], [-1.0], INEQ))
    rep = optimize_constrained(g, ConstrainedSolverConfig(max_outer_iterations=500))
    assert rep.converged
    assert abs(g.variables[0].value[0] - 1.0) < 1e-3
    # stationarity of (x - 3)^2 + lam (x - 1) at x = 1
    assert abs(c.lam[0] - 4.0) < 1e-2


def test_equality_forces_value():
    g = FactorGraph()
    g.add_variable(Variable.vector([0.0]))
    g.add_factor(CostFactor([0], lambda x: x))
    g.add_constraint(linear_block([1.0], [-2.0], EQ))
    rep = optimize_constrained(g, ConstrainedSolverConfig(max_outer_iterations=500))
    assert rep.converged
    assert abs(g.variables[0].value[0] - 2.0) < 1e-4


def test_two_variable_qp_matches_oracle():
    A_eq, b_eq = np.array([[1.0, 1.0]]), np.array([-1.0])
    A_in, b_in = np.eye(2), np.array([-1.0, -1.0])
    x_star, _, _ = qp_kkt_oracle(np.eye(2), -np.array([3.0, 3.0]), A_eq, b_eq, A_in, b_in)
    g = qp_graph(2, np.eye(2), np.array([3.0, 3.0]), A_eq, b_eq, A_in, b_in)
    rep = optimize_constrained(g, QP_CFG)
    assert rep.converged
    np.testing.assert_allclose(g.variables[0].value, x_star, atol=1e-3)
    np.testing.assert_allclose(x_star, [0.5, 0.5], atol=1e-12)


def test_multivariable_block_and_fixed_variable():
    # x0 fixed at 1; minimize (x1 - 5)^2 + (x2 - 5)^2 s.t. x0 + x1 + x2 <= 4
    g = FactorGraph()
    g.add_variable(Variable.vector([1.0], fixed=True))
    g.add_variable(Variable.vector([0.0]))
    g.add_variable(Variable.vector([0.0]))
    g.add_factor(CostFactor([1], lambda x: x - 5.0))
    g.add_factor(CostFactor([2], lambda x: x - 5.0))
    a = [np.ones((1, 1))] * 3
    g.add_constraint(ConstraintBlock([0, 1, 2], lambda x, y, z: x + y + z - 4.0,
                                     lambda x, y, z: a, INEQ))
    rep = optimize_constrained(g, QP_CFG)
    assert rep.converged
    np.testing.assert_allclose([g.variables[1].value[0], g.variables[2].value[0]], [1.5, 1.5], atol=1e-3)
    assert g.variables[0].value[0] == 1.0


def test_nonlinear_equality_on_circle():
    # closest point of the unit circle to (2, 0); the Gauss-Newton model drops
    # the constraint curvature, so plain steps overshoot and halving is needed
    g = FactorGraph()
    g.add_variable(Variable.vector([0.3, 0.8]))
    g.add_factor(CostFactor([0], lambda x: x - np.array([2.0, 0.0])))
    c = g.add_constraint(ConstraintBlock([0], lambda x: np.array([x @ x - 1.0]), kind=EQ))
    rep = optimize_constrained(g, ConstrainedSolverConfig(step_halving=True))
    assert rep.converged
    np.testing.assert_allclose(g.variables[0].value, [1.0, 0.0], atol=1e-3)
    # 2 (x - 2) + 2 lam x = 0 at x = 1
    assert abs(c.lam[0] - 1.0) < 1e-2


# -- properties --------------------------------------------------------------------

def test_random_qps_match_kkt_oracle_with_multipliers():
    rng = np.random.default_rng(11)
    for _ in range(60):
        n, L, z, A_eq, b_eq, A_in, b_in = random_qp(rng)
        P, q = L.T @ L, -L.T @ z
        x_star, lam_eq, lam_in = qp_kkt_oracle(P, q, A_eq, b_eq, A_in, b_in)
        g = qp_graph(n, L, z, A_eq, b_eq, A_in, b_in)
        # tighter than the defaults: |lam r| is only as small as eps_d times lam
        rep = optimize_constrained(g, ConstrainedSolverConfig(rho_growth=3.0, eps_x=1e-7,
                                                              eps_c=1e-7, eps_d=1e-7))
        assert rep.converged
        x = g.variables[0].value
        np.testing.assert_allclose(x, x_star, atol=1e-3)
        lam = np.array([c.lam[0] for c in g.constraints])
        m_eq = len(A_eq)
        assert np.all(lam[m_eq:] >= 0)
        # KKT of F + lam^T r: stationarity, complementary slackness
        A = np.vstack([A_eq, A_in])
        stat = 2 * (P @ x + q) + A.T @ lam
        assert np.max(np.abs(stat)) < 1e-3
        assert np.max(np.abs(lam[m_eq:] * (A_in @ x + b_in)), initial=0.0) < 1e-3


def test_grouped_blocks_give_same_answer():
    rng = np.random.default_rng(12)
    for _ in range(20):
        prob = random_qp(rng)
        g1 = qp_graph(*prob)
        g2 = qp_graph(*prob, grouped=True)
        optimize_constrained(g1, QP_CFG)
        optimize_constrained(g2, QP_CFG)
        np.testing.assert_allclose(g1.variables[0].value, g2.variables[0].value, atol=1e-3)


def test_scaling_information_and_rho_keeps_argmin():
    rng = np.random.default_rng(13)
    for _ in range(10):
        prob = random_qp(rng)
        g1 = qp_graph(*prob)
        g2 = qp_graph(*prob, scale=7.0)
        tight = dict(eps_x=1e-10, eps_c=1e-10, eps_d=1e-10, max_outer_iterations=400, rho_growth=3.0)
        optimize_constrained(g1, ConstrainedSolverConfig(**tight))
        optimize_constrained(g2, ConstrainedSolverConfig(rho_init=7.0, rho_max=7e4, **tight))
        np.testing.assert_allclose(g1.variables[0].value, g2.variables[0].value, atol=1e-6)


def test_inequality_violation_non_increasing_at_the_end():
    rng = np.random.default_rng(14)
    for _ in range(30):
        g = qp_graph(*random_qp(rng))
        rep = optimize_constrained(g, QP_CFG)
        assert rep.converged
        tail = [v[1] for v in rep.violation_trace[-3:]]
        assert all(b <= a + 1e-12 for a, b in zip(tail, tail[1:]))


def test_ungated_inequalities_match_oracle_when_all_active():
    # with every inequality active at the optimum the two forms coincide
    A_in, b_in = np.eye(2), np.array([-1.0, -1.0])
    x_star, _, _ = qp_kkt_oracle(np.eye(2), -np.array([3.0, 3.0]), np.zeros((0, 2)), np.zeros(0), A_in, b_in)
    for gate in (True, False):
        g = qp_graph(2, np.eye(2), np.array([3.0, 3.0]), np.zeros((0, 2)), np.zeros(0), A_in, b_in)
        rep = optimize_constrained(g, ConstrainedSolverConfig(rho_growth=3.0, gate_inequalities=gate))
        assert rep.converged
        np.testing.assert_allclose(g.variables[0].value, x_star, atol=1e-3)


def test_ungated_inequalities_bias_inactive_constraints():
    # x <= 5 is inactive at x* = 3; the ungated penalty still pulls toward 5
    def solve(gate):
        g = FactorGraph()
        g.add_variable(Variable.vector([0.0]))
        g.add_factor(CostFactor([0], lambda x: x - 3.0))
        g.add_constraint(linear_block([1.0], [-5.0], INEQ))
        optimize_constrained(g, ConstrainedSolverConfig(gate_inequalities=gate))
        return g.variables[0].value[0]

    assert abs(solve(True) - 3.0) < 1e-6
    assert solve(False) > 3.5


def test_without_constraints_equals_unconstrained_bit_for_bit():
    from .test_core import random_linear_graph

    for seed in range(5):
        g1 = random_linear_graph(np.random.default_rng(seed))
        g2 = random_linear_graph(np.random.default_rng(seed))
        ccfg = ConstrainedSolverConfig(damping=0.1)
        r1 = optimize(g1, ccfg.as_solver_config())
        r2 = optimize_constrained(g2, ccfg)
        for a, b in zip(g1.variables, g2.variables):
            assert np.array_equal(a.value, b.value)
        assert r1.per_iteration_cost == r2.per_iteration_cost
        assert r1.final_cost == r2.final_cost


def test_non_convergence_is_reported_not_raised():
    g = FactorGraph()
    g.add_variable(Variable.vector([0.0]))
    g.add_factor(CostFactor([0], lambda x: x))
    g.add_constraint(linear_block([1.0], [-2.0], EQ))
    rep = optimize_constrained(g, ConstrainedSolverConfig(max_outer_iterations=2))
    assert not rep.converged and rep.iterations == 2


def test_report_json():
    g = FactorGraph()
    g.add_variable(Variable.vector([0.0]))
    g.add_factor(CostFactor([0], lambda x: x - 3.0))
    g.add_constraint(linear_block([1.0], [-1.0], INEQ))
    rep = optimize_constrained(g, QP_CFG)
    d = json.loads(rep.to_json())
    assert {"max_eq_violation", "max_ineq_violation", "violation_trace", "converged"} <= set(d)
    assert len(d["violation_trace"]) == rep.iterations


def test_solver_config_reduction():
    c = ConstrainedSolverConfig(inner_gn_iterations=2, max_outer_iterations=7, eps_x=1e-6)
    assert c.as_solver_config() == SolverConfig(max_iterations=14, dx_tolerance=1e-6)
