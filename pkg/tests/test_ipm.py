import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scacopf import ipm
from scacopf.models import build_base_problem, build_contingency_problem
from scacopf.nlp import NlpProblem
from scacopf.blocks import ThermalBlock
from tests.test_nlp import Bilinear, SumSquares, problem_with


def test_bound_constrained_scalar():
    p = NlpProblem()
    p.space.add("x", 1, 1.0, np.inf)
    p.add_objective(SumSquares([0]))
    r = ipm.solve(p, np.array([3.0]))
    assert r.status == ipm.OPTIMAL
    assert r.x[0] == pytest.approx(1.0, abs=1e-8)
    assert r.zl[0] == pytest.approx(2.0, abs=1e-6)
    assert r.kkt_residual <= 1e-8


def test_equality_constrained_product():
    # min x² + y² s.t. x y = 2 has x = y = √2 and objective 4
    p = problem_with(2, SumSquares([0, 1]), Bilinear(0, 1, 2.0))
    p.space.set_bounds([0, 1], 0.1, 10.0)
    r = ipm.solve(p, np.array([3.0, 0.2]))
    assert r.ok
    np.testing.assert_allclose(r.x, [np.sqrt(2)] * 2, atol=1e-7)
    assert r.obj == pytest.approx(4.0, abs=1e-7)
    assert np.all(r.zl >= 0) and np.all(r.zu >= 0)


def test_reported_residual_matches_recomputation(case2):
    m = build_base_problem(case2)
    r = ipm.solve(m.problem, m.initial_x())
    again = ipm.kkt_residual(m.problem, r.x, r.lam, r.zl, r.zu, r.obj_scale)
    assert again == pytest.approx(r.kkt_residual, rel=1e-6, abs=1e-12)
    assert r.kkt_residual <= 1e-8


def test_two_bus_balance_residual(case2):
    m = build_base_problem(case2)
    r = ipm.solve(m.problem, m.initial_x())
    assert r.status == ipm.OPTIMAL
    c = m.problem.constraints(r.x)
    for name in ("balance_p", "balance_q"):
        blk = next(b for b in m.problem.constraint_blocks if b.name == name)
        rows = m.problem.block_rows(blk)
        assert np.max(np.abs(c[rows] - blk.lb)) <= 1e-8


def test_solution_respects_bounds(case2):
    m = build_base_problem(case2)
    r = ipm.solve(m.problem, m.initial_x())
    lb, ub = m.space.lb, m.space.ub
    assert r.ok
    assert np.all(r.x >= lb) and np.all(r.x <= ub)
    assert np.all(r.zl >= 0) and np.all(r.zu >= 0)


def test_infeasible_problem_reports_failure():
    # x·y = 200 with x, y in [0, 1] is infeasible
    p = problem_with(2, SumSquares([0, 1]), Bilinear(0, 1, 200.0))
    p.space.set_bounds([0, 1], 0.0, 1.0)
    r = ipm.solve(p, np.array([0.5, 0.5]), ipm.IpmOptions(max_iter=60))
    assert not r.ok
    assert r.status in (ipm.INFEASIBLE, ipm.ITERATION_LIMIT, ipm.NUMERICAL_FAILURE)


def test_iteration_limit_status(case14):
    m = build_base_problem(case14)
    r = ipm.solve(m.problem, m.initial_x(), ipm.IpmOptions(max_iter=3))
    assert r.status == ipm.ITERATION_LIMIT and r.iterations == 3


def test_warm_start_primal_resets_duals():
    base = ipm.IpmResult(ipm.OPTIMAL, np.array([1.0, 2.0]), np.array([3.0]), np.array([0.5, 0.5]),
                         np.array([0.1, 0.1]), 0.0, 5, 1e-9, 1.0, 1.0)
    s = ipm.warm_start_from(base, "primal")
    np.testing.assert_array_equal(s.lam, [0.0])
    np.testing.assert_array_equal(s.zl, [1.0, 1.0])
    assert s.mu is None
    s = ipm.warm_start_from(base, "primal-dual")
    np.testing.assert_array_equal(s.lam, [3.0])
    assert s.mu == 1e-5


def test_warm_start_pushes_inside_and_checks_dimension():
    p = NlpProblem()
    p.space.add("x", 2, 0.0, 2.0)
    base = ipm.IpmResult(ipm.OPTIMAL, np.array([0.0, 2.0]), np.zeros(0), np.ones(2), np.ones(2),
                         0.0, 1, 1e-9, 0.0, 1.0)
    s = ipm.warm_start_from(base, "primal", p)
    np.testing.assert_allclose(s.x, [2e-4, 2.0 - 2e-4])
    q = NlpProblem()
    q.space.add("x", 3)
    with pytest.raises(ValueError, match="dimension"):
        ipm.warm_start_from(base, "primal", q)


def test_primal_dual_warm_start_of_optimum_is_fast(case14):
    m = build_base_problem(case14)
    cold = ipm.solve(m.problem, m.initial_x())
    start = ipm.warm_start_from(cold, "primal-dual", m.problem)
    warm = ipm.solve(m.problem, start, ipm.IpmOptions(warm_start_mode="primal-dual"))
    assert warm.ok and warm.iterations <= 5 < cold.iterations
    assert warm.obj == pytest.approx(cold.obj, rel=1e-7)


def test_contingency_primal_warm_start_not_slower(case14, case14_base):
    """Primal start from the base point vs a cold start, per contingency."""
    wins = 0
    for k in case14.contingencies:
        m = build_contingency_problem(case14, k.id, case14_base)
        warm = ipm.solve(m.problem, m.x_from_point(case14_base), ipm.IpmOptions(warm_start_mode="primal"))
        cold = ipm.solve(m.problem, m.initial_x())
        assert warm.ok and cold.ok
        wins += warm.iterations <= cold.iterations
    assert wins >= 0.8 * len(case14.contingencies)


def test_invalid_options():
    with pytest.raises(ValueError):
        ipm.IpmOptions(tau=1.0)
    with pytest.raises(ValueError):
        ipm.IpmOptions(tol_kkt=0.0)
    with pytest.raises(ValueError):
        ipm.IpmOptions(warm_start_mode="hot")


def test_retry_uses_larger_regularization(monkeypatch):
    calls = []
    real = ipm.solve

    def fake(problem, start=None, opts=None, log=None):
        calls.append(opts.reg_init)
        res = real(problem, start, opts)
        if len(calls) == 1:
            res.status = ipm.NUMERICAL_FAILURE
        return res

    monkeypatch.setattr(ipm, "solve", fake)
    p = problem_with(1, SumSquares([0]))
    r = ipm.solve_with_retry(p, np.array([1.0]))
    assert calls == [1e-4, 1e-3] and r.ok


@settings(max_examples=40, deadline=None)
@given(st.floats(0.5, 2.0), st.floats(0.0, 0.5), st.floats(-1, 1), st.floats(-1, 1),
       st.floats(-1, 1), st.floats(-1, 1), st.floats(0.01, 0.99))
def test_thermal_barrier_concave_on_segments(rate, sig, p1, q1, p2, q2, t):
    """log((R v + σ)² - p² - q²) is concave along segments between feasible points (v, σ fixed)."""
    v = 1.0
    u = rate * v + sig
    pts = np.array([[p1, q1], [p2, q2]])
    pts = pts * (0.95 * u / np.maximum(np.hypot(pts[:, 0], pts[:, 1]), u))[:, None]

    def barrier(pq):
        return np.log(u * u - pq[0] ** 2 - pq[1] ** 2)

    mid = t * pts[0] + (1 - t) * pts[1]
    val = barrier(mid)
    assert np.isfinite(val)
    assert val >= t * barrier(pts[0]) + (1 - t) * barrier(pts[1]) - 1e-12
    blk = ThermalBlock("t", [0], [1], [2], [3], [rate])
    assert blk.values(np.array([v, sig, *mid]))[0] > 0
