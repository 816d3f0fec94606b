import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scacopf.nlp import (ConstraintBlock, EvaluationError, NlpProblem, ObjectiveBlock, VariableSpace,
                         check_derivatives, finalize)


class SumSquares(ObjectiveBlock):
    name = "sum_squares"

    def __init__(self, idx):
        self.idx = np.asarray(idx)

    def grad_indices(self):
        return self.idx

    def hess_structure(self):
        return self.idx, self.idx

    def value(self, x):
        return float(np.sum(x[self.idx] ** 2))

    def grad_values(self, x):
        return 2 * x[self.idx]

    def hess_values(self, x, scale):
        return np.full(len(self.idx), 2.0 * scale)


class Bilinear(ConstraintBlock):
    """x_i · x_j = c."""

    size = 1

    def __init__(self, i, j, c, name="bilinear", corrupt=0.0):
        self.name, self.i, self.j, self.corrupt = name, i, j, corrupt
        self.lb = self.ub = np.array([c])

    def jac_structure(self):
        return np.array([0, 0]), np.array([self.i, self.j])

    def hess_structure(self):
        return np.array([max(self.i, self.j)]), np.array([min(self.i, self.j)])

    def values(self, x):
        return np.array([x[self.i] * x[self.j]])

    def jac_values(self, x):
        return np.array([x[self.j] + self.corrupt, x[self.i]])

    def hess_values(self, x, lam):
        return np.array([lam[0]])


class RandomLinear(ConstraintBlock):
    """Linear rows with a given (possibly duplicated) triplet pattern; values are the coefficients."""

    def __init__(self, name, size, rows, cols, vals):
        self.name, self.size = name, size
        self.rows, self.cols, self.vals = rows, cols, vals
        self.lb = self.ub = np.zeros(size)

    def jac_structure(self):
        return self.rows, self.cols

    def values(self, x):
        return np.bincount(self.rows, weights=self.vals * x[self.cols], minlength=self.size)

    def jac_values(self, x):
        return self.vals


class Nan(ObjectiveBlock):
    name = "broken"

    def grad_indices(self):
        return np.array([0])

    def value(self, x):
        return float("nan")

    def grad_values(self, x):
        return np.array([0.0])


def problem_with(n, *blocks):
    p = NlpProblem()
    p.space.add("x", n)
    for b in blocks:
        (p.add_objective if isinstance(b, ObjectiveBlock) else p.add_constraint)(b)
    return p


def test_space_groups_and_bounds():
    sp = VariableSpace()
    a = sp.add("a", 2, 0.0, 1.0)
    b = sp.add("b", 3)
    assert list(a) == [0, 1] and list(b) == [2, 3, 4] and sp.n == 5
    assert "a" in sp and "c" not in sp
    assert sp.names()[3] == "b[1]"
    sp.fix(b[0], 2.5)
    assert sp.lb[2] == sp.ub[2] == 2.5
    with pytest.raises(ValueError):
        sp.add("a", 1)
    with pytest.raises(ValueError):
        sp.add("c", 1, 1.0, 0.0)
    with pytest.raises(ValueError):
        sp.set_bounds([0], 2.0, 1.0)
    with pytest.raises(KeyError):
        sp.index("zzz")


def test_objective_value_and_gradient():
    p = problem_with(2, SumSquares([0, 1]))
    ev = p.evaluate(np.array([1.0, 2.0]))
    assert ev.f == 5.0
    np.testing.assert_array_equal(ev.grad, [2.0, 4.0])


def test_bilinear_jacobian_and_hessian():
    p = problem_with(2, Bilinear(0, 1, 6.0))
    ev = p.evaluate(np.array([2.0, 3.0]), lam=np.array([1.0]))
    cache = p.cache
    J = np.zeros((1, 2))
    J[cache.jac_rows, cache.jac_cols] = ev.jac
    np.testing.assert_array_equal(J, [[3.0, 2.0]])
    slot = np.flatnonzero((cache.hess_rows == 1) & (cache.hess_cols == 0))
    assert len(slot) == 1 and ev.hess[slot[0]] == 1.0


def test_shared_entry_merges_into_one_slot():
    # two blocks whose Hessians both touch entry (5, 3)
    p = problem_with(6, Bilinear(3, 5, 1.0, name="a"), Bilinear(5, 3, 2.0, name="b"))
    c = finalize(p)
    assert c.hess_nnz == 1
    assert list(c.hess_slots[0]) == [0] and list(c.hess_slots[1]) == [0]
    ev = p.evaluate(np.ones(6), lam=np.array([1.0, 2.0]))
    assert ev.hess[0] == 3.0
    # duplicates inside one block share a Jacobian slot too
    q = problem_with(6, RandomLinear("c", 4, np.array([3, 3]), np.array([5, 5]), np.array([1.0, 2.0])))
    cq = finalize(q)
    assert cq.jac_nnz == 1 and list(cq.jac_slots[0]) == [0, 0]
    assert q.evaluate(np.ones(6)).jac[0] == 3.0


def test_sorted_pattern_identity_slots():
    rows, cols = np.array([0, 0, 1, 2]), np.array([0, 2, 1, 3])
    p = problem_with(4, RandomLinear("a", 3, rows, cols, np.ones(4)))
    c = finalize(p)
    np.testing.assert_array_equal(c.jac_slots[0], np.arange(4))
    assert finalize(p) is c  # idempotent


def test_pattern_out_of_range():
    p = problem_with(3, RandomLinear("a", 2, np.array([0]), np.array([7]), np.ones(1)))
    with pytest.raises(IndexError):
        finalize(p)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_assembly_equals_dense_accumulation(seed):
    rng = np.random.default_rng(seed)
    n, m, nnz = 15, 10, 200
    rows = rng.integers(0, m, nnz)
    cols = rng.integers(0, n, nnz)
    dup = rng.random(nnz) < 0.3  # force about 30% repeats of earlier entries
    src = rng.integers(0, nnz, nnz)
    rows[dup], cols[dup] = rows[src[dup]], cols[src[dup]]
    split = nnz // 2
    blocks = [RandomLinear("a", m, rows[:split], cols[:split], rng.standard_normal(split)),
              RandomLinear("b", m, rows[split:], cols[split:], rng.standard_normal(nnz - split))]
    p = problem_with(n, *blocks)
    ev = p.evaluate(rng.standard_normal(n))
    cache = p.cache
    J = np.zeros((2 * m, n))
    np.add.at(J, (cache.jac_rows, cache.jac_cols), ev.jac)
    dense = np.zeros((2 * m, n))
    for off, b in zip(p.row_offsets, blocks):
        np.add.at(dense, (b.rows + off, b.cols), b.vals)
    np.testing.assert_array_equal(J, dense)


def test_non_finite_reports_block():
    p = problem_with(2, SumSquares([0]), Nan())
    with pytest.raises(EvaluationError, match="broken"):
        p.evaluate(np.zeros(2))


def test_check_derivatives_exact_quadratic():
    p = problem_with(3, SumSquares([0, 1, 2]), Bilinear(0, 2, 1.0))
    rep = check_derivatives(p, np.array([0.3, -1.2, 2.0]))
    assert rep.max_error <= 1e-9 and rep.ok()


def test_check_derivatives_flags_corruption():
    p = problem_with(2, SumSquares([0, 1]), Bilinear(0, 1, 1.0, name="corrupted", corrupt=0.5))
    rep = check_derivatives(p, np.array([1.0, 2.0]))
    assert [b.name for b in rep.failed()] == ["corrupted"]
    assert rep.lines()[0].startswith("objective")


def test_two_bus_derivatives_at_random_points(case2):
    from scacopf.models import build_base_problem
    m = build_base_problem(case2)
    rng = np.random.default_rng(3)
    for _ in range(5):
        assert check_derivatives(m.problem, m.sample_interior(rng)).max_error <= 1e-6


def test_case14_flat_start_derivatives(case14):
    from scacopf.models import build_base_problem
    m = build_base_problem(case14)
    assert check_derivatives(m.problem, m.initial_x()).max_error <= 1e-6
