"""Smooth NLP container assembled from additive objective terms and constraint blocks.

Every block declares a fixed sparsity pattern.  :func:`finalize` merges the
patterns of all blocks once (sort by ``(row, col)``, drop duplicates) and keeps,
for each block, the index of each of its nonzeros in the merged value array.
Evaluations then scatter block values straight into those slots.

Conventions:

* Jacobian triplets are ``(row, col)`` with global row numbers.
* Hessian triplets hold the lower triangle only (``row >= col``) of
  ``obj_scale * ∇²f + Σ λ_i ∇²c_i``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

_EMPTY_I = np.zeros(0, dtype=np.int64)
_EMPTY_F = np.zeros(0)


class EvaluationError(FloatingPointError):
    """A block produced a non-finite value."""

    def __init__(self, block: str, what: str, entry: int):
        super().__init__(f"non-finite {what} in block {block!r} at local entry {entry}")
        self.block = block
        self.what = what
        self.entry = entry


class VariableSpace:
    """Ordered scalar variables organised in named groups."""

    def __init__(self):
        self._groups: dict[str, np.ndarray] = {}
        self._lb: list[np.ndarray] = []
        self._ub: list[np.ndarray] = []
        self.n = 0
        self.lb = _EMPTY_F
        self.ub = _EMPTY_F

    def add(self, name: str, size: int, lb=-np.inf, ub=np.inf) -> np.ndarray:
        if name in self._groups:
            raise ValueError(f"duplicate variable group {name!r}")
        lb = np.broadcast_to(np.asarray(lb, dtype=float), (size,)).copy()
        ub = np.broadcast_to(np.asarray(ub, dtype=float), (size,)).copy()
        if np.any(lb > ub):
            raise ValueError(f"group {name!r}: lower bound above upper bound")
        idx = np.arange(self.n, self.n + size)
        self._groups[name] = idx
        self.n += size
        self.lb = np.concatenate([self.lb, lb])
        self.ub = np.concatenate([self.ub, ub])
        return idx

    def __contains__(self, name: str) -> bool:
        return name in self._groups

    def index(self, name: str) -> np.ndarray:
        try:
            return self._groups[name]
        except KeyError:
            raise KeyError(f"unknown variable group {name!r}") from None

    @property
    def groups(self) -> dict[str, np.ndarray]:
        return dict(self._groups)

    def names(self) -> list[str]:
        out = [""] * self.n
        for name, idx in self._groups.items():
            for j, i in enumerate(idx):
                out[i] = f"{name}[{j}]"
        return out

    def set_bounds(self, index, lb, ub) -> None:
        index = np.atleast_1d(index)
        if np.any((index < 0) | (index >= self.n)):
            raise IndexError("variable index out of range")
        lb = np.broadcast_to(np.asarray(lb, dtype=float), index.shape)
        ub = np.broadcast_to(np.asarray(ub, dtype=float), index.shape)
        if np.any(lb > ub):
            raise ValueError("lower bound above upper bound")
        self.lb[index] = lb
        self.ub[index] = ub

    def fix(self, index, value) -> None:
        self.set_bounds(index, value, value)


class ObjectiveBlock:
    """Additive objective term.  Subclasses fill in the pattern and values."""

    name = "objective"

    def grad_indices(self) -> np.ndarray:
        raise NotImplementedError

    def hess_structure(self) -> tuple[np.ndarray, np.ndarray]:
        return _EMPTY_I, _EMPTY_I

    def value(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def grad_values(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hess_values(self, x: np.ndarray, scale: float) -> np.ndarray:
        return _EMPTY_F


class ConstraintBlock:
    """Group of constraints ``lb <= c(x) <= ub``; ``lb == ub`` marks equalities."""

    name = "constraints"
    size = 0
    lb: np.ndarray
    ub: np.ndarray

    def jac_structure(self) -> tuple[np.ndarray, np.ndarray]:
        """Local row numbers and global columns."""
        raise NotImplementedError

    def hess_structure(self) -> tuple[np.ndarray, np.ndarray]:
        return _EMPTY_I, _EMPTY_I

    def values(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jac_values(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hess_values(self, x: np.ndarray, lam: np.ndarray) -> np.ndarray:
        return _EMPTY_F


@dataclass
class DerivativeCache:
    jac_rows: np.ndarray
    jac_cols: np.ndarray
    hess_rows: np.ndarray
    hess_cols: np.ndarray
    jac_slots: list  # per constraint block
    hess_slots: list  # objective blocks first, then constraint blocks
    zeta: int
    grad_index: np.ndarray = field(repr=False)
    jac_all: np.ndarray = field(repr=False)
    hess_all: np.ndarray = field(repr=False)

    @property
    def jac_nnz(self) -> int:
        return len(self.jac_rows)

    @property
    def hess_nnz(self) -> int:
        return len(self.hess_rows)


@dataclass
class Evaluation:
    f: float
    grad: np.ndarray
    c: np.ndarray
    jac: np.ndarray  # values on cache.jac_rows/jac_cols
    hess: np.ndarray  # values on cache.hess_rows/hess_cols


class NlpProblem:
    """min f(x)  s.t.  c_lb <= c(x) <= c_ub,  x_lb <= x <= x_ub."""

    def __init__(self, space: VariableSpace | None = None):
        self.space = space if space is not None else VariableSpace()
        self.objective_blocks: list[ObjectiveBlock] = []
        self.constraint_blocks: list[ConstraintBlock] = []
        self.row_offsets: list[int] = []
        self.m = 0
        self._cache: DerivativeCache | None = None
        self.eval_seconds = 0.0
        self.eval_count = 0

    @property
    def n(self) -> int:
        return self.space.n

    def add_objective(self, block: ObjectiveBlock) -> ObjectiveBlock:
        self.objective_blocks.append(block)
        self._cache = None
        return block

    def add_constraint(self, block: ConstraintBlock) -> np.ndarray:
        """Register a constraint block and return its global row numbers."""
        self.row_offsets.append(self.m)
        self.constraint_blocks.append(block)
        rows = np.arange(self.m, self.m + block.size)
        self.m += block.size
        self._cache = None
        return rows

    @property
    def c_lb(self) -> np.ndarray:
        if not self.constraint_blocks:
            return _EMPTY_F
        return np.concatenate([np.broadcast_to(b.lb, (b.size,)) for b in self.constraint_blocks])

    @property
    def c_ub(self) -> np.ndarray:
        if not self.constraint_blocks:
            return _EMPTY_F
        return np.concatenate([np.broadcast_to(b.ub, (b.size,)) for b in self.constraint_blocks])

    @property
    def cache(self) -> DerivativeCache:
        return finalize(self)

    def block_rows(self, block: ConstraintBlock) -> np.ndarray:
        i = self.constraint_blocks.index(block)
        return np.arange(self.row_offsets[i], self.row_offsets[i] + block.size)

    def evaluate(self, x, lam=None, obj_scale: float = 1.0) -> Evaluation:
        return evaluate(self, finalize(self), x, lam, obj_scale)

    def eval_fc(self, x, obj_scale: float = 1.0) -> tuple[float, np.ndarray]:
        t0 = time.perf_counter()
        f = obj_scale * sum(b.value(x) for b in self.objective_blocks)
        c = self._constraint_values(x)
        self.eval_seconds += time.perf_counter() - t0
        self.eval_count += 1
        return f, c

    def objective(self, x) -> float:
        return float(sum(b.value(x) for b in self.objective_blocks))

    def constraints(self, x) -> np.ndarray:
        return self._constraint_values(x)

    def _constraint_values(self, x) -> np.ndarray:
        if not self.constraint_blocks:
            return _EMPTY_F
        return np.concatenate([b.values(x) for b in self.constraint_blocks])


def _merge(rows_per_block, cols_per_block, n_cols):
    if rows_per_block:
        rows = np.concatenate(rows_per_block).astype(np.int64)
        cols = np.concatenate(cols_per_block).astype(np.int64)
    else:
        rows = cols = _EMPTY_I
    keys = rows * n_cols + cols
    uniq, inverse = np.unique(keys, return_inverse=True)
    slots, start = [], 0
    for r in rows_per_block:
        slots.append(inverse[start:start + len(r)])
        start += len(r)
    return uniq // n_cols, uniq % n_cols, slots, inverse.astype(np.int64)


def finalize(problem: NlpProblem) -> DerivativeCache:
    """Build (once) the merged triplet patterns and per-block slot arrays."""
    if problem._cache is not None:
        return problem._cache
    n, m = problem.n, problem.m

    jr, jc = [], []
    for off, blk in zip(problem.row_offsets, problem.constraint_blocks):
        r, c = blk.jac_structure()
        r, c = np.asarray(r, dtype=np.int64), np.asarray(c, dtype=np.int64)
        if len(r) and (r.min() < 0 or r.max() >= blk.size or c.min() < 0 or c.max() >= n):
            raise IndexError(f"block {blk.name!r}: Jacobian pattern outside dimensions")
        jr.append(r + off)
        jc.append(c)

    hr, hc = [], []
    grad_idx = []
    for blk in problem.objective_blocks:
        g = np.asarray(blk.grad_indices(), dtype=np.int64)
        if len(g) and (g.min() < 0 or g.max() >= n):
            raise IndexError(f"block {blk.name!r}: gradient pattern outside dimensions")
        grad_idx.append(g)
    for blk in problem.objective_blocks + problem.constraint_blocks:
        r, c = blk.hess_structure()
        r, c = np.asarray(r, dtype=np.int64), np.asarray(c, dtype=np.int64)
        if len(r) and (min(r.min(), c.min()) < 0 or max(r.max(), c.max()) >= n):
            raise IndexError(f"block {blk.name!r}: Hessian pattern outside dimensions")
        if np.any(r < c):
            raise ValueError(f"block {blk.name!r}: Hessian pattern must be lower triangular")
        hr.append(r)
        hc.append(c)

    jrows, jcols, jslots, jall = _merge(jr, jc, max(n, 1))
    hrows, hcols, hslots, hall = _merge(hr, hc, max(n, 1))
    zeta = int(sum(len(r) for r in jr) + sum(len(r) for r in hr))
    cache = DerivativeCache(
        jac_rows=jrows, jac_cols=jcols, hess_rows=hrows, hess_cols=hcols,
        jac_slots=jslots, hess_slots=hslots, zeta=zeta,
        grad_index=np.concatenate(grad_idx) if grad_idx else _EMPTY_I,
        jac_all=jall, hess_all=hall,
    )
    assert m == sum(b.size for b in problem.constraint_blocks)
    problem._cache = cache
    return cache


def _check_finite(blocks, arrays, what):
    for blk, arr in zip(blocks, arrays):
        arr = np.atleast_1d(arr)
        bad = np.flatnonzero(~np.isfinite(arr))
        if len(bad):
            raise EvaluationError(blk.name, what, int(bad[0]))


def evaluate(problem: NlpProblem, cache: DerivativeCache, x, lam=None, obj_scale: float = 1.0) -> Evaluation:
    """Objective, gradient, constraints, Jacobian and Lagrangian Hessian at ``x``."""
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=float)
    n = problem.n
    if x.shape != (n,):
        raise ValueError(f"expected x of length {n}, got {x.shape}")
    lam = np.zeros(problem.m) if lam is None else np.asarray(lam, dtype=float)
    objs, cons = problem.objective_blocks, problem.constraint_blocks

    fvals = [b.value(x) for b in objs]
    gvals = [b.grad_values(x) for b in objs]
    cvals = [b.values(x) for b in cons]
    jvals = [b.jac_values(x) for b in cons]
    hvals = [b.hess_values(x, obj_scale) for b in objs]
    for off, b in zip(problem.row_offsets, cons):
        hvals.append(b.hess_values(x, lam[off:off + b.size]))

    f = obj_scale * float(sum(fvals))
    grad = obj_scale * np.bincount(
        cache.grad_index, weights=np.concatenate(gvals) if gvals else _EMPTY_F, minlength=n
    )
    c = np.concatenate(cvals) if cvals else _EMPTY_F
    jac = np.bincount(
        cache.jac_all, weights=np.concatenate(jvals) if jvals else _EMPTY_F, minlength=cache.jac_nnz
    )
    hess = np.bincount(
        cache.hess_all, weights=np.concatenate(hvals) if hvals else _EMPTY_F, minlength=cache.hess_nnz
    )
    # the sum is finite iff every entry is (barring overflow, rechecked below)
    probe = f + grad.sum() + c.sum() + jac.sum() + hess.sum()
    if not np.isfinite(probe):
        _check_finite(objs, fvals, "objective value")
        _check_finite(objs, gvals, "gradient")
        _check_finite(cons, cvals, "constraint value")
        _check_finite(cons, jvals, "Jacobian")
        _check_finite(objs + cons, hvals, "Hessian")
        if not all(np.isfinite(a).all() for a in (f, grad, c, jac, hess)):
            raise EvaluationError("<assembly>", "value", 0)
    problem.eval_seconds += time.perf_counter() - t0
    problem.eval_count += 1
    return Evaluation(f, grad, c, jac, hess)


# ----------------------------------------------------------------------------
# finite-difference checking


@dataclass
class BlockCheck:
    name: str
    kind: str  # "objective" or "constraint"
    first_order: float  # max relative error of gradient / Jacobian
    second_order: float  # max relative error of Hessian


@dataclass
class DerivativeReport:
    blocks: list[BlockCheck]

    @property
    def max_error(self) -> float:
        return max((max(b.first_order, b.second_order) for b in self.blocks), default=0.0)

    def failed(self, tol: float = 1e-6) -> list[BlockCheck]:
        return [b for b in self.blocks if max(b.first_order, b.second_order) > tol]

    def ok(self, tol: float = 1e-6) -> bool:
        return not self.failed(tol)

    def lines(self) -> list[str]:
        return [
            f"{b.kind:10s} {b.name:32s} d1={b.first_order:.2e} d2={b.second_order:.2e}"
            for b in self.blocks
        ]


def _rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def _dense_lower(rows, cols, vals, cols_of_interest):
    pos = {c: i for i, c in enumerate(cols_of_interest)}
    k = len(cols_of_interest)
    H = np.zeros((k, k))
    for r, c, v in zip(rows, cols, vals):
        i, j = pos[r], pos[c]
        H[i, j] += v
        if i != j:
            H[j, i] += v
    return H


def check_derivatives(problem: NlpProblem, x, seed: int = 0, step: float = 1e-6) -> DerivativeReport:
    """Compare each block's analytic derivatives with central differences.

    The step for variable ``i`` is ``step * (1 + |x_i|)``.  Second derivatives
    are checked against differences of the analytic first derivatives (for
    constraints, of ``λᵀJ`` with random ``λ`` drawn from ``seed``).
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float)
    out = []

    for blk in problem.objective_blocks:
        idx = np.asarray(blk.grad_indices(), dtype=np.int64)
        cols = np.unique(idx)
        g = np.zeros(problem.n)
        np.add.at(g, idx, blk.grad_values(x))
        fd_g = np.zeros(len(cols))
        fd_h = np.zeros((len(cols), len(cols)))
        for j, col in enumerate(cols):
            h = step * (1.0 + abs(x[col]))
            xp, xm = x.copy(), x.copy()
            xp[col] += h
            xm[col] -= h
            fd_g[j] = (blk.value(xp) - blk.value(xm)) / (2 * h)
            gp, gm = np.zeros(problem.n), np.zeros(problem.n)
            np.add.at(gp, idx, blk.grad_values(xp))
            np.add.at(gm, idx, blk.grad_values(xm))
            fd_h[:, j] = ((gp - gm) / (2 * h))[cols]
        hr, hc = blk.hess_structure()
        H = _dense_lower(hr, hc, blk.hess_values(x, 1.0), cols) if len(cols) else fd_h
        out.append(BlockCheck(blk.name, "objective", _rel_err(g[cols], fd_g), _rel_err(H, fd_h)))

    for blk in problem.constraint_blocks:
        jr, jc = blk.jac_structure()
        jr, jc = np.asarray(jr), np.asarray(jc)
        cols = np.unique(jc)
        jpos = np.searchsorted(cols, jc)
        J = np.zeros((blk.size, len(cols)))
        np.add.at(J, (jr, jpos), blk.jac_values(x))
        lam = rng.standard_normal(blk.size)
        fd_J = np.zeros_like(J)
        fd_H = np.zeros((len(cols), len(cols)))

        lam_at = lam[jr]

        def lam_jac(xx):
            return np.bincount(jpos, weights=lam_at * blk.jac_values(xx), minlength=len(cols))

        for j, col in enumerate(cols):
            h = step * (1.0 + abs(x[col]))
            xp, xm = x.copy(), x.copy()
            xp[col] += h
            xm[col] -= h
            fd_J[:, j] = (blk.values(xp) - blk.values(xm)) / (2 * h)
            fd_H[:, j] = (lam_jac(xp) - lam_jac(xm)) / (2 * h)
        hr, hc = blk.hess_structure()
        H = _dense_lower(hr, hc, blk.hess_values(x, lam), cols) if len(hr) else np.zeros_like(fd_H)
        out.append(BlockCheck(blk.name, "constraint", _rel_err(J, fd_J), _rel_err(H, fd_H)))
    return DerivativeReport(out)
