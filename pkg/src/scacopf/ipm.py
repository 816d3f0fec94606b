"""Primal-dual interior-point method for :class:`~scacopf.nlp.NlpProblem`.

Inequality rows get a slack ``s`` with ``c(x) - s = 0`` and the row bounds
moved onto ``s``.  Fixed variables (``lb == ub``) are held at their value and
removed from the Newton system.  The barrier parameter follows the monotone
Fiacco-McCormick rule with superlinear decrease; each barrier subproblem is solved by damped Newton steps
with inertia correction and an Armijo backtracking search on the exact
l1 merit function ``φ_μ(y) + ν ||c(x) - b||_1``; a rejected full step first
gets up to four second-order corrections.

Multiplier sign convention: ``∇f + Jᵀλ - z_l + z_u = 0``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.linalg.lapack import dsytrf, dsytrs
from scipy.sparse.linalg import splu

from .nlp import Evaluation, NlpProblem, evaluate, finalize

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
ACCEPTABLE = "acceptable"
INFEASIBLE = "infeasible-point"
ITERATION_LIMIT = "iteration-limit"
NUMERICAL_FAILURE = "numerical-failure"

_S_MAX = 100.0
_KAPPA_SIGMA = 1e10
_ETA_ARMIJO = 1e-4


@dataclass
class IpmOptions:
    mu_init: float = 0.1
    mu_min: float = 1e-11
    mu_factor: float = 0.2
    kappa_eps: float = 10.0
    tol_kkt: float = 1e-8
    acceptable_tol: float = 1e-6
    max_iter: int = 300
    tau: float = 0.995
    reg_init: float = 1e-4
    reg_min: float = 1e-20
    reg_growth: float = 8.0
    reg_first_growth: float = 100.0
    reg_max: float = 1e20
    warm_start_mode: str = "cold"  # cold | primal | primal-dual
    bound_push: float = 1e-2
    warm_bound_push: float = 1e-4
    primal_dual_bound_push: float = 1e-9
    max_gradient: float = 100.0
    obj_scale: float | None = None
    dense_threshold: int = 2000
    max_ls_failures: int = 6
    time_limit: float | None = None

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError("fraction_to_boundary tau must lie in (0, 1)")
        if self.tol_kkt <= 0 or self.acceptable_tol <= 0 or self.mu_init <= 0:
            raise ValueError("tolerances and mu_init must be positive")
        if self.warm_start_mode not in ("cold", "primal", "primal-dual"):
            raise ValueError(f"unknown warm_start_mode {self.warm_start_mode!r}")


@dataclass
class StartPoint:
    x: np.ndarray
    lam: np.ndarray | None = None
    zl: np.ndarray | None = None
    zu: np.ndarray | None = None
    mu: float | None = None


@dataclass
class IpmResult:
    status: str
    x: np.ndarray
    lam: np.ndarray
    zl: np.ndarray
    zu: np.ndarray
    kkt_residual: float
    iterations: int
    mu: float
    obj: float
    obj_scale: float
    solve_seconds: float = 0.0
    eval_seconds: float = 0.0
    log: list = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.status in (OPTIMAL, ACCEPTABLE)


def warm_start_from(base: IpmResult, mode: str = "primal", problem: NlpProblem | None = None,
                    kappa: float = 1e-4) -> StartPoint:
    """Start point for a re-solve over the same variable space.

    ``primal`` keeps ``x`` and resets constraint multipliers to 0 and bound
    multipliers to 1; ``primal-dual`` keeps everything and sets ``μ = 1e-5``.
    With ``problem`` given, entries on or outside a bound are pushed inside by
    ``kappa * width``; strictly interior entries are kept.
    """
    x = np.array(base.x, dtype=float)
    if problem is not None:
        if problem.n != len(x):
            raise ValueError(f"dimension mismatch: start has {len(x)} entries, problem {problem.n}")
        lb, ub = problem.space.lb, problem.space.ub
        off = (x <= lb) | (x >= ub)
        x[off] = push_inside(x[off], lb[off], ub[off], kappa)
    if mode == "primal":
        return StartPoint(x, np.zeros_like(base.lam), np.ones_like(base.zl), np.ones_like(base.zu), None)
    if mode == "primal-dual":
        return StartPoint(x, base.lam.copy(), base.zl.copy(), base.zu.copy(), 1e-5)
    raise ValueError(f"unknown warm start mode {mode!r}")


def push_inside(x, lb, ub, kappa) -> np.ndarray:
    """Move entries at/outside a bound strictly inside by ``kappa * width``.

    One-sided bounds use ``kappa * max(1, |bound|)`` as the width.  Fixed
    entries are set to their value.
    """
    x = np.array(x, dtype=float)
    lb, ub = np.asarray(lb, dtype=float), np.asarray(ub, dtype=float)
    fixed = lb == ub
    with np.errstate(invalid="ignore"):
        width = np.where(np.isfinite(ub - lb), ub - lb, np.inf)
    pl = np.where(np.isfinite(width), kappa * width, kappa * np.maximum(1.0, np.abs(lb)))
    pu = np.where(np.isfinite(width), kappa * width, kappa * np.maximum(1.0, np.abs(ub)))
    with np.errstate(invalid="ignore"):
        lo = lb + pl
        hi = ub - pu
    x = np.where(np.isfinite(lb) & (x < lo), lo, x)
    x = np.where(np.isfinite(ub) & (x > hi), hi, x)
    x[fixed] = lb[fixed]
    return x


# ----------------------------------------------------------------------------


def _inertia(ldu: np.ndarray, ipiv: np.ndarray, tiny: float = 1e-300) -> tuple[int, int, int]:
    """(positive, negative, zero) eigenvalue counts of the Bunch-Kaufman D factor."""
    n = ldu.shape[0]
    pos = neg = zero = 0
    k = 0
    d = np.diagonal(ldu)
    while k < n:
        if ipiv[k] > 0:
            v = d[k]
            if abs(v) <= tiny:
                zero += 1
            elif v > 0:
                pos += 1
            else:
                neg += 1
            k += 1
        else:
            a, b, c = d[k], ldu[k + 1, k], d[k + 1]
            det = a * c - b * b
            if det < 0:
                pos += 1
                neg += 1
            elif det == 0:
                zero += 1
                if a + c > 0:
                    pos += 1
                else:
                    neg += 1
            elif a + c > 0:
                pos += 2
            else:
                neg += 2
            k += 2
    return pos, neg, zero


class _Kkt:
    """Assembles and factors the reduced primal-dual system for one solve."""

    def __init__(self, cache, free_pos, nf, mi, m, ineq_rows, dense_threshold):
        self.nf, self.mi, self.m = nf, mi, m
        self.N = nf + mi + m
        self.dense = self.N <= dense_threshold
        hr, hc = free_pos[cache.hess_rows], free_pos[cache.hess_cols]
        self.h_keep = np.flatnonzero((hr >= 0) & (hc >= 0))
        self.h_r, self.h_c = hr[self.h_keep], hc[self.h_keep]
        jc = free_pos[cache.jac_cols]
        self.j_keep = np.flatnonzero(jc >= 0)
        self.j_r = cache.jac_rows[self.j_keep] + nf + mi
        self.j_c = jc[self.j_keep]
        self.s_r = ineq_rows + nf + mi
        self.s_c = np.arange(nf, nf + mi)
        self.diag_y = np.arange(nf + mi)
        self.diag_c = np.arange(nf + mi, self.N)
        self._factor = None

    def _assemble_dense(self, hess, jac, sigma, dw, dc):
        K = np.zeros((self.N, self.N))
        K[self.h_r, self.h_c] = hess[self.h_keep]
        K[self.j_r, self.j_c] = jac[self.j_keep]
        K[self.s_r, self.s_c] = -1.0
        K[self.diag_y, self.diag_y] += sigma + dw
        K[self.diag_c, self.diag_c] -= dc
        return K

    def _assemble_sparse(self, hess, jac, sigma, dw, dc):
        rows = np.concatenate([self.h_r, self.j_r, self.s_r, self.diag_y, self.diag_c])
        cols = np.concatenate([self.h_c, self.j_c, self.s_c, self.diag_y, self.diag_c])
        vals = np.concatenate([hess[self.h_keep], jac[self.j_keep], -np.ones(self.mi),
                               sigma + dw, -dc * np.ones(self.m)])
        L = sp.coo_matrix((vals, (rows, cols)), shape=(self.N, self.N)).tocsc()
        return (L + sp.tril(L, -1).T).tocsc()

    def factor_solve(self, hess, jac, sigma, dw, dc, rhs):
        """Return (solution, inertia_ok, singular)."""
        n_pos = self.nf + self.mi
        if self.dense:
            K = self._assemble_dense(hess, jac, sigma, dw, dc)
            ldu, ipiv, info = dsytrf(K, lower=1, overwrite_a=1)
            if info < 0:
                raise RuntimeError(f"dsytrf argument error {info}")
            pos, neg, zero = _inertia(ldu, ipiv)
            if zero > 0 or info > 0:
                return None, False, True
            if pos != n_pos or neg != self.m:
                return None, False, False
            sol, info = dsytrs(ldu, ipiv, rhs, lower=1)
            if info != 0 or not np.all(np.isfinite(sol)):
                return None, False, True
            self._factor = ("dense", ldu, ipiv)
            return sol, True, False
        # large systems: LU without inertia, accept the step only under a curvature test
        K = self._assemble_sparse(hess, jac, sigma, dw, dc)
        try:
            lu = splu(K)
        except RuntimeError:
            return None, False, True
        sol = lu.solve(rhs)
        if not np.all(np.isfinite(sol)):
            return None, False, True
        dy, dl = sol[:n_pos], sol[n_pos:]
        Kyy = K[:n_pos, :n_pos]
        curv = dy @ (Kyy @ dy) + dc * (dl @ dl)
        if curv < 1e-10 * (dy @ dy):
            return None, False, False
        self._factor = ("sparse", lu)
        return sol, True, False

    def resolve(self, rhs):
        """Back-substitute with the last accepted factorization."""
        if self._factor[0] == "dense":
            sol, info = dsytrs(self._factor[1], self._factor[2], rhs, lower=1)
            if info != 0:
                return None
        else:
            sol = self._factor[1].solve(rhs)
        return sol if np.all(np.isfinite(sol)) else None


def _ftb(v, dv, tau):
    """Largest step in (0, 1] keeping v + a*dv >= (1 - tau) * v for v > 0."""
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))


def kkt_residual(problem: NlpProblem, x, lam, zl, zu, obj_scale: float = 1.0) -> float:
    """Scaled optimality error at (x, λ, z_l, z_u), recomputed from scratch.

    Multipliers are given in unscaled units (as returned in IpmResult).
    """
    ev = evaluate(problem, finalize(problem), x, lam * obj_scale, obj_scale)
    free = problem.space.lb < problem.space.ub
    return _overall_error(problem, ev, np.asarray(x, float), lam * obj_scale, zl * obj_scale,
                          zu * obj_scale, free)


def _overall_error(problem, ev: Evaluation, x, lam, zl, zu, free) -> float:
    cache = finalize(problem)
    lb, ub = problem.space.lb, problem.space.ub
    cl, cu = problem.c_lb, problem.c_ub
    stat = ev.grad + np.bincount(cache.jac_cols, weights=ev.jac * lam[cache.jac_rows],
                                 minlength=problem.n) - zl + zu
    stat = np.abs(stat[free]).max(initial=0.0)
    nf = int(free.sum())
    m = problem.m
    zsum = np.abs(zl[free]).sum() + np.abs(zu[free]).sum()
    s_d = max(_S_MAX, (np.abs(lam).sum() + zsum) / max(1, m + 2 * nf)) / _S_MAX
    s_c = max(_S_MAX, zsum / max(1, 2 * nf)) / _S_MAX
    c = ev.c
    feas = 0.0
    if m:
        feas = max(np.max(np.maximum(cl - c, 0.0)), np.max(np.maximum(c - cu, 0.0)))
    feas = max(feas, np.max(np.maximum(lb - x, 0.0), initial=0.0),
               np.max(np.maximum(x - ub, 0.0), initial=0.0))
    hl, hu = free & np.isfinite(lb), free & np.isfinite(ub)
    comp = max(np.max(np.abs(zl[hl] * (x[hl] - lb[hl])), initial=0.0),
               np.max(np.abs(zu[hu] * (ub[hu] - x[hu])), initial=0.0))
    if m:
        ineq = cl < cu
        lo = ineq & np.isfinite(cl)
        up = ineq & np.isfinite(cu)
        comp = max(comp,
                   np.max(np.abs(np.maximum(-lam[lo], 0.0) * (c[lo] - cl[lo])), initial=0.0),
                   np.max(np.abs(np.maximum(lam[up], 0.0) * (cu[up] - c[up])), initial=0.0))
    return float(max(stat / s_d, feas, comp / s_c))


def solve(problem: NlpProblem, start=None, opts: IpmOptions | None = None, log=None) -> IpmResult:
    """Solve ``problem`` from ``start`` (a StartPoint, an x array, or None)."""
    opts = opts or IpmOptions()
    t_start = time.perf_counter()
    eval_t0 = problem.eval_seconds
    cache = finalize(problem)
    n, m = problem.n, problem.m
    space = problem.space
    xl, xu = space.lb.copy(), space.ub.copy()
    cl, cu = problem.c_lb, problem.c_ub
    lines: list[str] = []

    if start is None:
        if opts.warm_start_mode != "cold":
            raise ValueError("warm start requested without a start point")
        start = StartPoint(np.clip(np.zeros(n), xl, xu))
    elif not isinstance(start, StartPoint):
        start = StartPoint(np.asarray(start, dtype=float))
    if len(start.x) != n:
        raise ValueError(f"start point has {len(start.x)} entries, problem has {n}")
    warm = opts.warm_start_mode != "cold"

    fixed = xl == xu
    free = ~fixed
    free_idx = np.flatnonzero(free)
    free_pos = -np.ones(n, dtype=np.int64)
    free_pos[free_idx] = np.arange(len(free_idx))
    nf = len(free_idx)
    eq = cl == cu
    ineq_rows = np.flatnonzero(~eq)
    mi = len(ineq_rows)

    push = {"cold": opts.bound_push, "primal": opts.warm_bound_push,
            "primal-dual": opts.primal_dual_bound_push}[opts.warm_start_mode]
    x = push_inside(start.x, xl, xu, push) if warm else _cold_push(start.x, xl, xu, push)

    yl = np.concatenate([xl[free_idx], cl[ineq_rows]])
    yu = np.concatenate([xu[free_idx], cu[ineq_rows]])
    has_l, has_u = np.isfinite(yl), np.isfinite(yu)

    ev = evaluate(problem, cache, x, np.zeros(m), 1.0)
    if opts.obj_scale is not None:
        df = opts.obj_scale
    else:
        gmax = np.abs(ev.grad[free_idx]).max(initial=0.0)
        df = min(1.0, opts.max_gradient / gmax) if gmax > 0 else 1.0

    s = ev.c[ineq_rows].copy()
    s = push_inside(s, cl[ineq_rows], cu[ineq_rows], push) if warm else _cold_push(
        s, cl[ineq_rows], cu[ineq_rows], push)
    y = np.concatenate([x[free_idx], s])

    mu = opts.mu_init
    if warm and opts.warm_start_mode == "primal-dual" and start.mu is not None:
        mu = start.mu
    lam = np.zeros(m)
    zl = np.where(has_l, 1.0, 0.0)
    zu = np.where(has_u, 1.0, 0.0)
    if opts.warm_start_mode == "primal-dual":
        if start.lam is not None:
            lam = df * np.asarray(start.lam, dtype=float)
        if start.zl is not None:
            zl[:nf] = np.where(has_l[:nf], np.maximum(df * start.zl[free_idx], mu * 1e-3), 0.0)
        if start.zu is not None:
            zu[:nf] = np.where(has_u[:nf], np.maximum(df * start.zu[free_idx], mu * 1e-3), 0.0)
        # slack multipliers from λ_I = z_u - z_l
        li = lam[ineq_rows]
        zl[nf:] = np.where(has_l[nf:], np.maximum(-li, mu * 1e-3), 0.0)
        zu[nf:] = np.where(has_u[nf:], np.maximum(li, mu * 1e-3), 0.0)

    kkt = _Kkt(cache, free_pos, nf, mi, m, ineq_rows, opts.dense_threshold)
    dw_last = 0.0
    alpha = 0.0
    nu = 1.0
    ls_failures = 0
    status = ITERATION_LIMIT
    it = 0
    best = None

    def unpack(yv):
        xx = x.copy()
        xx[free_idx] = yv[:nf]
        return xx

    def merit_parts(yv, f, c):
        gl = yv - yl
        gu = yu - yv
        bar = -mu * (np.log(gl[has_l]).sum() + np.log(gu[has_u]).sum())
        d = c.copy()
        d[eq] -= cl[eq]
        d[ineq_rows] -= yv[nf:]
        return f + bar, d

    while True:
        x = unpack(y)
        ev = evaluate(problem, cache, x, lam, df)
        gl = np.where(has_l, y - yl, 1.0)
        gu = np.where(has_u, yu - y, 1.0)

        # gradient of Lagrangian wrt y (scaled problem)
        gy = np.zeros(nf + mi)
        gy[:nf] = ev.grad[free_idx]
        jtl = np.bincount(cache.jac_cols, weights=ev.jac * lam[cache.jac_rows], minlength=n)
        gy[:nf] += jtl[free_idx]
        gy[nf:] -= lam[ineq_rows]
        d = ev.c.copy()
        d[eq] -= cl[eq]
        d[ineq_rows] -= y[nf:]

        zsum = zl.sum() + zu.sum()
        s_d = max(_S_MAX, (np.abs(lam).sum() + zsum) / max(1, m + nf + mi)) / _S_MAX
        s_c = max(_S_MAX, zsum / max(1, nf + mi)) / _S_MAX
        dual_inf = np.abs(gy - zl + zu).max(initial=0.0)
        primal_inf = np.abs(d).max(initial=0.0)

        def barrier_error(mu_):
            cl_ = np.abs(np.where(has_l, zl * gl - mu_, 0.0)).max(initial=0.0)
            cu_ = np.abs(np.where(has_u, zu * gu - mu_, 0.0)).max(initial=0.0)
            return max(dual_inf / s_d, primal_inf, max(cl_, cu_) / s_c)

        lam_u = lam / df
        zlx = np.zeros(n)
        zux = np.zeros(n)
        zlx[free_idx] = zl[:nf] / df
        zux[free_idx] = zu[:nf] / df
        e0 = _overall_error(problem, ev, x, lam, zlx * df, zux * df, free)
        if best is None or e0 < best[0]:
            best = (e0, x.copy(), lam_u.copy(), zlx.copy(), zux.copy(), mu)
        line = (f"{it:4d} {ev.f / df: .10e} {primal_inf:.2e} {dual_inf / s_d:.2e} "
                f"{np.log10(mu):5.1f} {dw_last:.1e} {alpha:.2e} {ls_failures:d}")
        lines.append(line)
        if log is not None:
            log(line)
        logger.debug(line)

        if e0 <= opts.tol_kkt:
            status = OPTIMAL
            break
        if it >= opts.max_iter:
            status = ITERATION_LIMIT
            break
        if opts.time_limit is not None and time.perf_counter() - t_start > opts.time_limit:
            status = ITERATION_LIMIT
            break

        # monotone barrier update
        while mu > opts.mu_min and barrier_error(mu) <= opts.kappa_eps * mu:
            mu = max(opts.mu_min, min(opts.mu_factor * mu, mu ** 1.5))
            ls_failures = 0
        tau = max(opts.tau, 1.0 - mu)

        sig_l = np.where(has_l, zl / gl, 0.0)
        sig_u = np.where(has_u, zu / gu, 0.0)
        sigma = sig_l + sig_u
        grad_phi = gy - np.where(has_l, mu / gl, 0.0) + np.where(has_u, mu / gu, 0.0)
        rhs = -np.concatenate([grad_phi, d])

        # inertia correction
        dc = 0.0
        dw = 0.0
        sol, ok, singular = kkt.factor_solve(ev.hess, ev.jac, sigma, dw, dc, rhs)
        if not ok:
            if singular:
                dc = 1e-8 * mu ** 0.25
            dw = opts.reg_init if dw_last == 0 else max(opts.reg_min, dw_last / 3.0)
            while True:
                sol, ok, singular = kkt.factor_solve(ev.hess, ev.jac, sigma, dw, dc, rhs)
                if ok:
                    break
                if singular and dc == 0.0:
                    dc = 1e-8 * mu ** 0.25
                dw *= opts.reg_first_growth if dw_last == 0 else opts.reg_growth
                if dw > opts.reg_max:
                    break
            if not ok:
                status = NUMERICAL_FAILURE
                break
            dw_last = dw
        dy = sol[:nf + mi]
        dlam = sol[nf + mi:]
        dzl = np.where(has_l, mu / gl - zl - sig_l * dy, 0.0)
        dzu = np.where(has_u, mu / gu - zu + sig_u * dy, 0.0)

        gap_l = np.where(has_l, gl, np.inf)
        gap_u = np.where(has_u, gu, np.inf)
        a_max = min(_ftb(gap_l[has_l], dy[has_l], tau), _ftb(gap_u[has_u], -dy[has_u], tau))
        a_z = min(_ftb(zl[has_l], dzl[has_l], tau), _ftb(zu[has_u], dzu[has_u], tau))

        # l1 merit line search
        nu = max(nu, 1.01 * np.abs(lam + dlam).max(initial=0.0) + 1e-8)
        phi0, d0 = merit_parts(y, ev.f, ev.c)
        Jdy = np.bincount(cache.jac_rows[kkt.j_keep], weights=ev.jac[kkt.j_keep] * dy[kkt.j_c], minlength=m)
        lin = d0 + Jdy
        lin[ineq_rows] -= dy[nf:]
        dphi = grad_phi @ dy + nu * (np.abs(lin).sum() - np.abs(d0).sum())
        m0 = phi0 + nu * np.abs(d0).sum()
        def trial(yt):
            """Merit value and constraint residual at ``yt`` (None outside the domain)."""
            if not (np.all(yt[has_l] > yl[has_l]) and np.all(yt[has_u] < yu[has_u])):
                return None, None
            ft, ct = problem.eval_fc(unpack(yt), df)
            if not (np.isfinite(ft) and np.all(np.isfinite(ct))):
                return None, None
            phit, dt = merit_parts(yt, ft, ct)
            return phit + nu * np.abs(dt).sum(), dt

        def sufficient(mt, a):
            return mt is not None and mt <= m0 + _ETA_ARMIJO * a * min(dphi, 0.0) + 1e-14 * abs(m0)

        alpha = a_max
        mt, dt = trial(y + alpha * dy)
        accepted = sufficient(mt, alpha)
        if not accepted and dt is not None:
            # second-order corrections against the Maratos effect
            c_soc = alpha * d0 + dt
            theta = np.abs(dt).sum()
            for _ in range(4):
                sol_c = kkt.resolve(-np.concatenate([grad_phi, c_soc]))
                if sol_c is None:
                    break
                dy_c = sol_c[:nf + mi]
                a_c = min(_ftb(gap_l[has_l], dy_c[has_l], tau), _ftb(gap_u[has_u], -dy_c[has_u], tau))
                mt, dt = trial(y + a_c * dy_c)
                if sufficient(mt, alpha):
                    dy, dlam, alpha = dy_c, sol_c[nf + mi:], a_c
                    dzl = np.where(has_l, mu / gl - zl - sig_l * dy, 0.0)
                    dzu = np.where(has_u, mu / gu - zu + sig_u * dy, 0.0)
                    a_z = min(_ftb(zl[has_l], dzl[has_l], tau), _ftb(zu[has_u], dzu[has_u], tau))
                    accepted = True
                    break
                if dt is None or np.abs(dt).sum() > 0.99 * theta:
                    break
                theta = np.abs(dt).sum()
                c_soc = a_c * c_soc + dt
        if not accepted:
            alpha = a_max
            for _ in range(40):
                alpha *= 0.5
                if alpha < 1e-12:
                    break
                if sufficient(trial(y + alpha * dy)[0], alpha):
                    accepted = True
                    break
        if not accepted:
            ls_failures += 1
            if ls_failures > opts.max_ls_failures:
                status = NUMERICAL_FAILURE
                break
            # take a short step anyway and raise the regularization floor
            alpha = min(a_max, 1e-2)
            dw_last = max(dw_last * 10.0, opts.reg_init)
        else:
            ls_failures = 0

        y = y + alpha * dy
        lam = lam + alpha * dlam
        zl = zl + a_z * dzl
        zu = zu + a_z * dzu
        # keep bound multipliers close to μ/gap
        gl = np.where(has_l, y - yl, 1.0)
        gu = np.where(has_u, yu - y, 1.0)
        it += 1
        if np.any(gl <= 0) or np.any(gu <= 0):
            # rounding put an iterate on a bound
            status = NUMERICAL_FAILURE
            break
        zl = np.where(has_l, np.clip(zl, mu / (_KAPPA_SIGMA * gl), _KAPPA_SIGMA * mu / gl), 0.0)
        zu = np.where(has_u, np.clip(zu, mu / (_KAPPA_SIGMA * gu), _KAPPA_SIGMA * mu / gu), 0.0)

    if status not in (OPTIMAL,):
        e0, xb, lb_, zlb, zub, mub = best
        if e0 <= opts.acceptable_tol:
            status = ACCEPTABLE
        elif status == NUMERICAL_FAILURE and primal_inf > opts.acceptable_tol:
            # stuck away from the constraint set
            status = INFEASIBLE
        x, lam_u, zlx, zux, mu = xb, lb_, zlb, zub, mub
        final_err = e0
    else:
        final_err = e0
    obj = problem.objective(x)
    return IpmResult(
        status=status, x=x, lam=lam_u, zl=zlx, zu=zux, kkt_residual=float(final_err),
        iterations=it, mu=mu, obj=obj, obj_scale=df,
        solve_seconds=time.perf_counter() - t_start,
        eval_seconds=problem.eval_seconds - eval_t0, log=lines,
    )


def _cold_push(x, lb, ub, kappa):
    """Ipopt-style initial projection into the interior of the bounds."""
    x = np.array(x, dtype=float)
    lb, ub = np.asarray(lb, float), np.asarray(ub, float)
    fixed = lb == ub
    with np.errstate(invalid="ignore"):
        width = ub - lb
    pl = np.minimum(kappa * np.maximum(1.0, np.abs(lb)), kappa * width)
    pu = np.minimum(kappa * np.maximum(1.0, np.abs(ub)), kappa * width)
    pl = np.where(np.isfinite(pl), pl, kappa * np.maximum(1.0, np.abs(lb)))
    pu = np.where(np.isfinite(pu), pu, kappa * np.maximum(1.0, np.abs(ub)))
    with np.errstate(invalid="ignore"):
        x = np.where(np.isfinite(lb) & (x < lb + pl), lb + pl, x)
        x = np.where(np.isfinite(ub) & (x > ub - pu), ub - pu, x)
    both = np.isfinite(lb) & np.isfinite(ub) & ~fixed & (width <= pl + pu)
    x[both] = 0.5 * (lb[both] + ub[both])
    x[fixed] = lb[fixed]
    return x


def solve_with_retry(problem, start=None, opts: IpmOptions | None = None) -> IpmResult:
    """Solve; on numerical failure retry once with 10x the initial regularization."""
    opts = opts or IpmOptions()
    res = solve(problem, start, opts)
    if res.status == NUMERICAL_FAILURE:
        logger.info("ipm numerical failure; retrying with 10x regularization")
        res2 = solve(problem, start, replace(opts, reg_init=10.0 * opts.reg_init))
        if res2.ok or res2.kkt_residual < res.kkt_residual:
            return res2
    return res
