"""Feasibility recovery: project a relaxed contingency solution onto the exact coupling set.

The drop-control response is crushed by classifying generators into saturated
and responding sets; voltage regulation by classifying each controlled bus by
how saturated its reactive output is.  The resulting edits are applied to a
restricted canvas that is then re-solved.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import ipm
from .grid import Network, apply_contingency
from .models import (CaseModel, OperatingPoint, build_restricted_canvas, copy_base_point,
                     complete_slacks, point_penalty)

logger = logging.getLogger(__name__)

BISECT_TOL = 1e-10
DEFAULT_EPS_Q = 0.05
FEAS_TOL = 1e-9


class DomainError(ValueError):
    """The requested production change is outside what the responders can deliver."""


# ----------------------------------------------------------------------------
# response function


def response_curve(delta, p_base, p_min, p_max, drop):
    """Total production change ``Σ clip(p0 + A δ, P̲, P̄) - p0`` for scalar ``delta``."""
    return float(np.sum(np.clip(p_base + drop * delta, p_min, p_max) - p_base))


def delta_response(x, p_base, p_min, p_max, drop, tol: float = BISECT_TOL, strict: bool = True) -> float:
    """Drop signal that changes total responding production by ``x``.

    Arrays describe the responding generators only.  The response curve is
    monotone nondecreasing; the root is found by bisection over the interval
    between the outermost saturation breakpoints.  With ``strict=False`` an
    ``x`` on or outside the attainable range maps to the matching endpoint.
    """
    p_base, p_min, p_max, drop = (np.asarray(a, dtype=float) for a in (p_base, p_min, p_max, drop))
    if len(drop) == 0 or np.any(drop <= 0):
        raise ValueError("responding generators need positive drop constants")
    lo = min(float(np.min((p_min - p_base) / drop)), 0.0)
    hi = max(float(np.max((p_max - p_base) / drop)), 0.0)
    x_lo, x_hi = float(np.sum(p_min - p_base)), float(np.sum(p_max - p_base))
    if not x_lo < x < x_hi:
        if strict or not np.isfinite(x):
            raise DomainError(f"production change {x} outside ({x_lo}, {x_hi})")
        return hi if x >= x_hi else lo
    if x == 0.0:
        return 0.0

    # the root is unique for x != 0 inside the range; bisect on the side of its sign
    a, b = (0.0, hi) if x > 0 else (lo, 0.0)
    for _ in range(400):
        mid = 0.5 * (a + b)
        fm = response_curve(mid, p_base, p_min, p_max, drop) - x
        if abs(fm) <= tol or b - a <= 4 * np.finfo(float).eps * max(1.0, abs(mid)):
            return mid
        if fm < 0:
            a = mid
        else:
            b = mid
    return 0.5 * (a + b)


# ----------------------------------------------------------------------------
# crushing plans


@dataclass
class DropPlan:
    delta_hat: float
    p_hat: np.ndarray  # over all generators, NaN when inactive
    saturated: list  # [(gen index, fixed value)]
    responding: list  # gen indices tied to p0 + A δ
    d_lo: float
    d_hi: float
    fix_delta: bool = False


@dataclass
class VregPlan:
    eta: dict  # bus index -> saturation level (nan when the bus has no reactive range)
    decision: dict  # bus index -> "lower" | "upper" | "mid"


@dataclass
class CrushPlan:
    drop: DropPlan
    vreg: VregPlan
    notes: list = field(default_factory=list)


def _movable(net: Network, topo):
    pmin, pmax = net.gen_array("p_min"), net.gen_array("p_max")
    a = net.gen_array("drop_const")
    gens = topo.gens
    return gens[(a[gens] > 0) & (pmax[gens] > pmin[gens])]


def crush_drop(net: Network, topo, p_base, p_approx) -> DropPlan:
    """Classify active generators into saturated / responding around the crushed signal."""
    if isinstance(topo, str) or topo is None:
        topo = apply_contingency(net, topo)
    p_base = np.asarray(p_base, dtype=float)
    movable = _movable(net, topo)
    if len(movable) == 0:
        return drop_partition(net, topo, p_base, 0.0)
    pmin, pmax = net.gen_array("p_min"), net.gen_array("p_max")
    a = net.gen_array("drop_const")
    x = float(np.sum(np.asarray(p_approx, dtype=float)[movable] - p_base[movable]))
    dhat = delta_response(x, p_base[movable], pmin[movable], pmax[movable], a[movable], strict=False)
    return drop_partition(net, topo, p_base, dhat)


def drop_partition(net: Network, topo, p_base, dhat: float) -> DropPlan:
    """Saturated / responding split and signal window for drop signal ``dhat``."""
    p_base = np.asarray(p_base, dtype=float)
    pmin, pmax = net.gen_array("p_min"), net.gen_array("p_max")
    a = net.gen_array("drop_const")
    gens = topo.gens
    # generators that cannot move (no droop or no range) keep their value
    movable = _movable(net, topo)
    frozen = np.setdiff1d(gens, movable)
    p_hat = np.full(net.n_gen, np.nan)
    p_hat[frozen] = np.clip(p_base[frozen], pmin[frozen], pmax[frozen])
    saturated = [(int(g), float(p_hat[g])) for g in frozen]
    if len(movable) == 0:
        return DropPlan(0.0, p_hat, saturated, [], 0.0, 0.0, fix_delta=True)

    pb, lo_b, hi_b, am = p_base[movable], pmin[movable], pmax[movable], a[movable]
    d_min = min(float(np.min((lo_b - pb) / am)), 0.0)
    d_max = max(float(np.max((hi_b - pb) / am)), 0.0)
    p_hat[movable] = np.clip(pb + am * dhat, lo_b, hi_b)
    up_bp = (hi_b - pb) / am
    dn_bp = (lo_b - pb) / am
    if dhat >= 0:
        sat = up_bp <= dhat
        value = hi_b
        d_lo = float(np.max(up_bp[sat])) if sat.any() else d_min
        d_hi = float(np.min(up_bp[~sat])) if (~sat).any() else d_max
    else:
        sat = dn_bp >= dhat
        value = lo_b
        d_hi = float(np.min(dn_bp[sat])) if sat.any() else d_max
        d_lo = float(np.max(dn_bp[~sat])) if (~sat).any() else d_min
    saturated += [(int(g), float(v)) for g, v in zip(movable[sat], value[sat])]
    p_hat[movable[sat]] = value[sat]
    responding = [int(g) for g in movable[~sat]]
    d_lo, d_hi = min(d_lo, dhat), max(d_hi, dhat)
    return DropPlan(dhat, p_hat, saturated, responding, d_lo, d_hi, fix_delta=not responding)


def crush_vreg(net: Network, topo, q_approx, eps_q: float = DEFAULT_EPS_Q) -> VregPlan:
    """Classify every controlled bus by the normalized position of its reactive output."""
    if not 0 < eps_q < 0.5:
        raise ValueError("eps_q must lie in (0, 0.5)")
    if isinstance(topo, str) or topo is None:
        topo = apply_contingency(net, topo)
    q_approx = np.asarray(q_approx, dtype=float)
    qmin, qmax = net.gen_array("q_min"), net.gen_array("q_max")
    gens = topo.gens
    gbus = net.gen_bus[gens]
    eta, decision = {}, {}
    for n in np.unique(gbus):
        at = gens[gbus == n]
        width = float(np.sum(qmax[at] - qmin[at]))
        if width <= 0:
            eta[int(n)] = float("nan")
            decision[int(n)] = "mid"
            continue
        e = float(np.sum(q_approx[at] - qmin[at])) / width
        eta[int(n)] = e
        decision[int(n)] = "lower" if e < eps_q else ("upper" if e > 1 - eps_q else "mid")
    return VregPlan(eta, decision)


def apply_plan(canvas: CaseModel, plan: CrushPlan, base: OperatingPoint) -> None:
    """Apply the crushing edits to a restricted canvas."""
    net = canvas.net
    drop = plan.drop
    for g, val in drop.saturated:
        canvas.fix("p", g, val)
    canvas.add_response_constraints(drop.responding, base.p)
    idelta = canvas.var("delta", 0)
    if canvas.space.lb[idelta] < canvas.space.ub[idelta]:
        if drop.fix_delta:
            canvas.fix("delta", 0, drop.delta_hat)
        else:
            canvas.set_bounds("delta", 0, drop.d_lo, drop.d_hi)

    qmin, qmax = net.gen_array("q_min"), net.gen_array("q_max")
    gens = canvas.gens
    gbus = net.gen_bus[gens]
    vmin, vmax = canvas.topo.v_min, canvas.topo.v_max
    for n, dec in plan.vreg.decision.items():
        at = gens[gbus == n]
        v0 = float(base.v[n])
        if dec == "lower":
            canvas.fix("q", at, qmin[at])
            canvas.set_bounds("v", n, v0, vmax[n])
        elif dec == "upper":
            canvas.fix("q", at, qmax[at])
            canvas.set_bounds("v", n, vmin[n], v0)
        else:
            canvas.fix("v", n, v0)


def crushed_start(canvas: CaseModel, plan: CrushPlan, base: OperatingPoint) -> np.ndarray:
    """Copy-base point with crushed injections; satisfies every canvas constraint."""
    p = np.where(np.isfinite(plan.drop.p_hat), plan.drop.p_hat, base.p)
    x = copy_base_point(canvas, base, p=p, delta=plan.drop.delta_hat)
    sp = canvas.space
    x = np.clip(x, sp.lb, sp.ub)
    canvas.fill_flows(x)
    return complete_slacks(canvas, x)


def max_violation(model: CaseModel, x) -> float:
    """Largest bound or constraint violation of ``x`` in ``model``."""
    sp, prob = model.space, model.problem
    viol = max(float(np.max(sp.lb - x, initial=0.0)), float(np.max(x - sp.ub, initial=0.0)))
    if prob.m:
        c = prob.constraints(x)
        with np.errstate(invalid="ignore"):
            viol = max(viol, float(np.max(np.maximum(prob.c_lb - c, c - prob.c_ub), initial=0.0)))
    return viol


def build_crush_plan(net, k, base: OperatingPoint, approx: OperatingPoint, eps_q: float = DEFAULT_EPS_Q) -> CrushPlan:
    topo = apply_contingency(net, k)
    return CrushPlan(crush_drop(net, topo, base.p, approx.p), crush_vreg(net, topo, approx.q, eps_q))


# ----------------------------------------------------------------------------
# recovery


def coupling_slacks(net: Network, topo, base: OperatingPoint, pt: OperatingPoint) -> None:
    """Fill ``rho_*``, ``nu_*`` of ``pt`` from its injections, voltages and ``delta``."""
    a = net.gen_array("drop_const")
    gens = topo.gens
    d = 0.0 if pt.delta is None else pt.delta
    gap = np.full(net.n_gen, np.nan)
    gap[gens] = base.p[gens] + a[gens] * d - pt.p[gens]
    pt.rho_plus = np.where(np.isnan(gap), np.nan, np.maximum(gap, 0.0))
    pt.rho_minus = np.where(np.isnan(gap), np.nan, np.maximum(-gap, 0.0))
    ctrl = np.unique(net.gen_bus[gens])
    dv = np.full(net.n_bus, np.nan)
    dv[ctrl] = pt.v[ctrl] - base.v[ctrl]
    pt.nu_plus = np.where(np.isnan(dv), np.nan, np.maximum(dv, 0.0))
    pt.nu_minus = np.where(np.isnan(dv), np.nan, np.maximum(-dv, 0.0))


def complementarity_residuals(net: Network, base: OperatingPoint, pt: OperatingPoint) -> dict:
    """Max of ``min(a, b)`` over each of the four complementarity families, plus coupling residuals."""
    topo = apply_contingency(net, pt.case)
    gens = topo.gens
    pmin, pmax = net.gen_array("p_min")[gens], net.gen_array("p_max")[gens]
    qmin, qmax = net.gen_array("q_min")[gens], net.gen_array("q_max")[gens]
    p, q = pt.p[gens], pt.q[gens]
    gb = net.gen_bus[gens]
    a = net.gen_array("drop_const")[gens]

    def worst(x, y):
        return float(np.max(np.abs(np.minimum(x, y)), initial=0.0))

    d = 0.0 if pt.delta is None else pt.delta
    return {
        "drop_up": worst(pt.rho_plus[gens], pmax - p),
        "drop_down": worst(pt.rho_minus[gens], p - pmin),
        "vreg_up": worst(pt.nu_minus[gb], qmax - q),
        "vreg_down": worst(pt.nu_plus[gb], q - qmin),
        "drop_coupling": float(np.max(np.abs(p + pt.rho_plus[gens] - pt.rho_minus[gens]
                                            - base.p[gens] - a * d), initial=0.0)),
        "voltage_coupling": float(np.max(np.abs(pt.nu_plus[gb] - pt.nu_minus[gb]
                                               - pt.v[gb] + base.v[gb]), initial=0.0)),
    }


def refine_plan(net: Network, topo, base: OperatingPoint, plan: CrushPlan, pt: OperatingPoint,
                tol: float = 1e-6) -> CrushPlan | None:
    """Move classifications across the edges a restricted solution ended on.

    A voltage window edge at the base voltage means the bus wants to hold its
    voltage (saturated -> mid); a pooled reactive output at a limit means a
    mid bus wants to let go of its voltage (mid -> saturated).  A drop signal
    on an edge of its effective window re-partitions the generators just past
    that breakpoint.  Returns None when nothing moves.
    """
    qmin, qmax = net.gen_array("q_min"), net.gen_array("q_max")
    pmin, pmax = net.gen_array("p_min"), net.gen_array("p_max")
    a = net.gen_array("drop_const")
    gens = topo.gens
    gbus = net.gen_bus[gens]
    notes = []

    decision = dict(plan.vreg.decision)
    for n, dec in plan.vreg.decision.items():
        if np.isnan(plan.vreg.eta[n]):
            continue
        at = gens[gbus == n]
        v0, v = float(base.v[n]), float(pt.v[n])
        q = float(np.sum(pt.q[at]))
        if dec == "upper" and v >= v0 - tol:
            decision[n] = "mid"
        elif dec == "lower" and v <= v0 + tol:
            decision[n] = "mid"
        elif dec == "mid" and q >= float(np.sum(qmax[at])) - tol:
            decision[n] = "upper"
        elif dec == "mid" and q <= float(np.sum(qmin[at])) + tol:
            decision[n] = "lower"
        if decision[n] != dec:
            notes.append(f"bus {n}: {dec} -> {decision[n]}")

    drop = plan.drop
    if not drop.fix_delta and pt.delta is not None:
        resp = np.asarray(drop.responding)
        pb = base.p[resp]
        eff_hi = min(drop.d_hi, float(np.min((pmax[resp] - pb) / a[resp])))
        eff_lo = max(drop.d_lo, float(np.max((pmin[resp] - pb) / a[resp])))
        target = None
        if eff_hi - pt.delta <= tol:
            target = eff_hi if eff_hi >= 0 else float(np.nextafter(eff_hi, np.inf))
        elif pt.delta - eff_lo <= tol:
            target = eff_lo if eff_lo < 0 else float(np.nextafter(eff_lo, -np.inf))
        if target is not None:
            moved = drop_partition(net, topo, base.p, target)
            if sorted(moved.responding) != sorted(drop.responding):
                notes.append(f"drop signal {pt.delta:.6g} on window edge; re-partitioned at {target:.6g}")
                drop = moved

    if not notes:
        return None
    return CrushPlan(drop, VregPlan(plan.vreg.eta, decision), plan.notes + notes)


def _plan_key(plan: CrushPlan):
    return (tuple(sorted(plan.drop.responding)), tuple(sorted(plan.vreg.decision.items())))


@dataclass
class Recovery:
    point: OperatingPoint
    penalty: float  # quadratic penalty, comparable with the relaxed subproblem
    penalty_exact: float  # two-bin piecewise penalty
    status: str
    fallback: bool
    plan: CrushPlan
    max_violation: float
    result: ipm.IpmResult | None = None
    rounds: int = 1  # restricted solves performed


def _solve_plan(net, k, base, start_pt, plan, opts, reg) -> Recovery:
    canvas = build_restricted_canvas(net, k, base, reg=reg)
    apply_plan(canvas, plan, base)
    x_safe = crushed_start(canvas, plan, base)
    viol = max_violation(canvas, x_safe)
    if viol > FEAS_TOL:
        raise AssertionError(f"crushed copy-base point infeasible for {canvas.topo.case_id}: {viol:.3e}")

    start = canvas.x_from_point(start_pt, fill=x_safe)
    if "delta" in canvas.space and start_pt.delta is not None:
        start[canvas.var("delta", 0)] = plan.drop.delta_hat
    start = np.clip(start, canvas.space.lb, canvas.space.ub)
    res = ipm.solve_with_retry(canvas.problem, start, opts)
    fallback = not res.ok
    if fallback:
        logger.warning("recovery for %s failed (%s); using copy-base point", canvas.topo.case_id, res.status)
        x = x_safe
    else:
        x = res.x
    pt = canvas.point(x)
    coupling_slacks(net, canvas.topo, base, pt)
    pen_q = canvas.penalty(x)
    pen_pw = point_penalty(net, pt, "piecewise")["total"]
    pt.meta.update({"recovered": True, "fallback": fallback, "status": res.status,
                    "penalty_quadratic": pen_q, "penalty_piecewise": pen_pw})
    return Recovery(pt, pen_q, pen_pw, res.status, fallback, plan, max_violation(canvas, x), res)


def recover_feasible(net: Network, k, base: OperatingPoint, approx: OperatingPoint,
                     eps_q: float = DEFAULT_EPS_Q, opts: ipm.IpmOptions | None = None,
                     reg: float = 1e-6, refine: int = 3) -> Recovery:
    """Crush ``approx`` onto the exact coupling set of case ``k`` and re-solve.

    Up to ``refine`` further restricted solves follow when the solution ends on
    an edge of its classification (see :func:`refine_plan`); the lowest-penalty
    exact point is returned.
    """
    opts = opts or ipm.IpmOptions()
    topo = apply_contingency(net, k)
    plan = build_crush_plan(net, k, base, approx, eps_q)
    best = _solve_plan(net, k, base, approx, plan, opts, reg)
    seen = {_plan_key(plan)}
    last, rounds = best, 1
    for _ in range(refine):
        if last.fallback:
            break
        nxt = refine_plan(net, topo, base, last.plan, last.point)
        if nxt is None or _plan_key(nxt) in seen:
            break
        seen.add(_plan_key(nxt))
        last = _solve_plan(net, k, base, last.point, nxt, opts, reg)
        rounds += 1
        if not last.fallback and (best.fallback or last.penalty < best.penalty):
            best = last
    best.rounds = rounds
    best.point.meta["rounds"] = rounds
    return best
