"""Two-stage decomposition: pre-screening, fourth-power recourse surrogates, block-incremental loop.

The master problem carries one surrogate ``P_k (p² + q²)²`` per contingency on
the injection coupled to the failing element.  Each contingency evaluation
refits ``P_k`` so that the surrogate reproduces the observed penalty at the
current base point.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import ipm
from .grid import GENERATOR, Network
from .models import (OperatingPoint, build_base_problem, build_contingency_problem, copy_base_point,
                     score_solution, set_surrogates)
from .recovery import DEFAULT_EPS_Q, recover_feasible

logger = logging.getLogger(__name__)

ZERO_INJECTION = 1e-12


# ----------------------------------------------------------------------------
# surrogates


@dataclass(frozen=True)
class RecourseSurrogate:
    contingency: str
    kind: str  # "generator" | "branch"
    element: int  # network index of the failing generator or branch
    coef: float = 0.0
    terminal: str = "o"  # branch terminal carrying the surrogate ("o" | "d")
    flagged: bool = False  # refit hit a zero injection

    def __post_init__(self):
        if self.coef < 0 or not math.isfinite(self.coef):
            raise ValueError(f"surrogate {self.contingency}: coefficient must be finite and >= 0")
        if self.terminal not in ("o", "d"):
            raise ValueError(f"surrogate {self.contingency}: terminal must be 'o' or 'd'")


def initial_surrogates(net: Network) -> dict[str, RecourseSurrogate]:
    out = {}
    for k in net.contingencies:
        el = net.gen_index[k.element] if k.kind == GENERATOR else net.branch_index[k.element]
        out[k.id] = RecourseSurrogate(k.id, k.kind, el)
    return out


def coupling_injection(s: RecourseSurrogate, base: OperatingPoint, terminal: str | None = None):
    """``(p, q)`` of the element a surrogate is attached to."""
    if s.kind == GENERATOR:
        return float(base.p[s.element]), float(base.q[s.element])
    t = terminal or s.terminal
    return float(getattr(base, f"pf_{t}")[s.element]), float(getattr(base, f"qf_{t}")[s.element])


def surrogate_at(s: RecourseSurrogate, p: float, q: float) -> float:
    a = p * p + q * q
    return s.coef * a * a


def surrogate_value(s: RecourseSurrogate, base: OperatingPoint) -> float:
    return surrogate_at(s, *coupling_injection(s, base))


def surrogate_gradient(s: RecourseSurrogate, base: OperatingPoint) -> tuple[float, float]:
    """Derivative of the surrogate with respect to its ``(p, q)`` pair."""
    p, q = coupling_injection(s, base)
    t = 4.0 * s.coef * (p * p + q * q)
    return t * p, t * q


def update_surrogate(s: RecourseSurrogate, r_k: float, base: OperatingPoint) -> RecourseSurrogate:
    """Refit ``P_k`` so the surrogate equals ``r_k`` at ``base`` (and 0 at zero injection)."""
    if not r_k >= 0 or not math.isfinite(r_k):
        raise ValueError(f"recourse value must be finite and >= 0, got {r_k}")
    terminal = s.terminal
    if s.kind != GENERATOR:
        so = np.hypot(*coupling_injection(s, base, "o"))
        sd = np.hypot(*coupling_injection(s, base, "d"))
        terminal = "d" if sd > so else "o"
    p, q = coupling_injection(s, base, terminal)
    a2 = (p * p + q * q) ** 2
    if a2 < ZERO_INJECTION:
        if r_k > 0:
            logger.warning("surrogate %s: zero coupling injection with r_k=%.3g; coefficient set to 0",
                           s.contingency, r_k)
        return replace(s, coef=0.0, terminal=terminal, flagged=r_k > 0)
    return replace(s, coef=r_k / a2, terminal=terminal, flagged=False)


# ----------------------------------------------------------------------------
# pre-screening


def prescreen(net: Network, s_gen: int, s_branch: int) -> list[str]:
    """Contingency ids, largest failing capacities first.

    The top ``s_gen`` generator and top ``s_branch`` branch outages come first
    (generators before branches), then every remaining contingency in capacity
    order.
    """
    if s_gen < 0 or s_branch < 0:
        raise ValueError("prescreen counts must be >= 0")
    order = {k.id: i for i, k in enumerate(net.contingencies)}
    gens, branches = [], []
    for k in net.contingencies:
        if k.kind == GENERATOR:
            g = net.generators[net.gen_index[k.element]]
            gens.append(((-g.p_max, -(g.q_max - g.q_min), order[k.id]), k.id))
        else:
            e = net.branches[net.branch_index[k.element]]
            branches.append(((-e.rate_base, order[k.id]), k.id))
    gens = [cid for _, cid in sorted(gens)]
    branches = [cid for _, cid in sorted(branches)]
    head = gens[:s_gen] + branches[:s_branch]
    rest = gens[s_gen:] + branches[s_branch:]
    return head + rest


# ----------------------------------------------------------------------------
# state and loop


@dataclass
class DecompParams:
    passes: int = 20  # T, maximum master solves
    eps_r: float = 1e-2  # penalty threshold for convergence / rescheduling
    prescreen_gen: int = 0
    prescreen_branch: int = 0
    epsilon: float = 1e-4  # complementarity relaxation
    eps_q: float = DEFAULT_EPS_Q
    block_size: int = 1
    ipm: ipm.IpmOptions = field(default_factory=ipm.IpmOptions)
    contingency_warm_start: str = "primal"  # "primal" from the base point, or "cold"
    time_budget: float | None = None

    def __post_init__(self):
        if self.passes < 1:
            raise ValueError("passes must be >= 1")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.epsilon < 0 or self.eps_r < 0:
            raise ValueError("tolerances must be >= 0")


@dataclass
class Evaluation:
    """Outcome of one relaxed contingency solve against base snapshot ``snapshot``."""

    contingency: str
    snapshot: int
    r: float
    status: str
    point: OperatingPoint | None
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status in (ipm.OPTIMAL, ipm.ACCEPTABLE)


@dataclass
class UpdateRecord:
    contingency: str
    snapshot: int
    r: float
    coef: float
    value_at_point: float
    value_at_zero: float
    flagged: bool


@dataclass
class DecompState:
    base: OperatingPoint | None
    surrogates: dict
    r: dict  # latest penalty per contingency
    evaluated_at: dict  # contingency -> iteration of latest evaluation
    iteration: int = 0
    snapshot: int = -1
    master_status: str = ""
    master_failed: bool = False
    history: list = field(default_factory=list)
    updates: list = field(default_factory=list)
    converged: bool = False

    def surrogate_table(self) -> dict:
        return {cid: {"coef": s.coef, "terminal": s.terminal if s.kind != GENERATOR else None,
                      "flagged": s.flagged} for cid, s in self.surrogates.items()}


class Decomposition:
    """Callbacks of the block-incremental loop; also usable as a sequential solver."""

    def __init__(self, net: Network, params: DecompParams | None = None):
        self.net = net
        self.params = params or DecompParams()
        self.order = prescreen(net, self.params.prescreen_gen, self.params.prescreen_branch)
        self.master = build_base_problem(net)
        self.state = DecompState(None, initial_surrogates(net), {}, {})
        self.snapshots: dict[int, OperatingPoint] = {}
        self._last_master: ipm.IpmResult | None = None
        self.master_seconds = 0.0
        self.master_eval_seconds = 0.0

    # -- master

    def solve_master(self, surrogates: dict | None = None) -> int:
        """Solve the master with the given (default: current) surrogates; returns the new snapshot id."""
        return self.publish(self.master_solve(self.state.surrogates if surrogates is None else surrogates))

    def master_solve(self, table: dict) -> ipm.IpmResult:
        """Solver-side step: re-solve the master problem, warm-started from the previous solve."""
        set_surrogates(self.master, table.values())
        prob = self.master.problem
        opts = self.params.ipm
        if self._last_master is None:
            start = self.master.initial_x()
        else:
            start = ipm.warm_start_from(self._last_master, "primal-dual", prob)
            opts = replace(opts, warm_start_mode="primal-dual")
        res = ipm.solve_with_retry(prob, start, opts)
        self.master_seconds += res.solve_seconds
        self.master_eval_seconds += res.eval_seconds
        if not res.ok:
            logger.warning("master solve ended with status %s", res.status)
        if res.ok or self._last_master is None:
            self._last_master = res
        return res

    def publish(self, res: ipm.IpmResult) -> int:
        """Master-side step: record a master solution as the next base snapshot."""
        st = self.state
        st.snapshot += 1
        st.master_status = res.status
        st.master_failed = not res.ok
        st.base = self.master.point(res.x)
        self.snapshots[st.snapshot] = st.base
        st.history.append({"snapshot": st.snapshot, "status": res.status, "objective": res.obj,
                           "iterations": res.iterations, "seconds": res.solve_seconds})
        return st.snapshot

    # -- contingencies

    def select_block(self, size: int | None = None) -> list[str]:
        """Unevaluated contingencies in screening order, then high penalties first.

        Contingencies whose surrogate was flagged at a zero injection are
        rescheduled every pass.
        """
        size = size or self.params.block_size
        st = self.state
        fresh = [cid for cid in self.order if cid not in st.r]
        again = sorted((cid for cid in self.order
                        if st.r.get(cid, -1.0) >= self.params.eps_r or st.surrogates[cid].flagged),
                       key=lambda c: (-st.r[c], self.order.index(c)))
        return (fresh + again)[:size]

    def pass_schedule(self) -> list[str]:
        """Every contingency that a full pass would evaluate."""
        return self.select_block(len(self.order))

    def evaluate(self, cid: str, snapshot: int, base: OperatingPoint | None = None) -> Evaluation:
        """Relaxed subproblem of ``cid`` at base snapshot ``snapshot``.  Pure with respect to state."""
        if base is None:
            base = self.snapshots[snapshot]
        return evaluate_contingency(self.net, cid, base, self.params, snapshot)

    def apply(self, ev: Evaluation) -> bool:
        """Record a reply and refit its surrogate; True when the penalty is high."""
        st = self.state
        base = self.snapshots[ev.snapshot]
        s = update_surrogate(st.surrogates[ev.contingency], ev.r, base)
        st.surrogates[ev.contingency] = s
        st.r[ev.contingency] = ev.r
        st.evaluated_at[ev.contingency] = st.iteration
        st.updates.append(UpdateRecord(ev.contingency, ev.snapshot, ev.r, s.coef,
                                       surrogate_value(s, base), surrogate_at(s, 0.0, 0.0), s.flagged))
        return ev.r >= self.params.eps_r

    def finished(self) -> bool:
        st = self.state
        done = len(st.r) == len(self.order) and all(r < self.params.eps_r for r in st.r.values())
        st.converged = done
        return done

    # -- sequential loop

    def run(self) -> DecompState:
        """Block-incremental loop, one block per master solve."""
        p = self.params
        t0 = time.perf_counter()
        for t in range(1, p.passes + 1):
            self.state.iteration = t
            snap = self.solve_master()
            for cid in self.select_block():
                self.apply(self.evaluate(cid, snap))
            if self.finished():
                break
            if p.time_budget is not None and time.perf_counter() - t0 > p.time_budget:
                logger.warning("time budget exhausted after %d master solves", t)
                break
        return self.state


def evaluate_contingency(net: Network, cid: str, base: OperatingPoint, params: DecompParams,
                         snapshot: int = 0) -> Evaluation:
    """Solve the relaxed subproblem of ``cid`` around ``base``; r is its quadratic penalty."""
    t0 = time.perf_counter()
    model = build_contingency_problem(net, cid, base, params.epsilon)
    if params.contingency_warm_start == "primal":
        x0, opts = model.x_from_point(base), replace(params.ipm, warm_start_mode="primal")
    else:
        x0, opts = model.initial_x(), params.ipm
    res = ipm.solve_with_retry(model.problem, x0, opts)
    if res.ok:
        x = res.x
    else:
        # the copy-base point is feasible, so its penalty bounds the recourse
        logger.warning("contingency %s: relaxed solve %s; using copy-base penalty", cid, res.status)
        x = copy_base_point(model, base)
    r = max(model.penalty(x), 0.0)
    pt = model.point(x)
    pt.meta.update({"status": res.status, "snapshot": snapshot, "penalty_quadratic": r})
    return Evaluation(cid, snapshot, r, res.status, pt, time.perf_counter() - t0)


def solve_scacopf(net: Network, params: DecompParams | None = None) -> DecompState:
    """Sequential block-incremental solve; see :mod:`scacopf.engine` for the parallel engine."""
    return Decomposition(net, params).run()


# ----------------------------------------------------------------------------
# final report


def full_report(net: Network, state: DecompState, recover: bool = True,
                params: DecompParams | None = None) -> dict:
    """Relaxed and (optionally) recovered contingency solutions at the final base point, scored."""
    params = params or DecompParams()
    base = state.base
    relaxed, recovered, flags = {}, {}, []
    t0 = time.perf_counter()
    for k in net.contingencies:
        ev = evaluate_contingency(net, k.id, base, params)
        relaxed[k.id] = ev
        if not ev.ok:
            flags.append(f"{k.id}: relaxed solve {ev.status}")
        if recover:
            rec = recover_feasible(net, k.id, base, ev.point, params.eps_q, params.ipm)
            rec.point.meta["penalty_relaxed"] = ev.r
            recovered[k.id] = rec
            if rec.fallback:
                flags.append(f"{k.id}: recovery fell back to the copy-base point")
    points = {cid: rec.point for cid, rec in recovered.items()} if recover else \
        {cid: ev.point for cid, ev in relaxed.items()}
    if state.master_failed:
        flags.append(f"master: final solve {state.master_status}")
    return {
        "base": base,
        "contingencies": points,
        "score": score_solution(net, base, points, "piecewise"),
        "score_quadratic": score_solution(net, base, points, "quadratic"),
        "relaxed_penalty": {cid: ev.r for cid, ev in relaxed.items()},
        "recovered_penalty": {cid: rec.penalty for cid, rec in recovered.items()},
        "surrogates": state.surrogate_table(),
        "iterations": state.iteration,
        "converged": state.converged,
        "flags": flags,
        "report_seconds": time.perf_counter() - t0,
    }
