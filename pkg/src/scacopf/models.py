"""Concrete NLP instances: master/base problem, relaxed contingency subproblem, restricted canvas.

Every model is an :class:`~scacopf.nlp.NlpProblem` wrapped in a :class:`CaseModel`
that knows the variable layout and converts between solver vectors and
:class:`OperatingPoint` records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterable, Mapping

import numpy as np

from .blocks import (BranchFlowBlock, FourthPowerSurrogate, LinearBlock, ProductCapBlock,
                     SeparableQuadratic, ThermalBlock)
from .grid import (GENERATOR, CaseTopology, Network, PenaltyCurve, apply_contingency,
                   delta_bounds)
from .nlp import NlpProblem

DEFAULT_EPSILON = 1e-4
DEFAULT_REG = 1e-6
SLACK_INIT = 1e-4
# drop-signal reach (A·|Δ|, per-unit power) below which a relaxation cap counts as zero
MIN_SIGNAL_REACH = 1e-6

BASE, CONTINGENCY, CANVAS = "base", "contingency", "canvas"


class UnknownVariableError(KeyError):
    """A canvas mutation referenced a variable the case does not have."""


# ----------------------------------------------------------------------------
# penalties and flows


@dataclass(frozen=True)
class QuadPenalty:
    """Smooth stand-in ``a1 x + a2 x²`` for a two-bin penalty curve."""

    a1: float
    a2: float

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.a1 * x + self.a2 * x * x

    def slope(self, x):
        return self.a1 + 2.0 * self.a2 * np.asarray(x, dtype=float)


def quad_penalty_fit(curve: PenaltyCurve) -> QuadPenalty:
    """Match the curve's slope at 0 and at the end of its first bin."""
    return QuadPenalty(curve.slope1, (curve.slope2 - curve.slope1) / (2.0 * curve.bin1_width))


def branch_flow(v_o, v_d, th_o, th_d, g, b, b_charge=0.0):
    """π-model flows ``(p_o, q_o, p_d, q_d)``; vectorized over branches."""
    v_o, v_d = np.asarray(v_o, dtype=float), np.asarray(v_d, dtype=float)
    d = np.asarray(th_o, dtype=float) - np.asarray(th_d, dtype=float)
    c, s = np.cos(d), np.sin(d)
    vv = v_o * v_d
    ash = -(b + 0.5 * b_charge)
    p_o = g * v_o**2 - vv * (g * c + b * s)
    q_o = ash * v_o**2 + vv * (b * c - g * s)
    p_d = g * v_d**2 - vv * (g * c - b * s)
    q_d = ash * v_d**2 + vv * (b * c + g * s)
    return p_o, q_o, p_d, q_d


# ----------------------------------------------------------------------------
# operating points

_BUS_FIELDS = ("v", "theta", "sp_plus", "sp_minus", "sq_plus", "sq_minus", "nu_plus", "nu_minus")
_GEN_FIELDS = ("p", "q", "rho_plus", "rho_minus")
_BRANCH_FIELDS = ("pf_o", "qf_o", "pf_d", "qf_d", "sigma_o", "sigma_d")


@dataclass
class OperatingPoint:
    """Solution of one case over the full element lists.

    Entries of out-of-service elements are NaN.  ``rho_*``, ``nu_*`` and
    ``delta`` are ``None`` for the base case.
    """

    case: str
    v: np.ndarray
    theta: np.ndarray
    p: np.ndarray
    q: np.ndarray
    pf_o: np.ndarray
    qf_o: np.ndarray
    pf_d: np.ndarray
    qf_d: np.ndarray
    sigma_o: np.ndarray
    sigma_d: np.ndarray
    sp_plus: np.ndarray
    sp_minus: np.ndarray
    sq_plus: np.ndarray
    sq_minus: np.ndarray
    rho_plus: np.ndarray | None = None
    rho_minus: np.ndarray | None = None
    nu_plus: np.ndarray | None = None
    nu_minus: np.ndarray | None = None
    delta: float | None = None
    meta: dict = field(default_factory=dict)

    def copy(self) -> "OperatingPoint":
        kw = {}
        for f in fields(self):
            val = getattr(self, f.name)
            kw[f.name] = val.copy() if isinstance(val, (np.ndarray, dict)) else val
        return OperatingPoint(**kw)

    def to_dict(self) -> dict:
        def enc(a):
            return [None if not math.isfinite(x) else float(x) for x in a]

        out = {"case": self.case}
        for name in _BUS_FIELDS + _GEN_FIELDS + _BRANCH_FIELDS:
            val = getattr(self, name)
            if val is not None:
                out[name] = enc(val)
        if self.delta is not None:
            out["delta"] = float(self.delta)
        if self.meta:
            out["meta"] = dict(self.meta)
        return out

    @classmethod
    def from_dict(cls, doc: Mapping) -> "OperatingPoint":
        def dec(a):
            return None if a is None else np.array([np.nan if x is None else x for x in a], dtype=float)

        kw = {name: dec(doc.get(name)) for name in _BUS_FIELDS + _GEN_FIELDS + _BRANCH_FIELDS}
        delta = doc.get("delta")
        return cls(case=str(doc["case"]), delta=None if delta is None else float(delta),
                   meta=dict(doc.get("meta", {})), **kw)

    def check_shape(self, net: Network) -> None:
        sizes = {**{f: net.n_bus for f in _BUS_FIELDS}, **{f: net.n_gen for f in _GEN_FIELDS},
                 **{f: net.n_branch for f in _BRANCH_FIELDS}}
        for name, n in sizes.items():
            val = getattr(self, name)
            if val is not None and val.shape != (n,):
                raise ValueError(f"point {self.case}: {name} has shape {val.shape}, expected ({n},)")


# ----------------------------------------------------------------------------
# model wrapper


class CaseModel:
    """An NlpProblem for one case plus its variable layout."""

    def __init__(self, net: Network, topo: CaseTopology, kind: str):
        self.net = net
        self.topo = topo
        self.kind = kind
        self.problem = NlpProblem()
        self.gens = topo.gens
        self.branches = topo.branches
        self.ctrl_buses = np.unique(net.gen_bus[self.gens])
        self.penalty_blocks: list[SeparableQuadratic] = []
        self.cost_block: SeparableQuadratic | None = None
        self.reg_block: SeparableQuadratic | None = None
        self.surrogate_block: FourthPowerSurrogate | None = None
        self.base: OperatingPoint | None = None
        self.dbounds = None
        self.epsilon = None
        self.response_gens: list[int] = []
        self._gen_pos = _positions(net.n_gen, self.gens)
        self._branch_pos = _positions(net.n_branch, self.branches)
        self._ctrl_pos = _positions(net.n_bus, self.ctrl_buses)

    # -- layout

    @property
    def space(self):
        return self.problem.space

    def var(self, group: str, elements=None) -> np.ndarray:
        """Global indices of ``group`` at network element indices ``elements``."""
        if group not in self.space:
            raise UnknownVariableError(f"case {self.topo.case_id} has no variable group {group!r}")
        idx = self.space.index(group)
        if elements is None:
            return idx
        el = np.atleast_1d(np.asarray(elements, dtype=int))
        pos = self._local(group, el)
        if np.any(pos < 0):
            bad = el[pos < 0]
            raise UnknownVariableError(f"case {self.topo.case_id}: {group} has no element(s) {bad.tolist()}")
        return idx[pos]

    def _local(self, group, el):
        if group in _GEN_FIELDS:
            table = self._gen_pos
        elif group in _BRANCH_FIELDS:
            table = self._branch_pos
        elif group in ("nu_plus", "nu_minus"):
            table = self._ctrl_pos
        elif group == "delta":
            return np.where(el == 0, 0, -1)
        else:
            return np.where((el >= 0) & (el < self.net.n_bus), el, -1)
        out = np.full(el.shape, -1)
        ok = (el >= 0) & (el < len(table))
        out[ok] = table[el[ok]]
        return out

    def _element_count(self, group):
        if group in _GEN_FIELDS:
            return self.net.n_gen, self.gens
        if group in _BRANCH_FIELDS:
            return self.net.n_branch, self.branches
        if group in ("nu_plus", "nu_minus"):
            return self.net.n_bus, self.ctrl_buses
        return self.net.n_bus, np.arange(self.net.n_bus)

    # -- conversions

    def point(self, x) -> OperatingPoint:
        x = np.asarray(x, dtype=float)
        kw = {}
        for group in _BUS_FIELDS + _GEN_FIELDS + _BRANCH_FIELDS:
            if group not in self.space:
                kw[group] = None
                continue
            n, el = self._element_count(group)
            arr = np.full(n, np.nan)
            arr[el] = x[self.space.index(group)]
            kw[group] = arr
        delta = float(x[self.space.index("delta")][0]) if "delta" in self.space else None
        if self.kind == BASE:
            delta = None
        return OperatingPoint(case=self.topo.case_id, delta=delta, **kw)

    def x_from_point(self, pt: OperatingPoint, fill=None) -> np.ndarray:
        """Vector from ``pt``; entries missing in ``pt`` (None or NaN) come from ``fill``."""
        x = self.initial_x() if fill is None else np.array(fill, dtype=float)
        for group in _BUS_FIELDS + _GEN_FIELDS + _BRANCH_FIELDS:
            src = getattr(pt, group)
            if group not in self.space or src is None:
                continue
            _, el = self._element_count(group)
            vals = src[el]
            idx = self.space.index(group)
            ok = np.isfinite(vals)
            x[idx[ok]] = vals[ok]
        if "delta" in self.space and pt.delta is not None and math.isfinite(pt.delta):
            x[self.space.index("delta")] = pt.delta
        return x

    def initial_x(self) -> np.ndarray:
        """Cold start: bound midpoints, flat angles, consistent flows, small slacks."""
        sp = self.space
        lb, ub = sp.lb, sp.ub
        finite = np.isfinite(lb) & np.isfinite(ub)
        x = np.zeros(len(lb))
        x[finite] = 0.5 * (lb[finite] + ub[finite])
        for group in ("theta",):
            x[sp.index(group)] = 0.0
        for group in ("sigma_o", "sigma_d", "sp_plus", "sp_minus", "sq_plus", "sq_minus",
                      "rho_plus", "rho_minus", "nu_plus", "nu_minus"):
            if group in sp:
                idx = sp.index(group)
                x[idx] = np.where(lb[idx] == ub[idx], lb[idx], SLACK_INIT)
        if "delta" in sp:
            x[sp.index("delta")] = np.clip(0.0, lb[sp.index("delta")], ub[sp.index("delta")])
        self.fill_flows(x)
        return x

    def sample_interior(self, rng, spread: float = 0.1) -> np.ndarray:
        """Random point strictly inside the bounds, scattered around the cold start."""
        lb, ub = self.space.lb, self.space.ub
        x0 = self.initial_x()
        x = x0 + spread * (1.0 + np.abs(x0)) * rng.standard_normal(len(x0))
        width = np.where(np.isfinite(ub - lb), ub - lb, 0.0)
        lo = np.where(np.isfinite(lb), lb + 0.01 * width, -np.inf)
        hi = np.where(np.isfinite(ub), ub - 0.01 * width, np.inf)
        x = np.clip(x, lo, hi)
        fixed = lb == ub
        x[fixed] = lb[fixed]
        # one-sided bounds: stay a little inside
        x = np.where(np.isfinite(lb) & ~np.isfinite(ub), np.maximum(x, lb + 1e-3), x)
        return np.where(np.isfinite(ub) & ~np.isfinite(lb), np.minimum(x, ub - 1e-3), x)

    def fill_flows(self, x) -> np.ndarray:
        """Overwrite flow variables with the flows implied by ``x``'s voltages."""
        net, br = self.net, self.branches
        v, th = x[self.space.index("v")], x[self.space.index("theta")]
        fo, to = net.branch_from[br], net.branch_to[br]
        flows = branch_flow(v[fo], v[to], th[fo], th[to], net.branch_array("g_series")[br],
                            net.branch_array("b_series")[br], net.branch_array("b_charge")[br])
        for group, val in zip(("pf_o", "qf_o", "pf_d", "qf_d"), flows):
            x[self.space.index(group)] = val
        return x

    # -- objective parts

    def penalty(self, x) -> float:
        """Quadratic-penalty part of the objective (no cost, surrogate or regularization)."""
        return float(sum(b.value(x) for b in self.penalty_blocks))

    def cost(self, x) -> float:
        return 0.0 if self.cost_block is None else self.cost_block.value(x)

    # -- canvas mutation hooks

    def fix(self, group: str, elements, value) -> None:
        self.space.fix(self.var(group, elements), value)

    def set_bounds(self, group: str, elements, lb, ub) -> None:
        self.space.set_bounds(self.var(group, elements), lb, ub)

    def add_response_constraints(self, gens, p_base) -> None:
        """``p_g - A_g δ = p_base_g`` for network generator indices ``gens``."""
        gens = np.atleast_1d(np.asarray(gens, dtype=int))
        if len(gens) == 0:
            return
        ip = self.var("p", gens)
        idelta = self.var("delta", 0)
        a = self.net.gen_array("drop_const")[gens]
        k = len(gens)
        r = np.arange(k)
        blk = LinearBlock(f"response[{len(self.response_gens)}]", k,
                          np.concatenate([r, r]), np.concatenate([ip, np.repeat(idelta, k)]),
                          np.concatenate([np.ones(k), -a]),
                          np.asarray(p_base, dtype=float)[gens], np.asarray(p_base, dtype=float)[gens])
        self.problem.add_constraint(blk)
        self.response_gens.extend(gens.tolist())


def _positions(n, active):
    pos = np.full(n, -1)
    pos[active] = np.arange(len(active))
    return pos


# ----------------------------------------------------------------------------
# builders


def _power_flow_core(model: CaseModel, objective_penalties: bool = True) -> None:
    """Variables, flow, thermal and balance constraints common to every case."""
    net, topo = model.net, model.topo
    sp = model.space
    gens, br = model.gens, model.branches
    nb, ng, ne = net.n_bus, len(gens), len(br)

    iv = sp.add("v", nb, topo.v_min, topo.v_max)
    ith = sp.add("theta", nb)
    ip = sp.add("p", ng, net.gen_array("p_min")[gens], net.gen_array("p_max")[gens])
    iq = sp.add("q", ng, net.gen_array("q_min")[gens], net.gen_array("q_max")[gens])
    ipo, iqo = sp.add("pf_o", ne), sp.add("qf_o", ne)
    ipd, iqd = sp.add("pf_d", ne), sp.add("qf_d", ne)
    iso, isd = sp.add("sigma_o", ne, 0.0), sp.add("sigma_d", ne, 0.0)
    ispp, ispm = sp.add("sp_plus", nb, 0.0), sp.add("sp_minus", nb, 0.0)
    isqp, isqm = sp.add("sq_plus", nb, 0.0), sp.add("sq_minus", nb, 0.0)
    sp.fix(ith[net.reference_bus], 0.0)

    fo, to = net.branch_from[br], net.branch_to[br]
    prob = model.problem
    if ne:
        prob.add_constraint(BranchFlowBlock(
            "branch_flow", iv[fo], iv[to], ith[fo], ith[to], ipo, iqo, ipd, iqd,
            net.branch_array("g_series")[br], net.branch_array("b_series")[br],
            net.branch_array("b_charge")[br]))
        rate = topo.rate[br]
        prob.add_constraint(ThermalBlock(
            "thermal", np.concatenate([iv[fo], iv[to]]), np.concatenate([iso, isd]),
            np.concatenate([ipo, ipd]), np.concatenate([iqo, iqd]), np.concatenate([rate, rate])))

    gbus = net.gen_bus[gens]
    buses = np.arange(nb)
    one = np.ones
    p_rows = np.concatenate([gbus, fo, to, buses, buses])
    p_cols = np.concatenate([ip, ipo, ipd, ispp, ispm])
    p_coef = np.concatenate([one(ng), -one(ne), -one(ne), -one(nb), one(nb)])
    prob.add_constraint(LinearBlock(
        "balance_p", nb, p_rows, p_cols, p_coef, net.bus_array("p_load"), net.bus_array("p_load"),
        quad=(buses, iv, -net.bus_array("g_shunt"))))
    q_cols = np.concatenate([iq, iqo, iqd, isqp, isqm])
    prob.add_constraint(LinearBlock(
        "balance_q", nb, p_rows, q_cols, p_coef, net.bus_array("q_load"), net.bus_array("q_load"),
        quad=(buses, iv, net.bus_array("b_shunt"))))

    if objective_penalties:
        for name, idx, curve in (("penalty_s", np.concatenate([iso, isd]), net.penalty_s),
                                 ("penalty_p", np.concatenate([ispp, ispm]), net.penalty_p),
                                 ("penalty_q", np.concatenate([isqp, isqm]), net.penalty_q)):
            qp = quad_penalty_fit(curve)
            model.penalty_blocks.append(prob.add_objective(SeparableQuadratic(name, idx, qp.a1, qp.a2)))


def surrogate_pairs(net: Network) -> tuple[list[tuple[str, int, str]], dict]:
    """Coupling variable pairs used by the master's surrogate block.

    Returns ``[(kind, element_index, terminal)]`` and a map from
    ``(contingency id, terminal)`` to the pair position.  Generator contingencies
    own one pair, branch contingencies one per terminal.
    """
    pairs, where = [], {}
    for k in net.contingencies:
        if k.kind == GENERATOR:
            where[(k.id, "g")] = len(pairs)
            pairs.append(("g", net.gen_index[k.element], "g"))
        else:
            e = net.branch_index[k.element]
            for term in ("o", "d"):
                where[(k.id, term)] = len(pairs)
                pairs.append(("e", e, term))
    return pairs, where


def build_base_problem(net: Network, surrogates: Iterable = (), weight: float | None = None) -> CaseModel:
    """Master problem: base-case ACOPF plus weighted fourth-power recourse surrogates.

    ``surrogates`` are objects with ``contingency``, ``coef`` and ``terminal``
    attributes (see :class:`scacopf.decomp.RecourseSurrogate`).  The surrogate
    block always holds one slot per coupling pair of every contingency so that
    coefficient updates never change the sparsity pattern.
    """
    model = CaseModel(net, apply_contingency(net, None), BASE)
    _power_flow_core(model)
    prob, sp = model.problem, model.space
    c = np.array([g.cost for g in net.generators], dtype=float).reshape(-1, 3)
    model.cost_block = prob.add_objective(
        SeparableQuadratic("generation_cost", sp.index("p"), c[:, 1], c[:, 2], 0.0, c[:, 0]))

    pairs, where = surrogate_pairs(net)
    if pairs:
        ip, iq = [], []
        for kind, el, term in pairs:
            if kind == "g":
                ip.append(model.var("p", el)[0])
                iq.append(model.var("q", el)[0])
            else:
                ip.append(model.var(f"pf_{term}", el)[0])
                iq.append(model.var(f"qf_{term}", el)[0])
        if weight is None:
            weight = 1.0 / max(1, len(net.contingencies))
        model.surrogate_block = prob.add_objective(
            FourthPowerSurrogate("surrogates", ip, iq, np.zeros(len(pairs)), weight))
        model.surrogate_where = where
        set_surrogates(model, surrogates)
    return model


def set_surrogates(model: CaseModel, surrogates: Iterable) -> None:
    """Load surrogate coefficients into the master's surrogate block in place."""
    blk = model.surrogate_block
    if blk is None:
        return
    coef = np.zeros_like(blk.coef)
    for s in surrogates:
        term = "g" if s.kind == GENERATOR else s.terminal
        coef[model.surrogate_where[(s.contingency, term)]] = s.coef
    if np.any(coef < 0):
        raise ValueError("surrogate coefficients must be nonnegative")
    blk.coef[:] = coef


def build_contingency_problem(net: Network, k, base: OperatingPoint,
                              epsilon: float = DEFAULT_EPSILON) -> CaseModel:
    """ε-relaxed contingency subproblem for case ``k`` around ``base``.

    Complementarity pairs ``0 <= a ⊥ b >= 0`` become ``a, b >= 0`` and
    ``a·b <= ε·(range of a)·(range of b)``.  Pairs whose partner is identically
    zero (fixed generator output or reactive range) are dropped together with
    their coupling slack.  When the structural range of a slack is zero the
    slack is fixed to 0 instead of carrying a zero-cap product row.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    topo = apply_contingency(net, k)
    model = CaseModel(net, topo, CONTINGENCY)
    model.base = base
    model.epsilon = float(epsilon)
    _power_flow_core(model)
    _add_delta(model, base)
    sp, prob = model.space, model.problem
    gens, ctrl = model.gens, model.ctrl_buses
    ng, nc = len(gens), len(ctrl)
    lo_d, hi_d, _ = model.dbounds

    # frequency drop control
    ip, idelta = sp.index("p"), sp.index("delta")[0]
    irp = sp.add("rho_plus", ng, 0.0)
    irm = sp.add("rho_minus", ng, 0.0)
    pmin, pmax = net.gen_array("p_min")[gens], net.gen_array("p_max")[gens]
    a = net.gen_array("drop_const")[gens]
    prange = pmax - pmin
    p0 = base.p[gens]
    keep = prange > 0
    sp.fix(irp[~keep], 0.0)
    sp.fix(irm[~keep], 0.0)
    rows = np.flatnonzero(keep)
    nk = len(rows)
    r = np.arange(nk)
    if nk:
        prob.add_constraint(LinearBlock(
            "drop_control", nk, np.concatenate([r, r, r, r]),
            np.concatenate([ip[rows], irp[rows], irm[rows], np.repeat(idelta, nk)]),
            np.concatenate([np.ones(nk), np.ones(nk), -np.ones(nk), -a[rows]]), p0[rows], p0[rows]))
    struct_up = a * hi_d * prange
    struct_dn = -a * lo_d * prange
    # a base injection sitting on a bound up to solver tolerance leaves a cap of
    # order 1e-12 that only ruins conditioning; such slacks are fixed at 0
    has_up = keep & (a * hi_d > MIN_SIGNAL_REACH)
    has_dn = keep & (-a * lo_d > MIN_SIGNAL_REACH)
    up, dn = np.flatnonzero(has_up), np.flatnonzero(has_dn)
    sp.fix(irp[keep & ~has_up], 0.0)
    sp.fix(irm[keep & ~has_dn], 0.0)
    if len(up):
        prob.add_constraint(ProductCapBlock("drop_cap_up", irp[up], ip[up], -np.ones(len(up)),
                                            pmax[up], epsilon * struct_up[up]))
    if len(dn):
        prob.add_constraint(ProductCapBlock("drop_cap_down", irm[dn], ip[dn], np.ones(len(dn)),
                                            -pmin[dn], epsilon * struct_dn[dn]))

    # voltage regulation
    iv, iq = sp.index("v"), sp.index("q")
    inp = sp.add("nu_plus", nc, 0.0)
    inm = sp.add("nu_minus", nc, 0.0)
    qmin, qmax = net.gen_array("q_min")[gens], net.gen_array("q_max")[gens]
    qrange = qmax - qmin
    gpos = model._ctrl_pos[net.gen_bus[gens]]  # controlled-bus position of each active generator
    regulating = np.zeros(nc, dtype=bool)
    np.logical_or.at(regulating, gpos, qrange > 0)
    sp.fix(inp[~regulating], 0.0)
    sp.fix(inm[~regulating], 0.0)
    rows = np.flatnonzero(regulating)
    nr = len(rows)
    if nr:
        r = np.arange(nr)
        prob.add_constraint(LinearBlock(
            "voltage_control", nr, np.concatenate([r, r, r]),
            np.concatenate([inp[rows], inm[rows], iv[ctrl[rows]]]),
            np.concatenate([np.ones(nr), -np.ones(nr), -np.ones(nr)]),
            -base.v[ctrl[rows]], -base.v[ctrl[rows]]))
    gb = net.gen_bus[gens]
    vmax_k, vmin_k = topo.v_max[gb], topo.v_min[gb]
    vmax_0, vmin_0 = net.bus_array("v_max_base")[gb], net.bus_array("v_min_base")[gb]
    struct_lo = (vmax_k - vmin_0) * qrange  # caps ν⁻ · (Q̄ - q)
    struct_hi = (vmax_0 - vmin_k) * qrange  # caps ν⁺ · (q - Q̲)
    g_lo = np.flatnonzero((qrange > 0) & (struct_lo > 0))
    g_hi = np.flatnonzero((qrange > 0) & (struct_hi > 0))
    if len(g_lo):
        prob.add_constraint(ProductCapBlock("vreg_cap_up", inm[gpos[g_lo]], iq[g_lo], -np.ones(len(g_lo)),
                                            qmax[g_lo], epsilon * struct_lo[g_lo]))
    if len(g_hi):
        prob.add_constraint(ProductCapBlock("vreg_cap_down", inp[gpos[g_hi]], iq[g_hi], np.ones(len(g_hi)),
                                            -qmin[g_hi], epsilon * struct_hi[g_hi]))
    return model


def _add_delta(model: CaseModel, base: OperatingPoint) -> None:
    db = delta_bounds(model.net, model.topo, base.p)
    model.dbounds = db
    idx = model.space.add("delta", 1, db.lower, db.upper)
    if db.rigid or db.lower == db.upper:
        model.space.fix(idx, 0.0 if db.rigid else db.lower)


def build_restricted_canvas(net: Network, k, base: OperatingPoint, reg: float = DEFAULT_REG) -> CaseModel:
    """Case-``k`` power flow with penalty objective and no coupling constraints.

    The mutation hooks :meth:`CaseModel.fix`, :meth:`CaseModel.set_bounds` and
    :meth:`CaseModel.add_response_constraints` carry the crushing edits.  A
    small proximal term toward the base voltages and angles is added when
    ``reg > 0``.
    """
    topo = apply_contingency(net, k)
    model = CaseModel(net, topo, CANVAS)
    model.base = base
    _power_flow_core(model)
    _add_delta(model, base)
    if reg > 0:
        sp = model.space
        idx = np.concatenate([sp.index("v"), sp.index("theta")])
        ref = np.concatenate([base.v, base.theta])
        model.reg_block = model.problem.add_objective(
            SeparableQuadratic("regularization", idx, 0.0, 0.5 * reg, ref))
    return model


def copy_base_point(model: CaseModel, base: OperatingPoint, p=None, delta: float = 0.0) -> np.ndarray:
    """Always-feasible start: base voltages and angles, given (default base) injections.

    Flows follow from the voltages; thermal and balance slacks absorb the rest.
    ``q`` is clipped into the case bounds and coupling slacks are zero.
    """
    net, sp = model.net, model.space
    x = model.initial_x()
    x[sp.index("v")] = np.clip(base.v, sp.lb[sp.index("v")], sp.ub[sp.index("v")])
    x[sp.index("theta")] = base.theta
    ip, iq = sp.index("p"), sp.index("q")
    pv = base.p if p is None else np.asarray(p, dtype=float)
    x[ip] = np.clip(pv[model.gens], sp.lb[ip], sp.ub[ip])
    x[iq] = np.clip(base.q[model.gens], sp.lb[iq], sp.ub[iq])
    if "delta" in sp:
        x[sp.index("delta")] = delta
    for group in ("rho_plus", "rho_minus", "nu_plus", "nu_minus"):
        if group in sp:
            x[sp.index(group)] = 0.0
    model.fill_flows(x)
    complete_slacks(model, x)
    return x


def complete_slacks(model: CaseModel, x) -> np.ndarray:
    """Set thermal and balance slacks to the smallest values feasible at ``x``."""
    net, sp = model.net, model.space
    br = model.branches
    rate = model.topo.rate[br]
    v = x[sp.index("v")]
    for term, bus in (("o", net.branch_from[br]), ("d", net.branch_to[br])):
        s = np.hypot(x[sp.index(f"pf_{term}")], x[sp.index(f"qf_{term}")])
        x[sp.index(f"sigma_{term}")] = np.maximum(s - rate * v[bus], 0.0)
    for pfx, qty in (("sp", "p"), ("sq", "q")):
        sp_, sm_ = sp.index(f"{pfx}_plus"), sp.index(f"{pfx}_minus")
        x[sp_] = 0.0
        x[sm_] = 0.0
        blk = next(b for b in model.problem.constraint_blocks if b.name == f"balance_{qty}")
        res = blk.values(x) - blk.lb  # with zero slacks
        x[sp_] = np.maximum(res, 0.0)
        x[sm_] = np.maximum(-res, 0.0)
    return x


# ----------------------------------------------------------------------------
# scoring


def point_penalty(net: Network, pt: OperatingPoint, mode: str = "piecewise") -> dict:
    """Thermal, active and reactive imbalance penalties of one point."""
    if mode == "piecewise":
        fs, fp, fq = net.penalty_s, net.penalty_p, net.penalty_q
    elif mode == "quadratic":
        fs, fp, fq = (quad_penalty_fit(c) for c in (net.penalty_s, net.penalty_p, net.penalty_q))
    else:
        raise ValueError(f"unknown penalty mode {mode!r}")

    def tot(f, *arrays):
        return float(sum(np.nansum(f(np.maximum(a, 0.0))) for a in arrays))

    out = {
        "thermal": tot(fs, pt.sigma_o, pt.sigma_d),
        "active": tot(fp, pt.sp_plus, pt.sp_minus),
        "reactive": tot(fq, pt.sq_plus, pt.sq_minus),
    }
    out["total"] = out["thermal"] + out["active"] + out["reactive"]
    return out


def generation_cost(net: Network, pt: OperatingPoint) -> float:
    c = np.array([g.cost for g in net.generators], dtype=float).reshape(-1, 3)
    p = pt.p
    return float(np.nansum(c[:, 0] + c[:, 1] * p + c[:, 2] * p * p))


def score_solution(net: Network, base: OperatingPoint, contingency_points: Mapping[str, OperatingPoint],
                   mode: str = "piecewise") -> dict:
    """Objective breakdown: base cost + base penalties + mean contingency penalty."""
    base.check_shape(net)
    cost = generation_cost(net, base)
    base_pen = point_penalty(net, base, mode)
    n_k = len(net.contingencies)
    weight = 1.0 / max(1, n_k)
    terms, missing = {}, []
    for k in net.contingencies:
        pt = contingency_points.get(k.id)
        if pt is None:
            missing.append(k.id)
            terms[k.id] = None
            continue
        pt.check_shape(net)
        terms[k.id] = point_penalty(net, pt, mode)
    cont_sum = sum(t["total"] for t in terms.values() if t is not None)
    total = cost + base_pen["total"] + weight * cont_sum
    return {
        "mode": mode,
        "total": total,
        "generation_cost": cost,
        "base_penalty": base_pen,
        "contingency_weight": weight,
        "contingency_penalty_sum": cont_sum,
        "contingency_penalties": terms,
        "missing": missing,
        "partial": bool(missing),
    }


def bound_violations(net: Network, pt: OperatingPoint, tol: float = 1e-6) -> list[str]:
    """Human-readable bound violations of ``pt`` against its case limits."""
    topo = apply_contingency(net, None if pt.case == "base" else pt.case)
    out = []

    def scan(label, vals, lo, hi, ids):
        for i in np.flatnonzero(np.isfinite(vals) & ((vals < lo - tol) | (vals > hi + tol))):
            out.append(f"{pt.case}: {label} of {ids[i]} = {vals[i]:.6g} outside [{lo[i]:.6g}, {hi[i]:.6g}]")

    scan("v", pt.v, topo.v_min, topo.v_max, [b.id for b in net.buses])
    gid = [g.id for g in net.generators]
    scan("p", pt.p, net.gen_array("p_min"), net.gen_array("p_max"), gid)
    scan("q", pt.q, net.gen_array("q_min"), net.gen_array("q_max"), gid)
    for name in ("sigma_o", "sigma_d", "sp_plus", "sp_minus", "sq_plus", "sq_minus"):
        vals = getattr(pt, name)
        for i in np.flatnonzero(np.isfinite(vals) & (vals < -tol)):
            out.append(f"{pt.case}: {name}[{i}] = {vals[i]:.6g} is negative")
    return out
