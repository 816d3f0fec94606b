"""Static network data model, contingency topologies and drop-control bounds.

All electrical quantities are per-unit on ``Network.base_mva``.  Networks are
loaded from the JSON format described by ``data/network.schema.json``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence

import jsonschema
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)

GENERATOR = "generator"
BRANCH = "branch"


class NetworkParseError(ValueError):
    """The network file is unreadable, not JSON, or violates the schema."""


class NetworkValidationError(ValueError):
    """The network parsed but violates a semantic invariant."""


@dataclass(frozen=True)
class Bus:
    id: str
    v_min_base: float
    v_max_base: float
    v_min_emer: float
    v_max_emer: float
    p_load: float = 0.0
    q_load: float = 0.0
    g_shunt: float = 0.0
    b_shunt: float = 0.0


@dataclass(frozen=True)
class Generator:
    id: str
    bus: str
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    drop_const: float
    cost: tuple[float, float, float]  # c0, c1, c2


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    g_series: float
    b_series: float
    b_charge: float
    rate_base: float
    rate_emer: float


@dataclass(frozen=True)
class PenaltyCurve:
    """Two-bin convex piecewise-linear penalty."""

    slope1: float
    slope2: float
    bin1_width: float

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        first = np.minimum(x, self.bin1_width)
        return self.slope1 * first + self.slope2 * np.maximum(x - self.bin1_width, 0.0)


@dataclass(frozen=True)
class Contingency:
    id: str
    kind: str  # GENERATOR or BRANCH
    element: str


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...]
    branches: tuple[Branch, ...]
    penalty_s: PenaltyCurve
    penalty_p: PenaltyCurve
    penalty_q: PenaltyCurve
    contingencies: tuple[Contingency, ...] = ()
    base_mva: float = 100.0
    name: str = ""
    bus_index: dict = field(init=False, repr=False, compare=False)
    gen_index: dict = field(init=False, repr=False, compare=False)
    branch_index: dict = field(init=False, repr=False, compare=False)
    contingency_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "bus_index", {b.id: i for i, b in enumerate(self.buses)})
        object.__setattr__(self, "gen_index", {g.id: i for i, g in enumerate(self.generators)})
        object.__setattr__(self, "branch_index", {e.id: i for i, e in enumerate(self.branches)})
        object.__setattr__(
            self, "contingency_index", {k.id: i for i, k in enumerate(self.contingencies)}
        )

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    def contingency(self, cid: str) -> Contingency:
        try:
            return self.contingencies[self.contingency_index[cid]]
        except KeyError:
            raise KeyError(f"unknown contingency {cid!r}") from None

    # vectorized views used by the model builders
    def gen_array(self, attr: str) -> np.ndarray:
        return np.array([getattr(g, attr) for g in self.generators], dtype=float)

    def bus_array(self, attr: str) -> np.ndarray:
        return np.array([getattr(b, attr) for b in self.buses], dtype=float)

    def branch_array(self, attr: str) -> np.ndarray:
        return np.array([getattr(e, attr) for e in self.branches], dtype=float)

    @property
    def gen_bus(self) -> np.ndarray:
        return np.array([self.bus_index[g.bus] for g in self.generators], dtype=int)

    @property
    def branch_from(self) -> np.ndarray:
        return np.array([self.bus_index[e.from_bus] for e in self.branches], dtype=int)

    @property
    def branch_to(self) -> np.ndarray:
        return np.array([self.bus_index[e.to_bus] for e in self.branches], dtype=int)

    @property
    def reference_bus(self) -> int:
        """Index of the lowest bus id (in file order) hosting a generator."""
        return int(min(self.gen_bus))


@dataclass(frozen=True)
class CaseTopology:
    """Element sets and active limits of one power-flow case.

    ``contingency`` is ``None`` for the base case.
    """

    contingency: Contingency | None
    gen_active: np.ndarray  # bool per generator
    branch_active: np.ndarray  # bool per branch
    v_min: np.ndarray
    v_max: np.ndarray
    rate: np.ndarray

    @property
    def is_base(self) -> bool:
        return self.contingency is None

    @property
    def case_id(self) -> str:
        return "base" if self.contingency is None else self.contingency.id

    @property
    def gens(self) -> np.ndarray:
        return np.flatnonzero(self.gen_active)

    @property
    def branches(self) -> np.ndarray:
        return np.flatnonzero(self.branch_active)


class DeltaBounds(NamedTuple):
    lower: float
    upper: float
    rigid: bool


# ----------------------------------------------------------------------------
# loading


def schema_path(name: str = "network.schema.json") -> Path:
    return Path(str(resources.files("scacopf") / "data" / name))


def fixture_path(name: str) -> Path:
    """Path of a bundled network fixture, e.g. ``fixture_path("case14")``."""
    if not name.endswith(".json"):
        name = name + ".json"
    return Path(str(resources.files("scacopf") / "data" / name))


def _load_schema(name: str) -> dict:
    with open(schema_path(name)) as fh:
        return json.load(fh)


def load_network(path) -> Network:
    """Read, schema-check and validate a network JSON file."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise NetworkParseError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise NetworkParseError(f"{path} is not valid JSON: {exc}") from exc
    return network_from_dict(doc, name=Path(path).stem)


def network_from_dict(doc: dict, name: str = "") -> Network:
    try:
        jsonschema.validate(doc, _load_schema("network.schema.json"))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path)
        raise NetworkParseError(f"schema violation at {where or '<root>'}: {exc.message}") from exc

    buses = tuple(
        Bus(
            id=str(b["id"]),
            v_min_base=b["v_min_base"],
            v_max_base=b["v_max_base"],
            v_min_emer=b["v_min_emer"],
            v_max_emer=b["v_max_emer"],
            p_load=b.get("p_load", 0.0),
            q_load=b.get("q_load", 0.0),
            g_shunt=b.get("g_shunt", 0.0),
            b_shunt=b.get("b_shunt", 0.0),
        )
        for b in doc["buses"]
    )
    gens = tuple(
        Generator(
            id=str(g["id"]),
            bus=str(g["bus"]),
            p_min=g["p_min"],
            p_max=g["p_max"],
            q_min=g["q_min"],
            q_max=g["q_max"],
            drop_const=g.get("drop_const", 0.0),
            cost=tuple(float(c) for c in g.get("cost", (0.0, 0.0, 0.0))),
        )
        for g in doc["generators"]
    )
    branches = tuple(
        Branch(
            id=str(e["id"]),
            from_bus=str(e["from_bus"]),
            to_bus=str(e["to_bus"]),
            g_series=e["g_series"],
            b_series=e["b_series"],
            b_charge=e.get("b_charge", 0.0),
            rate_base=e["rate_base"],
            rate_emer=e["rate_emer"],
        )
        for e in doc["branches"]
    )
    pen = doc["penalties"]
    conts = tuple(
        Contingency(id=str(k["id"]), kind=k["kind"], element=str(k["element"]))
        for k in doc.get("contingencies", [])
    )
    net = Network(
        buses=buses,
        generators=gens,
        branches=branches,
        penalty_s=PenaltyCurve(**pen["s"]),
        penalty_p=PenaltyCurve(**pen["p"]),
        penalty_q=PenaltyCurve(**pen["q"]),
        contingencies=conts,
        base_mva=doc.get("base_mva", 100.0),
        name=doc.get("name", name),
    )
    validate_network(net)
    return net


def network_to_dict(net: Network) -> dict:
    def curve(c: PenaltyCurve) -> dict:
        return {"slope1": c.slope1, "slope2": c.slope2, "bin1_width": c.bin1_width}

    return {
        "name": net.name,
        "base_mva": net.base_mva,
        "buses": [vars(b).copy() for b in net.buses],
        "generators": [dict(vars(g), cost=list(g.cost)) for g in net.generators],
        "branches": [vars(e).copy() for e in net.branches],
        "penalties": {"s": curve(net.penalty_s), "p": curve(net.penalty_p), "q": curve(net.penalty_q)},
        "contingencies": [vars(k).copy() for k in net.contingencies],
    }


def _connected(n_bus: int, frm: np.ndarray, to: np.ndarray) -> bool:
    if n_bus <= 1:
        return True
    adj = coo_matrix((np.ones(len(frm)), (frm, to)), shape=(n_bus, n_bus))
    ncomp, _ = connected_components(adj, directed=False)
    return ncomp == 1


def validate_network(net: Network) -> None:
    """Raise NetworkValidationError naming the first violated invariant."""

    def fail(msg):
        raise NetworkValidationError(msg)

    for kind, items in (("bus", net.buses), ("generator", net.generators), ("branch", net.branches),
                        ("contingency", net.contingencies)):
        ids = [x.id for x in items]
        if len(set(ids)) != len(ids):
            fail(f"duplicate {kind} id")

    for b in net.buses:
        if not 0 < b.v_min_emer <= b.v_min_base <= b.v_max_base <= b.v_max_emer:
            fail(
                f"bus {b.id}: voltage windows must satisfy "
                "0 < v_min_emer <= v_min_base <= v_max_base <= v_max_emer"
            )
    if not net.generators:
        fail("network has no generator")
    for g in net.generators:
        if g.bus not in net.bus_index:
            fail(f"generator {g.id}: unknown bus {g.bus!r}")
        if g.p_min > g.p_max:
            fail(f"generator {g.id}: p_min > p_max")
        if g.q_min > g.q_max:
            fail(f"generator {g.id}: q_min > q_max")
        if g.drop_const < 0:
            fail(f"generator {g.id}: negative drop_const")
        if len(g.cost) != 3 or g.cost[2] < 0:
            fail(f"generator {g.id}: cost must be (c0, c1, c2) with c2 >= 0")
    for e in net.branches:
        for end in (e.from_bus, e.to_bus):
            if end not in net.bus_index:
                fail(f"branch {e.id}: unknown bus {end!r}")
        if e.from_bus == e.to_bus:
            fail(f"branch {e.id}: from_bus == to_bus")
        if not 0 < e.rate_base <= e.rate_emer:
            fail(f"branch {e.id}: ratings must satisfy 0 < rate_base <= rate_emer")
    for label, c in (("s", net.penalty_s), ("p", net.penalty_p), ("q", net.penalty_q)):
        if not (0 < c.slope1 <= c.slope2 and c.bin1_width > 0):
            fail(f"penalty {label}: need 0 < slope1 <= slope2 and bin1_width > 0")
    if not _connected(net.n_bus, net.branch_from, net.branch_to):
        fail("bus graph is not connected")

    for k in net.contingencies:
        if k.kind == GENERATOR:
            if k.element not in net.gen_index:
                fail(f"contingency {k.id}: unknown generator {k.element!r}")
            if net.n_gen < 2:
                fail(f"contingency {k.id}: removes the only generator")
        elif k.kind == BRANCH:
            if k.element not in net.branch_index:
                fail(f"contingency {k.id}: unknown branch {k.element!r}")
            keep = np.ones(net.n_branch, dtype=bool)
            keep[net.branch_index[k.element]] = False
            if not _connected(net.n_bus, net.branch_from[keep], net.branch_to[keep]):
                fail(f"contingency {k.id}: outage of branch {k.element} islands the network")
        else:
            fail(f"contingency {k.id}: unknown kind {k.kind!r}")


# ----------------------------------------------------------------------------
# case topologies


def apply_contingency(net: Network, k: Contingency | str | None) -> CaseTopology:
    """Element sets and limits of case ``k`` (``None`` or ``"base"`` is the base case)."""
    if isinstance(k, str):
        k = None if k == "base" else net.contingency(k)
    elif k is not None and net.contingency_index.get(k.id) is None:
        raise KeyError(f"unknown contingency {k.id!r}")

    gen_active = np.ones(net.n_gen, dtype=bool)
    branch_active = np.ones(net.n_branch, dtype=bool)
    if k is None:
        return CaseTopology(
            None, gen_active, branch_active,
            net.bus_array("v_min_base"), net.bus_array("v_max_base"), net.branch_array("rate_base"),
        )
    if k.kind == GENERATOR:
        gen_active[net.gen_index[k.element]] = False
    else:
        branch_active[net.branch_index[k.element]] = False
    return CaseTopology(
        k, gen_active, branch_active,
        net.bus_array("v_min_emer"), net.bus_array("v_max_emer"), net.branch_array("rate_emer"),
    )


def delta_bounds(net: Network, k, p_base: Sequence[float]) -> DeltaBounds:
    """Interval-algebra range of the system-wide drop signal for case ``k``.

    Beyond ``upper`` every responding generator sits at its maximum output, below
    ``lower`` at its minimum.  A case without responding generators is rigid and
    gets ``(0, 0)``.
    """
    topo = k if isinstance(k, CaseTopology) else apply_contingency(net, k)
    p_base = np.asarray(p_base, dtype=float)
    a = net.gen_array("drop_const")
    resp = topo.gen_active & (a > 0)
    if not resp.any():
        return DeltaBounds(0.0, 0.0, True)
    lo = (net.gen_array("p_min")[resp] - p_base[resp]) / a[resp]
    hi = (net.gen_array("p_max")[resp] - p_base[resp]) / a[resp]
    return DeltaBounds(float(min(lo.min(), 0.0)), float(max(hi.max(), 0.0)), False)
