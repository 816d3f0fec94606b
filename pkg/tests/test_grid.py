import copy
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scacopf.grid import (BRANCH, GENERATOR, NetworkParseError, NetworkValidationError, apply_contingency,
                          delta_bounds, fixture_path, load_network, network_from_dict, network_to_dict)


def doc_of(name):
    return json.loads(fixture_path(name).read_text())


def test_two_bus_fixture_shape(case2):
    assert (case2.n_bus, case2.n_gen, case2.n_branch) == (2, 1, 1)
    assert case2.reference_bus == 0


def test_case14_fixture_shape(case14):
    assert (case14.n_bus, case14.n_branch, case14.n_gen) == (14, 20, 5)
    # every generator and every branch not islanding the grid has a contingency
    kinds = [k.kind for k in case14.contingencies]
    assert kinds.count(GENERATOR) == 5 and kinds.count(BRANCH) == 19


def test_emergency_window_contains_base(case14):
    for b in case14.buses:
        assert b.v_min_emer <= b.v_min_base <= b.v_max_base <= b.v_max_emer


def test_round_trip(case14):
    again = network_from_dict(network_to_dict(case14))
    assert network_to_dict(again) == network_to_dict(case14)


def test_voltage_window_violation_names_bus():
    doc = doc_of("case2")
    doc["buses"][1]["v_min_base"] = 0.8  # below v_min_emer = 0.85
    with pytest.raises(NetworkValidationError, match="bus 2"):
        network_from_dict(doc)


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d["generators"][0].update(p_min=3.0), "p_min > p_max"),
    (lambda d: d["generators"][0].update(bus="9"), "unknown bus"),
    (lambda d: d["generators"][0].update(drop_const=-1.0), "negative drop_const"),
    (lambda d: d["branches"][0].update(rate_emer=0.5), "ratings"),
    (lambda d: d["branches"][0].update(to_bus="1"), "from_bus == to_bus"),
    (lambda d: d["penalties"]["p"].update(slope2=10.0), "penalty p"),
    (lambda d: d["contingencies"].append({"id": "G1", "kind": "generator", "element": "g1"}), "only generator"),
    (lambda d: d["contingencies"].append({"id": "B1", "kind": "branch", "element": "e1"}), "islands"),
])
def test_validation_errors(mutate, message):
    doc = doc_of("case2")
    mutate(doc)
    with pytest.raises(NetworkValidationError, match=message):
        network_from_dict(doc)


def test_schema_and_parse_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(NetworkParseError):
        load_network(bad)
    with pytest.raises(NetworkParseError):
        load_network(tmp_path / "missing.json")
    doc = doc_of("case2")
    del doc["branches"]
    with pytest.raises(NetworkParseError, match="schema"):
        network_from_dict(doc)


def test_apply_contingency_sets(case14):
    k = case14.contingency("G-g2")
    topo = apply_contingency(case14, k)
    g = case14.gen_index["g2"]
    assert not topo.gen_active[g] and topo.gen_active.sum() == 4 and topo.branch_active.all()
    np.testing.assert_array_equal(topo.v_min, case14.bus_array("v_min_emer"))
    kb = case14.contingency("B-e3")
    tb = apply_contingency(case14, kb)
    assert tb.branch_active.sum() == 19 and tb.gen_active.all()
    base = apply_contingency(case14, None)
    assert base.is_base and base.gen_active.all() and base.branch_active.all()
    np.testing.assert_array_equal(base.rate, case14.branch_array("rate_base"))
    assert apply_contingency(case14, "base").is_base


def test_apply_contingency_idempotent_and_pure(case14):
    before = network_to_dict(case14)
    a = apply_contingency(case14, "B-e3")
    b = apply_contingency(case14, "B-e3")
    np.testing.assert_array_equal(a.branch_active, b.branch_active)
    assert network_to_dict(case14) == before


def test_unknown_contingency(case14):
    with pytest.raises(KeyError):
        apply_contingency(case14, "nope")


def _gens_doc(p0s, bounds, drops):
    doc = doc_of("case2")
    doc["generators"] = [
        {"id": f"g{i}", "bus": "1", "p_min": lo, "p_max": hi, "q_min": -1.0, "q_max": 1.0, "drop_const": a}
        for i, ((lo, hi), a) in enumerate(zip(bounds, drops))
    ]
    return network_from_dict(doc)


def test_delta_bounds_single_interval():
    net = _gens_doc([1.0], [(0.0, 3.0)], [1.0])
    assert delta_bounds(net, None, [1.0]) == (-1.0, 2.0, False)


def test_delta_bounds_two_generators():
    # up headrooms 0.2 and 1.0, down headrooms 0.5 and 0.5
    net = _gens_doc(None, [(0.0, 0.7), (0.0, 1.5)], [1.0, 1.0])
    lo, hi, rigid = delta_bounds(net, None, [0.5, 0.5])
    assert (lo, hi, rigid) == (-0.5, 1.0, False)
    # brute force: the clipped response is constant beyond both ends
    p0, pmin, pmax = np.array([0.5, 0.5]), np.zeros(2), np.array([0.7, 1.5])
    grid = np.linspace(-2, 2, 40001)
    resp = np.clip(p0[None] + grid[:, None], pmin, pmax).sum(1)
    assert np.all(resp[grid >= hi] == resp[-1]) and np.all(resp[grid <= lo] == resp[0])
    assert np.all(np.diff(resp[(grid > lo) & (grid < hi)]) > 0)


def test_delta_bounds_rigid():
    net = _gens_doc(None, [(0.0, 1.0), (0.0, 1.0)], [0.0, 0.0])
    assert delta_bounds(net, None, [0.5, 0.5]) == (0.0, 0.0, True)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0.01, 2), st.floats(0, 1), st.floats(0.1, 3)),
                min_size=1, max_size=5))
def test_delta_bounds_bracket_the_signal(gens):
    from scacopf.recovery import delta_response
    bounds = [(lo, lo + w) for lo, w, _, _ in gens]
    p0 = [lo + f * w for lo, w, f, _ in gens]
    drops = [a for *_, a in gens]
    net = _gens_doc(p0, bounds, drops)
    lo, hi, rigid = delta_bounds(net, None, p0)
    assert lo <= 0 <= hi and not rigid
    pmin, pmax = np.array(bounds).T
    x_lo, x_hi = float(np.sum(pmin - p0)), float(np.sum(pmax - p0))
    for t in (0.1, 0.5, 0.9):
        x = x_lo + t * (x_hi - x_lo)
        if x_lo < x < x_hi:
            d = delta_response(x, np.array(p0), pmin, pmax, np.array(drops))
            assert lo - 1e-12 <= d <= hi + 1e-12
