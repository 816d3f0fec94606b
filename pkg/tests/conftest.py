import json
from pathlib import Path

import pytest

from scacopf.decomp import DecompParams, Decomposition, evaluate_contingency
from scacopf.grid import fixture_path, load_network
from scacopf.recovery import recover_feasible

DATA = Path(__file__).parent / "data"

# PASS/FAIL lines of the acceptance suite, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


def frozen(name):
    return json.loads((DATA / name).read_text())


@pytest.fixture(scope="session")
def case2():
    return load_network(fixture_path("case2"))


@pytest.fixture(scope="session")
def case14():
    return load_network(fixture_path("case14"))


@pytest.fixture(scope="session")
def hedging():
    return load_network(fixture_path("hedging"))


@pytest.fixture(scope="session")
def case14_base(case14):
    d = Decomposition(case14, DecompParams())
    d.solve_master()
    return d.state.base


@pytest.fixture(scope="session")
def case14_relaxed(case14, case14_base):
    params = DecompParams()
    return {k.id: evaluate_contingency(case14, k.id, case14_base, params) for k in case14.contingencies}


@pytest.fixture(scope="session")
def case14_recovered(case14, case14_base, case14_relaxed):
    return {cid: recover_feasible(case14, cid, case14_base, ev.point) for cid, ev in case14_relaxed.items()}
