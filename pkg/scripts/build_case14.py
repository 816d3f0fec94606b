"""Regenerate ``src/scacopf/data/case14.json`` from the IEEE 14-bus test case.

Bus, generator, branch and cost data are the public IEEE 14-bus values (as
distributed with MATPOWER's ``case14``).  The stylized model has no transformer
taps, so the three tap ratios are dropped.  The public case carries no thermal
ratings; the ratings below are chosen so that a few branches run close to
their limits.  Emergency bounds widen the normal ones.
"""

import json
from pathlib import Path

BASE_MVA = 100.0

# bus_i  Pd     Qd    Gs  Bs
BUS = [
    (1, 0.0, 0.0, 0.0, 0.0),
    (2, 21.7, 12.7, 0.0, 0.0),
    (3, 94.2, 19.0, 0.0, 0.0),
    (4, 47.8, -3.9, 0.0, 0.0),
    (5, 7.6, 1.6, 0.0, 0.0),
    (6, 11.2, 7.5, 0.0, 0.0),
    (7, 0.0, 0.0, 0.0, 0.0),
    (8, 0.0, 0.0, 0.0, 0.0),
    (9, 29.5, 16.6, 0.0, 19.0),
    (10, 9.0, 5.8, 0.0, 0.0),
    (11, 3.5, 1.8, 0.0, 0.0),
    (12, 6.1, 1.6, 0.0, 0.0),
    (13, 13.5, 5.8, 0.0, 0.0),
    (14, 14.9, 5.0, 0.0, 0.0),
]

# bus  Qmax  Qmin  Pmax   Pmin  c2            c1
GEN = [
    (1, 10.0, 0.0, 332.4, 0.0, 0.0430292599, 20.0),
    (2, 50.0, -40.0, 140.0, 0.0, 0.25, 20.0),
    (3, 40.0, 0.0, 100.0, 0.0, 0.01, 40.0),
    (6, 24.0, -6.0, 100.0, 0.0, 0.01, 40.0),
    (8, 24.0, -6.0, 100.0, 0.0, 0.01, 40.0),
]

# fbus tbus  r        x        b       rate (MVA)
BRANCH = [
    (1, 2, 0.01938, 0.05917, 0.0528, 200.0),
    (1, 5, 0.05403, 0.22304, 0.0492, 100.0),
    (2, 3, 0.04699, 0.19797, 0.0438, 100.0),
    (2, 4, 0.05811, 0.17632, 0.0340, 80.0),
    (2, 5, 0.05695, 0.17388, 0.0346, 70.0),
    (3, 4, 0.06701, 0.17103, 0.0128, 60.0),
    (4, 5, 0.01335, 0.04211, 0.0, 80.0),
    (4, 7, 0.0, 0.20912, 0.0, 60.0),
    (4, 9, 0.0, 0.55618, 0.0, 40.0),
    (5, 6, 0.0, 0.25202, 0.0, 60.0),
    (6, 11, 0.09498, 0.19890, 0.0, 40.0),
    (6, 12, 0.12291, 0.25581, 0.0, 30.0),
    (6, 13, 0.06615, 0.13027, 0.0, 40.0),
    (7, 8, 0.0, 0.17615, 0.0, 60.0),
    (7, 9, 0.0, 0.11001, 0.0, 60.0),
    (9, 10, 0.03181, 0.08450, 0.0, 40.0),
    (9, 14, 0.12711, 0.27038, 0.0, 30.0),
    (10, 11, 0.08205, 0.19207, 0.0, 30.0),
    (12, 13, 0.22092, 0.19988, 0.0, 30.0),
    (13, 14, 0.17093, 0.34802, 0.0, 30.0),
]

EMERGENCY_RATE_FACTOR = 1.15


def curve(slope1, slope2, width):
    # $/MW converted to $/pu
    return {"slope1": slope1 * BASE_MVA, "slope2": slope2 * BASE_MVA, "bin1_width": width / BASE_MVA}


def build():
    buses = [
        {
            "id": str(i), "v_min_base": 0.94, "v_max_base": 1.06,
            "v_min_emer": 0.90, "v_max_emer": 1.10,
            "p_load": pd / BASE_MVA, "q_load": qd / BASE_MVA,
            "g_shunt": gs / BASE_MVA, "b_shunt": bs / BASE_MVA,
        }
        for i, pd, qd, gs, bs in BUS
    ]
    gens = [
        {
            "id": f"g{bus}", "bus": str(bus),
            "p_min": pmin / BASE_MVA, "p_max": pmax / BASE_MVA,
            "q_min": qmin / BASE_MVA, "q_max": qmax / BASE_MVA,
            "drop_const": pmax / BASE_MVA,
            "cost": [0.0, c1 * BASE_MVA, c2 * BASE_MVA**2],
        }
        for bus, qmax, qmin, pmax, pmin, c2, c1 in GEN
    ]
    branches = []
    for n, (f, t, r, x, b, rate) in enumerate(BRANCH, start=1):
        z2 = r * r + x * x
        branches.append({
            "id": f"e{n}", "from_bus": str(f), "to_bus": str(t),
            "g_series": r / z2, "b_series": -x / z2, "b_charge": b,
            "rate_base": rate / BASE_MVA, "rate_emer": EMERGENCY_RATE_FACTOR * rate / BASE_MVA,
        })
    conts = [{"id": f"G-{g['id']}", "kind": "generator", "element": g["id"]} for g in gens]
    for e, (f, t, *_) in zip(branches, BRANCH):
        if (f, t) == (7, 8):
            continue  # radial feeder of bus 8; its outage islands the bus
        conts.append({"id": f"B-{e['id']}", "kind": "branch", "element": e["id"]})
    return {
        "name": "case14",
        "base_mva": BASE_MVA,
        "buses": buses,
        "generators": gens,
        "branches": branches,
        "penalties": {
            "s": curve(1000.0, 5000.0, 2.0),
            "p": curve(1000.0, 5000.0, 2.0),
            "q": curve(1000.0, 5000.0, 2.0),
        },
        "contingencies": conts,
    }


if __name__ == "__main__":
    out = Path(__file__).resolve().parents[1] / "src" / "scacopf" / "data" / "case14.json"
    out.write_text(json.dumps(build(), indent=1) + "\n")
    print(f"wrote {out}")
