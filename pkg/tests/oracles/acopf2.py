"""2-bus ACOPF by reduced-space brute force.

Bus 1 holds the only generator and the reference angle; bus 2 holds the load.
For fixed (v1, v2, θ2) the generator output equals the sending-end flow, and
every mismatch (load side imbalance, generator bound excess, thermal excess)
is paid at the quadratic penalty rate.  The grid is scanned at 1e-3 and the
best point polished on the balanced manifold: for a given v1 the pair
(v2, θ2) is root-solved so the load bus balances exactly, and v1 is then
optimized by a bounded scalar search.  Any mismatch costs at least the first
penalty slope, far above the marginal generation cost, so the optimum carries
no imbalance and lies on that manifold.
"""

import numpy as np
from scipy.optimize import fsolve, minimize_scalar

from .flows import pi_model_flows

STEP = 1e-3


def _quad(curve):
    a1 = curve["slope1"]
    a2 = (curve["slope2"] - curve["slope1"]) / (2.0 * curve["bin1_width"])
    return lambda s: a1 * s + a2 * s * s


def make_objective(doc):
    (b1, b2), gen, br, pen = doc["buses"], doc["generators"][0], doc["branches"][0], doc["penalties"]
    fs, fp, fq = _quad(pen["s"]), _quad(pen["p"]), _quad(pen["q"])
    c0, c1, c2 = gen["cost"]
    pd, qd = b2.get("p_load", 0.0), b2.get("q_load", 0.0)
    rate = br["rate_base"]

    def f(v1, v2, th2):
        po, qo, pdd, qdd = pi_model_flows(v1, v2, 0.0, th2, br["g_series"], br["b_series"], br["b_charge"])
        p = np.clip(po, gen["p_min"], gen["p_max"])
        q = np.clip(qo, gen["q_min"], gen["q_max"])
        total = c0 + c1 * p + c2 * p * p
        total = total + fp(np.abs(po - p)) + fq(np.abs(qo - q))
        total = total + fp(np.abs(-pdd - pd)) + fq(np.abs(-qdd - qd))
        total = total + fs(np.maximum(np.hypot(po, qo) - rate * v1, 0.0))
        total = total + fs(np.maximum(np.hypot(pdd, qdd) - rate * v2, 0.0))
        return total

    bounds = [(b1["v_min_base"], b1["v_max_base"]), (b2["v_min_base"], b2["v_max_base"]), (-0.3, 0.3)]
    return f, bounds


def solve(doc):
    f, bounds = make_objective(doc)
    axes = [np.arange(lo, hi + 0.5 * STEP, STEP) for lo, hi in bounds]
    best, arg = np.inf, None
    V2, TH = np.meshgrid(axes[1], axes[2], indexing="ij")
    for v1 in axes[0]:
        vals = f(v1, V2, TH)
        k = np.unravel_index(np.argmin(vals), vals.shape)
        if vals[k] < best:
            best, arg = float(vals[k]), (v1, V2[k], TH[k])

    _, _, br, b2 = None, None, doc["branches"][0], doc["buses"][1]

    def balanced(v1, guess):
        def eqs(z):
            _, _, pdd, qdd = pi_model_flows(v1, z[0], 0.0, z[1], br["g_series"], br["b_series"], br["b_charge"])
            return [pdd + b2.get("p_load", 0.0), qdd + b2.get("q_load", 0.0)]
        z, info, _, _ = fsolve(eqs, guess, full_output=True, xtol=1e-13)
        return z if np.max(np.abs(info["fvec"])) < 1e-12 else None

    guess = np.array(arg[1:])

    def h(v1):
        z = balanced(v1, guess)
        if z is None or not bounds[1][0] <= z[0] <= bounds[1][1]:
            return np.inf
        return float(f(v1, z[0], z[1]))

    lo, hi = bounds[0]
    res = minimize_scalar(h, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    cands = [(float(res.fun), float(res.x)), (h(lo), lo), (h(hi), hi)]
    val, v1 = min(cands)
    z = balanced(v1, guess)
    return {"grid_objective": best, "grid_point": [float(t) for t in arg],
            "objective": min(best, val), "point": [float(v1), float(z[0]), float(z[1])]}
