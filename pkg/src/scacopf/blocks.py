"""Objective terms and constraint blocks of the OPF models, with hand-coded derivatives."""

from __future__ import annotations

import numpy as np

from .nlp import ConstraintBlock, ObjectiveBlock

_I = np.int64


def _lower(r, c):
    r, c = np.asarray(r, dtype=_I), np.asarray(c, dtype=_I)
    return np.maximum(r, c), np.minimum(r, c)


class SeparableQuadratic(ObjectiveBlock):
    """Σ_i  const_i + lin_i (x_i - ref_i) + quad_i (x_i - ref_i)²."""

    def __init__(self, name, idx, lin=0.0, quad=0.0, ref=0.0, const=0.0):
        self.name = name
        self.idx = np.asarray(idx, dtype=_I)
        k = len(self.idx)
        self.lin = np.broadcast_to(np.asarray(lin, dtype=float), (k,)).copy()
        self.quad = np.broadcast_to(np.asarray(quad, dtype=float), (k,)).copy()
        self.ref = np.broadcast_to(np.asarray(ref, dtype=float), (k,)).copy()
        self.const = float(np.sum(const))

    def grad_indices(self):
        return self.idx

    def hess_structure(self):
        return self.idx, self.idx

    def value(self, x):
        d = x[self.idx] - self.ref
        return self.const + float(self.lin @ d + self.quad @ (d * d))

    def grad_values(self, x):
        return self.lin + 2.0 * self.quad * (x[self.idx] - self.ref)

    def hess_values(self, x, scale):
        return 2.0 * scale * self.quad


class FourthPowerSurrogate(ObjectiveBlock):
    """weight · Σ_k P_k (p_k² + q_k²)² over variable pairs (p_k, q_k).

    ``coef`` may be updated in place between solves; the pattern is fixed.
    """

    def __init__(self, name, ip, iq, coef, weight=1.0):
        self.name = name
        self.ip = np.asarray(ip, dtype=_I)
        self.iq = np.asarray(iq, dtype=_I)
        self.coef = np.asarray(coef, dtype=float).copy()
        self.weight = float(weight)
        hr_pq, hc_pq = _lower(self.ip, self.iq)
        self._hr = np.concatenate([self.ip, self.iq, hr_pq])
        self._hc = np.concatenate([self.ip, self.iq, hc_pq])

    def grad_indices(self):
        return np.concatenate([self.ip, self.iq])

    def hess_structure(self):
        return self._hr, self._hc

    def value(self, x):
        s = x[self.ip] ** 2 + x[self.iq] ** 2
        return self.weight * float(self.coef @ (s * s))

    def grad_values(self, x):
        p, q = x[self.ip], x[self.iq]
        t = 4.0 * self.weight * self.coef * (p * p + q * q)
        return np.concatenate([t * p, t * q])

    def hess_values(self, x, scale):
        p, q = x[self.ip], x[self.iq]
        w = 4.0 * scale * self.weight * self.coef
        return np.concatenate([w * (3 * p * p + q * q), w * (p * p + 3 * q * q), 2.0 * w * p * q])


class LinearBlock(ConstraintBlock):
    """Rows ``Σ a_rj x_j + Σ b_r x_k(r)² ∈ [lb, ub]`` given as triplets.

    The optional diagonal-quadratic part carries the shunt terms of the
    power-balance rows.
    """

    def __init__(self, name, size, rows, cols, coefs, lb, ub, quad=None):
        self.name = name
        self.size = int(size)
        self.rows = np.asarray(rows, dtype=_I)
        self.cols = np.asarray(cols, dtype=_I)
        self.coefs = np.asarray(coefs, dtype=float)
        self.lb = np.broadcast_to(np.asarray(lb, dtype=float), (self.size,)).copy()
        self.ub = np.broadcast_to(np.asarray(ub, dtype=float), (self.size,)).copy()
        if quad is None:
            quad = ([], [], [])
        qr, qc, qv = (np.asarray(a) for a in quad)
        keep = qv != 0
        self.qrows = qr[keep].astype(_I)
        self.qcols = qc[keep].astype(_I)
        self.qcoefs = qv[keep].astype(float)

    def jac_structure(self):
        return np.concatenate([self.rows, self.qrows]), np.concatenate([self.cols, self.qcols])

    def hess_structure(self):
        return self.qcols, self.qcols

    def values(self, x):
        out = np.bincount(self.rows, weights=self.coefs * x[self.cols], minlength=self.size)
        if len(self.qrows):
            out += np.bincount(self.qrows, weights=self.qcoefs * x[self.qcols] ** 2, minlength=self.size)
        return out

    def jac_values(self, x):
        return np.concatenate([self.coefs, 2.0 * self.qcoefs * x[self.qcols]])

    def hess_values(self, x, lam):
        return 2.0 * self.qcoefs * lam[self.qrows]


class BranchFlowBlock(ConstraintBlock):
    """Flow definitions ``flow(v, θ) - f = 0``, four rows per branch.

    Row order per branch: p at origin, q at origin, p at destination, q at
    destination.  Each flow has the form ``a v_own² + v_o v_d (α cos Δ + β sin Δ)``
    with ``Δ = θ_o - θ_d``.
    """

    def __init__(self, name, vo, vd, to, td, pfo, qfo, pfd, qfd, g, b, bch):
        self.name = name
        nb = len(vo)
        self.size = 4 * nb
        self.lb = np.zeros(self.size)
        self.ub = np.zeros(self.size)
        self.vo, self.vd, self.to, self.td = (np.asarray(a, dtype=_I) for a in (vo, vd, to, td))
        self.flow = np.stack([pfo, qfo, pfd, qfd], axis=1).astype(_I)  # (nb, 4)
        g, b, bch = (np.asarray(a, dtype=float) for a in (g, b, bch))
        ash = -(b + 0.5 * bch)
        self.a = np.stack([g, ash, g, ash], axis=1)
        self.alpha = np.stack([-g, b, -g, b], axis=1)
        self.beta = np.stack([-b, -g, b, g], axis=1)
        self.own_o = np.array([1.0, 1.0, 0.0, 0.0])
        self.own_d = 1.0 - self.own_o

        rows = np.arange(self.size).reshape(nb, 4)
        cols = np.stack([np.repeat(self.vo[:, None], 4, 1), np.repeat(self.vd[:, None], 4, 1),
                         np.repeat(self.to[:, None], 4, 1), np.repeat(self.td[:, None], 4, 1),
                         self.flow], axis=2)  # (nb, 4, 5)
        self._jr = np.repeat(rows[:, :, None], 5, axis=2).ravel()
        self._jc = cols.ravel()
        # per-branch Hessian over (vo, vd, to, td): 10 lower-triangle pairs
        pairs = [(self.vo, self.vo), (self.vd, self.vd), (self.vo, self.vd),
                 (self.to, self.to), (self.td, self.td), (self.to, self.td),
                 (self.vo, self.to), (self.vo, self.td), (self.vd, self.to), (self.vd, self.td)]
        hr, hc = zip(*(_lower(r, c) for r, c in pairs))
        self._hr = np.stack(hr, axis=1).ravel()
        self._hc = np.stack(hc, axis=1).ravel()
        self._last = None

    def _trig(self, x):
        # values, Jacobian and Hessian are requested at the same x in turn
        key = x.tobytes()
        if self._last is not None and self._last[0] == key:
            return self._last[1]
        vo, vd = x[self.vo][:, None], x[self.vd][:, None]
        dth = (x[self.to] - x[self.td])[:, None]
        c, s = np.cos(dth), np.sin(dth)
        T = self.alpha * c + self.beta * s
        Tp = -self.alpha * s + self.beta * c
        self._last = (key, (vo, vd, T, Tp))
        return vo, vd, T, Tp

    def jac_structure(self):
        return self._jr, self._jc

    def hess_structure(self):
        return self._hr, self._hc

    def values(self, x):
        vo, vd, T, _ = self._trig(x)
        own2 = self.own_o * vo * vo + self.own_d * vd * vd
        return (self.a * own2 + vo * vd * T - x[self.flow]).ravel()

    def jac_values(self, x):
        vo, vd, T, Tp = self._trig(x)
        d_vo = 2.0 * self.a * vo * self.own_o + vd * T
        d_vd = 2.0 * self.a * vd * self.own_d + vo * T
        d_to = vo * vd * Tp
        return np.stack([d_vo, d_vd, d_to, -d_to, -np.ones_like(T)], axis=2).ravel()

    def hess_values(self, x, lam):
        vo, vd, T, Tp = self._trig(x)
        L = lam.reshape(-1, 4)
        vv = (vo * vd)[:, 0]
        lT = (L * T).sum(1)
        lTp = (L * Tp).sum(1)
        h_vovo = 2.0 * (L * self.a * self.own_o).sum(1)
        h_vdvd = 2.0 * (L * self.a * self.own_d).sum(1)
        cols = [h_vovo, h_vdvd, lT, -vv * lT, -vv * lT, vv * lT,
                vd[:, 0] * lTp, -vd[:, 0] * lTp, vo[:, 0] * lTp, -vo[:, 0] * lTp]
        return np.stack(cols, axis=1).ravel()


class ThermalBlock(ConstraintBlock):
    """Squared thermal limits ``(R v + σ)² - p² - q² >= 0``, one row per terminal."""

    def __init__(self, name, iv, isig, ip, iq, rate):
        self.name = name
        self.iv, self.isig, self.ip, self.iq = (np.asarray(a, dtype=_I) for a in (iv, isig, ip, iq))
        self.rate = np.asarray(rate, dtype=float)
        self.size = len(self.iv)
        self.lb = np.zeros(self.size)
        self.ub = np.full(self.size, np.inf)
        r = np.arange(self.size)
        self._jr = np.concatenate([r, r, r, r])
        self._jc = np.concatenate([self.iv, self.isig, self.ip, self.iq])
        vs_r, vs_c = _lower(self.iv, self.isig)
        self._hr = np.concatenate([self.iv, vs_r, self.isig, self.ip, self.iq])
        self._hc = np.concatenate([self.iv, vs_c, self.isig, self.ip, self.iq])

    def jac_structure(self):
        return self._jr, self._jc

    def hess_structure(self):
        return self._hr, self._hc

    def values(self, x):
        u = self.rate * x[self.iv] + x[self.isig]
        return u * u - x[self.ip] ** 2 - x[self.iq] ** 2

    def jac_values(self, x):
        u = self.rate * x[self.iv] + x[self.isig]
        return np.concatenate([2 * self.rate * u, 2 * u, -2 * x[self.ip], -2 * x[self.iq]])

    def hess_values(self, x, lam):
        R = self.rate
        return np.concatenate([2 * R * R * lam, 2 * R * lam, 2 * lam, -2 * lam, -2 * lam])


class ProductCapBlock(ConstraintBlock):
    """Relaxed complementarity rows ``x_a · (s·x_b + o) <= cap`` (rows are >= -inf)."""

    def __init__(self, name, ia, ib, sign, offset, cap):
        self.name = name
        self.ia = np.asarray(ia, dtype=_I)
        self.ib = np.asarray(ib, dtype=_I)
        self.sign = np.asarray(sign, dtype=float)
        self.offset = np.asarray(offset, dtype=float)
        self.size = len(self.ia)
        self.lb = np.full(self.size, -np.inf)
        self.ub = np.asarray(cap, dtype=float).copy()
        r = np.arange(self.size)
        self._jr = np.concatenate([r, r])
        self._jc = np.concatenate([self.ia, self.ib])
        self._hr, self._hc = _lower(self.ia, self.ib)

    def jac_structure(self):
        return self._jr, self._jc

    def hess_structure(self):
        return self._hr, self._hc

    def values(self, x):
        return x[self.ia] * (self.sign * x[self.ib] + self.offset)

    def jac_values(self, x):
        return np.concatenate([self.sign * x[self.ib] + self.offset, self.sign * x[self.ia]])

    def hess_values(self, x, lam):
        return self.sign * lam
