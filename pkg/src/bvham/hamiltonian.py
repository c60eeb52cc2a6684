"""Hamiltonian evaluation, the trace r(t) along (xbar, q) and its regularity verdicts."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .multifun import Arc, Multifunction, singleton_family, callback_family
from .setvalued import CompactSet, nearest_point, support_function
from .variation import M_BALL, N_TUBE, CumulativeVariation, _tube_samples, cumulative_variation

__all__ = [
    "eval_H",
    "HamiltonianTrace",
    "trace",
    "BVReport",
    "bv_verdict",
    "lagrangian_multifunction",
    "lagrangian_variation",
    "zero_staircase",
    "write_trace_csv",
]

BV_TOL = 1e-3
TOL_LIMIT = 1e-6
_GOLDEN = (np.sqrt(5) - 1) / 2


def _golden_max(phi, a, b, tol=1e-12, max_iter=200):
    """Maximize a concave function along the segment [a, b]; returns (value, point)."""
    lo, hi = 0.0, 1.0
    c, d = hi - _GOLDEN * (hi - lo), lo + _GOLDEN * (hi - lo)
    fc, fd = phi(a + c * (b - a)), phi(a + d * (b - a))
    for _ in range(max_iter):
        if hi - lo < tol:
            break
        if fc >= fd:
            hi, d, fd = d, c, fc
            c = hi - _GOLDEN * (hi - lo)
            fc = phi(a + c * (b - a))
        else:
            lo, c, fc = c, d, fd
            d = lo + _GOLDEN * (hi - lo)
            fd = phi(a + d * (b - a))
    s = 0.5 * (lo + hi)
    pt = a + s * (b - a)
    return phi(pt), pt


def _edges(V: CompactSet):
    verts = V.vertices
    if len(verts) < 2:
        return []
    if V.dim == 1:
        order = np.argsort(verts[:, 0])
        return [(verts[order[0]], verts[order[-1]])]
    geo = V._geometry
    if geo.rank == 1:
        return [(verts[0], verts[-1])]
    if geo.rank == 2:
        from scipy.spatial import ConvexHull
        ch = ConvexHull(geo.coords)
        idx = ch.vertices
        pts = V.points[idx]
        return [(pts[i], pts[(i + 1) % len(pts)]) for i in range(len(pts))]
    return [(verts[i], verts[j]) for i in range(len(verts)) for j in range(i + 1, len(verts))]


def eval_H(F: Multifunction, L: Optional[Callable], lam, t, x, p, check=True, V=None):
    """H = max over v in F(t, x) of p.v - lam L(t, x, v), with an attaining v."""
    p = np.atleast_1d(np.asarray(p, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if V is None:
        V = F(t, x, check=check)
    if L is None or lam == 0:
        return support_function(V, p)

    def phi(v):
        return float(p @ v - lam * L(t, x, v))

    pts = V.vertices if V.hull else V.points
    vals = np.array([phi(v) for v in pts])
    best = int(np.argmax(vals))
    top, arg = float(vals[best]), pts[best].copy()
    if not V.hull:
        return top, arg
    for a, b in _edges(V):
        val, pt = _golden_max(phi, a, b)
        if val > top + 1e-14:
            top, arg = val, pt
    if V.dim >= 2:  # interior maxima: projected ascent from the best boundary point
        step = 0.5
        for _ in range(200):
            gv = np.array([(phi(arg + e) - phi(arg - e)) / 2e-7 for e in 1e-7 * np.eye(V.dim)])
            cand = nearest_point(arg + step * gv, V)
            val = phi(cand)
            if val > top + 1e-15:
                top, arg = val, cand
            else:
                step *= 0.5
                if step < 1e-10:
                    break
    return top, arg


@dataclass
class HamiltonianTrace:
    grid: np.ndarray
    times: np.ndarray
    values: np.ndarray
    r_S: float
    r_T: float
    variation: CumulativeVariation
    endpoint_limits: tuple
    endpoint_certified: tuple
    lam: float = 1.0

    def as_arc(self) -> Arc:
        v = np.append(self.values, self.values[-1])
        return Arc(self.grid, v, "left")

    def __call__(self, t):
        """r at t: cell value on the open interior, extrapolated values at S and T."""
        if t <= self.grid[0]:
            return self.r_S
        if t >= self.grid[-1]:
            return self.r_T
        j = int(np.clip(np.searchsorted(self.grid, t, side="right") - 1, 0, len(self.values) - 1))
        return float(self.values[j])

    @property
    def total_variation(self):
        return float(self.variation.values[-1])

    def jumps(self):
        """(t_j, r_j - r_{j-1}) at interior knots."""
        return list(zip(self.grid[1:-1], np.diff(self.values)))


def _probe_limit(fn, t, side, span, tol_limit, max_refine=40):
    sign = 1.0 if side == "right" else -1.0
    h = span / 8.0
    prev = fn(t + sign * h)
    for _ in range(max_refine):
        h *= 0.5
        cur = fn(t + sign * h)
        if abs(cur - prev) < tol_limit:
            return cur, True
        prev = cur
    return cur, False


def trace(F: Multifunction, L, lam, xbar: Arc, q: Arc, tol_limit=TOL_LIMIT, correction=None) -> HamiltonianTrace:
    """r(t) = H_lam(t, xbar(t), q(t)) at cell midpoints, plus its variation and endpoint limits.

    ``correction`` (one value per cell) is added to r; penalized runs use it
    to subtract the state costs and the drift of the tube centre.
    """
    g = xbar.grid
    mids = xbar.midpoints
    r = np.array([eval_H(F, L, lam, t, xbar(t), q(t), check=False)[0] for t in mids])
    c = np.zeros(len(r)) if correction is None else np.asarray(correction, dtype=float)
    r = r + c
    if len(r) >= 2:
        r_S, r_T = 1.5 * r[0] - 0.5 * r[1], 1.5 * r[-1] - 0.5 * r[-2]
    else:
        r_S = r_T = float(r[0])
    S, T = float(g[0]), float(g[-1])
    # time limits of H with (x, q) held at the first and last samples of r
    xS, xT, qS, qT = xbar(mids[0]), xbar(mids[-1]), q(mids[0]), q(mids[-1])
    limS, okS = _probe_limit(lambda s: eval_H(F, L, lam, s, xS, qS, check=False)[0], S, "right", T - S,
                             tol_limit)
    limT, okT = _probe_limit(lambda s: eval_H(F, L, lam, s, xT, qT, check=False)[0], T, "left", T - S,
                             tol_limit)
    limS, limT = limS + c[0], limT + c[-1]
    stair = np.append(r, r[-1])
    ra = Arc(g, stair, "left")
    G = singleton_family(ra, (S, T))
    eta = cumulative_variation(G, 0.0, base_cells=len(g) - 1, refine_levels=0) \
        if _uniform(g) else _staircase_on(g, stair)
    return HamiltonianTrace(np.asarray(g), mids, r, float(r_S), float(r_T), eta, (limS, limT),
                            (okS, okT), float(lam))


def _uniform(g):
    d = np.diff(g)
    return np.allclose(d, d[0], rtol=1e-12, atol=0)


def _staircase_on(knots, vals):
    inc = np.abs(np.diff(vals))
    return CumulativeVariation(knots, np.concatenate([[0.0], np.cumsum(inc)]))


def zero_staircase(S, T):
    return CumulativeVariation(np.array([S, T]), np.zeros(2), normalized=True)


def lagrangian_multifunction(L, horizon, dim, velocities, xbar=None, delta_bar=np.inf):
    """Singleton multifunction t -> {L(t, x, a)} with velocities a as the parameter set."""
    V = CompactSet(np.atleast_2d(velocities), hull=False)

    def ev(t, x, a):
        return CompactSet([[float(L(t, x, a))]])
    return callback_family(ev, horizon, 1, param_set=V, xbar=xbar, delta_bar=delta_bar,
                           state_dependent=True, name="lagrangian")


def lagrangian_variation(L, horizon, dim, velocities, xbar, delta, eps=None, refine_levels=6,
                         **kw) -> CumulativeVariation:
    """Cumulative variation of t -> L(t, ., .) along xbar, sup over the given velocities."""
    if L is None:
        return zero_staircase(*horizon)
    G = lagrangian_multifunction(L, horizon, dim, velocities, xbar, max(delta, 0.0))
    if xbar is None:
        G.state_dependent = False
    vel = np.atleast_2d(velocities)
    n_tube, m_ball = kw.get("n_tube", N_TUBE), kw.get("m_ball", M_BALL)

    def term(t0, t1):  # scalar values: d_H of singletons is |L(t1) - L(t0)|
        best = 0.0
        for x in _tube_samples(G, t0, t1, delta, n_tube, m_ball):
            for a in vel:
                best = max(best, abs(float(L(t1, x, a)) - float(L(t0, x, a))))
        return best
    return cumulative_variation(G, delta, eps, refine_levels, cell_term=term, **kw)


@dataclass
class BVReport:
    min_margin: float
    worst_pair: tuple
    staircase_margin: float
    endpoint_gaps: tuple
    endpoint_pair_margin: float
    bv_tol: float
    n_pairs: int
    details: dict = field(default_factory=dict)

    @property
    def interior_pass(self):
        return self.min_margin >= -self.bv_tol

    @property
    def endpoint_pass(self):
        return max(self.endpoint_gaps) <= self.bv_tol

    @property
    def passed(self):
        return self.interior_pass and self.endpoint_pass

    def as_dict(self):
        return {"min_margin": self.min_margin, "worst_pair": list(self.worst_pair),
                "staircase_margin": self.staircase_margin,
                "endpoint_gaps": list(self.endpoint_gaps),
                "endpoint_pair_margin": self.endpoint_pair_margin,
                "bv_tol": self.bv_tol, "n_pairs": self.n_pairs, "passed": self.passed}


def _pair_margins(r, eF, eL, q_inf, lam):
    dr = np.abs(r[None, :] - r[:, None])
    rhs = q_inf * (eF[None, :] - eF[:, None]) + lam * (eL[None, :] - eL[:, None])
    return rhs - dr


def bv_verdict(tr: HamiltonianTrace, eta_F_star: CumulativeVariation,
               eta_L_star: Optional[CumulativeVariation], q_inf_norm, lam, bv_tol=BV_TOL,
               max_points=600) -> BVReport:
    """Check |r(t)-r(s)| <= |q| (eta_F*(t)-eta_F*(s)) + lam (eta_L*(t)-eta_L*(s)) on interior pairs."""
    S, T = float(tr.grid[0]), float(tr.grid[-1])
    eta_L_star = zero_staircase(S, T) if eta_L_star is None else eta_L_star
    idx = np.arange(len(tr.times))
    if len(idx) > max_points:
        idx = np.unique(np.linspace(0, len(idx) - 1, max_points).round().astype(int))
    ts, r = tr.times[idx], tr.values[idx]
    eF, eL = eta_F_star.on(ts), eta_L_star.on(ts)
    M = _pair_margins(r, eF, eL, q_inf_norm, lam)
    iu = np.triu_indices(len(ts), 1)
    m = M[iu]
    w = int(np.argmin(m)) if len(m) else 0
    min_margin = float(m[w]) if len(m) else 0.0
    worst = (float(ts[iu[0][w]]), float(ts[iu[1][w]])) if len(m) else (S, T)
    # staircase domination between consecutive knots
    kn = tr.grid
    var_inc = np.diff(tr.variation.on(kn))
    bound_inc = q_inf_norm * np.diff(eta_F_star.on(kn)) + lam * np.diff(eta_L_star.on(kn))
    stair = float(np.min(bound_inc[1:-1] - var_inc[1:-1])) if len(kn) > 3 else 0.0
    # endpoints: continuity of r at S and T, and pairs touching S or T (reported only)
    gaps = (abs(tr.r_S - tr.endpoint_limits[0]), abs(tr.r_T - tr.endpoint_limits[1]))
    ends = np.array([S, T])
    rE = np.array([tr.r_S, tr.r_T])
    allt = np.concatenate([ts, ends])
    allr = np.concatenate([r, rE])
    ME = _pair_margins(allr, eta_F_star.on(allt), eta_L_star.on(allt), q_inf_norm, lam)
    k = len(ts)
    end_rows = np.concatenate([ME[k:, :k].ravel(), ME[:k, k:].ravel()])
    end_margin = float(np.min(end_rows)) if len(end_rows) else 0.0
    return BVReport(min_margin, worst, stair, gaps, end_margin, bv_tol, len(m))


def write_trace_csv(path, tr: HamiltonianTrace, eta_F_star, eta_L_star, q_inf_norm, lam):
    eta_L_star = zero_staircase(tr.grid[0], tr.grid[-1]) if eta_L_star is None else eta_L_star
    eF, eL = eta_F_star.on(tr.times), eta_L_star.on(tr.times)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "r", "eta_F_star", "eta_L_star", "bound_margin"])
        for j, t in enumerate(tr.times):
            if j == 0:
                margin = ""
            else:
                rhs = q_inf_norm * (eF[j] - eF[j - 1]) + lam * (eL[j] - eL[j - 1])
                margin = repr(float(rhs - abs(tr.values[j] - tr.values[j - 1])))
            w.writerow([repr(float(t)), repr(float(tr.values[j])), repr(float(eF[j])),
                        repr(float(eL[j])), margin])
