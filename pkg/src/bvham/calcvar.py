"""Hypothesis checks and a Lipschitz certificate for problems of the calculus of variations.

Problem: minimize the integral of L(t, x, x') over arcs with fixed endpoints.
The certificate reproduces the dual bound chain quantitatively:

    |p(t)| <= k3 + r(t),    |p(t)| <= k2 + k3 + K,

with p = grad_v L along the candidate, r the Hamiltonian over the ball of
radius V_cap (cost multiplier 1), k3 the max of L over unit velocities,
k1, k2 bounds on |p| and |r| over an initial stretch, and K the (BV) sum.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .chain import chain_newton
from .hamiltonian import bv_verdict, lagrangian_variation, trace, zero_staircase
from .multifun import Arc, ball_family
from .setvalued import unit_directions
from .trajectory import fd_gradient
from .variation import normalize

__all__ = [
    "VariationalProblem",
    "solve_variational",
    "HypothesisReport",
    "check_hypotheses",
    "LipschitzCertificate",
    "lipschitz_certificate",
    "certify_theta",
    "EulerStationarityError",
]

CE_TOL = 1e-6
STEP_TOL = 1e-6
DRIFT_TOL = 1e-2
_CHORD_TOL = 1e-10


class EulerStationarityError(RuntimeError):
    def __init__(self, residual, ce_tol):
        super().__init__(f"candidate fails the discrete Euler equation: residual {residual:.3g} > {ce_tol:.3g}")
        self.residual = residual


@dataclass(eq=False)
class VariationalProblem:
    """Integrand L(t, x, v), endpoints and the constants of the growth and (BV) hypotheses.

    theta(r) is the superlinear minorant with L >= theta(|v|) - alpha |x|;
    k_D maps a radius D to a claimed Lipschitz constant of L on D-balls.
    """

    L: Callable
    horizon: tuple
    x0: np.ndarray
    x1: np.ndarray
    L_grad_v: Optional[Callable] = None
    L_grad_x: Optional[Callable] = None
    theta: Optional[Callable] = None
    alpha: float = 0.0
    K: Optional[float] = None
    k_D: dict = field(default_factory=dict)
    delta: float = 0.0
    name: str = ""

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        self.x1 = np.atleast_1d(np.asarray(self.x1, dtype=float))
        if self.x0.shape != self.x1.shape:
            raise ValueError("x0 and x1 must have the same dimension")

    @property
    def dim(self):
        return self.x0.size

    def Lval(self, t, x, v):
        return float(self.L(t, np.atleast_1d(x), np.atleast_1d(v)))

    def grad_v(self, t, x, v):
        if self.L_grad_v is not None:
            return np.atleast_1d(np.asarray(self.L_grad_v(t, x, v), dtype=float))
        return fd_gradient(lambda w: self.Lval(t, x, w), v)

    def grad_x(self, t, x, v):
        if self.L_grad_x is not None:
            return np.atleast_1d(np.asarray(self.L_grad_x(t, x, v), dtype=float))
        return fd_gradient(lambda y: self.Lval(t, y, v), x)

    def cost(self, x: Arc):
        """Midpoint quadrature of the integral along a piecewise-linear arc."""
        v = x.velocities()
        return float(sum(h * self.Lval(tm, x(tm), v[j]) for j, (h, tm) in enumerate(zip(x.steps, x.midpoints))))


def solve_variational(V: VariationalProblem, N, x_init: Optional[Arc] = None, max_iter=50):
    """Newton on the midpoint-quadrature discrete functional with fixed endpoints."""
    S, T = V.horizon
    grid = np.linspace(S, T, int(N) + 1)
    if x_init is None:
        X = V.x0 + (grid - S)[:, None] / (T - S) * (V.x1 - V.x0)
    else:
        X = np.atleast_2d(x_init(grid)).reshape(len(grid), V.dim)
    h = np.diff(grid)
    tm = 0.5 * (grid[:-1] + grid[1:])

    def cell(j, a, b):
        return h[j] * V.Lval(tm[j], 0.5 * (a + b), (b - a) / h[j])

    free = np.ones(len(grid), dtype=bool)
    free[[0, -1]] = False
    X, it, gnorm = chain_newton(cell, lambda j, a: 0.0, X, free, max_iter=max_iter, gtol=1e-12)
    return Arc(grid, X, "linear")


def euler_residuals(V: VariationalProblem, x: Arc):
    """p_j = grad_v L on cell j, the same p integrated from the discrete Euler equation, and the residual."""
    g, h, tm = x.grid, x.steps, x.midpoints
    v = x.velocities()
    xm = np.array([x(t) for t in tm])
    p = np.array([V.grad_v(tm[j], xm[j], v[j]) for j in range(len(h))])
    lx = np.array([V.grad_x(tm[j], xm[j], v[j]) for j in range(len(h))])
    p_int = np.empty_like(p)
    p_int[0] = p[0]
    for j in range(1, len(h)):
        p_int[j] = p_int[j - 1] + 0.5 * (h[j - 1] * lx[j - 1] + h[j] * lx[j])
    res = np.zeros(len(h))
    for j in range(1, len(h)):
        d = p[j] - p[j - 1] - 0.5 * (h[j - 1] * lx[j - 1] + h[j] * lx[j])
        res[j] = float(np.linalg.norm(d)) / (0.5 * (h[j - 1] + h[j]))
    return p, p_int, res


def certify_theta(theta, jmax=20):
    """theta increasing and convex with theta(r)/r increasing on r = 2**j, j = 0..jmax."""
    r = 2.0 ** np.arange(jmax + 1)
    th = np.array([float(theta(s)) for s in r])
    ratio = th / r
    inc = bool(np.all(np.diff(th) > 0))
    # convexity on a doubling sequence: slopes between consecutive probes increase
    slopes = np.diff(th) / np.diff(r)
    conv = bool(np.all(np.diff(slopes) >= -1e-12 * np.abs(slopes[1:])))
    sup = bool(np.all(np.diff(ratio) > 0))
    return {"increasing": inc, "convex": conv, "superlinear": sup, "ok": inc and conv and sup,
            "ratio_last": float(ratio[-1])}


def _max_abs(xbar: Arc):
    return float(np.max(np.linalg.norm(xbar.values, axis=1)))


def velocity_cap(V: VariationalProblem, xbar: Arc):
    """Smallest r >= sup|xbar'| with theta(r) - alpha max|xbar| above the mean cost of xbar.

    Velocities above the cap cost more per unit time than the candidate's
    average, which is what the coercivity argument uses to exclude them.
    Returns (cap, certified).
    """
    slope = float(np.max(np.linalg.norm(xbar.velocities(), axis=1)))
    if V.theta is None:
        return max(2 * slope, 1.0), False
    S, T = V.horizon
    level = V.alpha * _max_abs(xbar) + max(V.cost(xbar), 0.0) / (T - S)
    lo = max(slope, 0.0)
    if float(V.theta(lo)) > level:
        return max(lo, 1e-12), True
    hi = max(2 * lo, 1.0)
    for _ in range(200):
        if float(V.theta(hi)) > level:
            break
        lo, hi = hi, 2 * hi
    else:
        return hi, False
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if float(V.theta(mid)) > level:
            hi = mid
        else:
            lo = mid
    return hi, True


def _velocity_ball(n, cap, rings=8, count=16):
    dirs = unit_directions(n, count)
    radii = cap * np.arange(1, rings + 1) / rings
    pts = np.vstack([np.zeros((1, n))] + [r * dirs for r in radii])
    return pts


@dataclass
class HypothesisReport:
    convex: bool
    convex_witness: Optional[tuple]
    minorant: bool
    minorant_witness: Optional[tuple]
    theta: dict
    lipschitz: dict
    bv_sum: float
    K: Optional[float]
    V_cap: float
    V_cap_certified: bool

    @property
    def bv_ok(self):
        return self.K is None or self.bv_sum <= self.K + 1e-9

    @property
    def passed(self):
        lip_ok = all(d["ok"] for d in self.lipschitz.values())
        return self.convex and self.minorant and self.theta.get("ok", False) and lip_ok and self.bv_ok

    def as_dict(self):
        return {"convex": self.convex, "convex_witness": _jsonable(self.convex_witness),
                "minorant": self.minorant, "minorant_witness": _jsonable(self.minorant_witness),
                "theta": self.theta, "lipschitz": {str(k): v for k, v in self.lipschitz.items()},
                "bv_sum": self.bv_sum, "K": self.K, "bv_ok": self.bv_ok, "V_cap": self.V_cap,
                "V_cap_certified": self.V_cap_certified, "passed": self.passed}


def _jsonable(obj):
    if obj is None:
        return None
    if isinstance(obj, (list, tuple)):
        return [_jsonable(o) for o in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def check_hypotheses(V: VariationalProblem, xbar: Arc, samples=400, rng=None, radii=None,
                     eps=None, refine_levels=2) -> HypothesisReport:
    """Random-chord convexity, the superlinear minorant, Lipschitz estimates and the (BV) sum."""
    rng = np.random.default_rng(0) if rng is None else rng
    S, T = V.horizon
    n = V.dim
    cap, cap_ok = velocity_cap(V, xbar)
    span = max(10 * cap, 1.0)

    def sample_tx():
        t = rng.uniform(S, T)
        x = xbar(t) + V.delta * rng.uniform(-1, 1, n)
        return t, x

    convex, cw = True, None
    for _ in range(samples):
        t, x = sample_tx()
        a, b = rng.uniform(-span, span, n), rng.uniform(-span, span, n)
        s = rng.uniform()
        lhs = V.Lval(t, x, (1 - s) * a + s * b)
        rhs = (1 - s) * V.Lval(t, x, a) + s * V.Lval(t, x, b)
        if lhs > rhs + _CHORD_TOL * max(1.0, abs(rhs)):
            convex, cw = False, (float(t), x, a, b, float(s))
            break

    theta_rep = certify_theta(V.theta) if V.theta is not None else {"ok": False, "reason": "no minorant given"}
    minorant, mw = V.theta is not None, None
    if V.theta is not None:
        scales = 2.0 ** np.arange(-2, 8)
        for _ in range(samples):
            t, x = sample_tx()
            v = rng.standard_normal(n)
            v *= scales[rng.integers(len(scales))] / max(np.linalg.norm(v), 1e-300)
            val = V.Lval(t, x, v)
            bound = float(V.theta(np.linalg.norm(v))) - V.alpha * float(np.linalg.norm(x))
            if val < bound - 1e-12 * max(1.0, abs(bound)):
                minorant, mw = False, (float(t), x, v, val, bound)
                break

    radii = sorted(V.k_D) if radii is None and V.k_D else (radii or [max(1.0, _max_abs(xbar) + V.delta, cap)])
    lip = {}
    for D in radii:
        est = 0.0
        for _ in range(samples):
            t = rng.uniform(S, T)
            z = rng.uniform(-1, 1, 2 * n) * D / np.sqrt(2 * n)
            w = z + 1e-3 * D * rng.standard_normal(2 * n)
            w *= min(1.0, D / max(np.linalg.norm(w), 1e-300))
            d = float(np.linalg.norm(z - w))
            if d == 0:
                continue
            est = max(est, abs(V.Lval(t, z[:n], z[n:]) - V.Lval(t, w[:n], w[n:])) / d)
        claim = V.k_D.get(D)
        lip[D] = {"estimate": est, "claimed": claim,
                  "ok": True if claim is None else est <= claim * (1 + 1e-6)}

    N = xbar.n_cells
    eps = (T - S) / N if eps is None else eps
    vel = _velocity_ball(n, cap)
    eta = lagrangian_variation(V.L, (S, T), n, vel, xbar, V.delta, eps, refine_levels, base_cells=N)
    return HypothesisReport(convex, cw, minorant, mw, theta_rep, lip, float(eta.values[-1]), V.K, cap, cap_ok)


@dataclass
class LipschitzCertificate:
    k1: float
    k2: float
    k3: float
    K: float
    V_cap: float
    sup_slope: float
    verdict: str
    details: dict = field(default_factory=dict)

    @property
    def certified(self):
        return self.verdict == "Lipschitz certified"

    def as_dict(self):
        out = {"k1": self.k1, "k2": self.k2, "k3": self.k3, "K": self.K, "V_cap": self.V_cap,
               "sup_slope": self.sup_slope, "verdict": self.verdict}
        out["details"] = _jsonable_dict(self.details)
        return out

    def to_json(self):
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def _jsonable_dict(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out[k] = _jsonable_dict(v)
        else:
            out[k] = _jsonable(v)
    return out


def lipschitz_certificate(V: VariationalProblem, xbar: Optional[Arc] = None, levels=(64, 128, 256),
                          ce_tol=CE_TOL, step_tol=STEP_TOL, drift_tol=DRIFT_TOL, probes=400, rng=None,
                          refine_levels=2) -> LipschitzCertificate:
    """Run the bound chain on the candidate (solved on each grid level when not supplied)."""
    rng = np.random.default_rng(1) if rng is None else rng
    S, T = V.horizon
    n = V.dim
    slopes = []
    sol = None
    for N in levels:
        x = solve_variational(V, N, x_init=sol)
        slopes.append(float(np.max(np.linalg.norm(x.velocities(), axis=1))))
        sol = x
    drift = max((abs(b - a) / max(abs(b), 1e-12) for a, b in zip(slopes[:-1], slopes[1:])), default=0.0)
    xbar = sol if xbar is None else xbar

    p, p_int, eres = euler_residuals(V, xbar)
    euler = float(np.max(eres))
    if euler > ce_tol:
        raise EulerStationarityError(euler, ce_tol)
    identity = float(np.max(np.linalg.norm(p - p_int, axis=1)))

    cap, cap_ok = velocity_cap(V, xbar)
    F = ball_family(lambda t: cap, (S, T), n)
    g = xbar.grid
    q = Arc(g, np.vstack([p, p[-1:]]), "left")
    Lfun = lambda t, x, v: V.Lval(t, x, v)
    tr = trace(F, Lfun, 1.0, xbar, q)
    r = tr.values
    tm = xbar.midpoints
    pn = np.linalg.norm(p, axis=1)

    dirs = unit_directions(n, 32)
    k3 = max(V.Lval(t, xbar(t), d) for t in tm for d in np.vstack([dirs, np.zeros((1, n))]))
    first = tm <= S + 0.25 * (T - S)
    k1 = float(np.max(pn[first]))
    k2 = float(np.max(np.abs(r[first])))

    vel = _velocity_ball(n, cap)
    eta_L = lagrangian_variation(V.L, (S, T), n, vel, xbar, V.delta, (T - S) / xbar.n_cells, refine_levels,
                                 base_cells=xbar.n_cells)
    K_meas = float(eta_L.values[-1])
    K = K_meas if V.K is None else float(V.K)

    tol_b = 1e-9 * max(1.0, float(np.max(pn)))
    dual = float(np.max(pn - (k3 + r)))
    chain = float(np.max(pn) - (k2 + k3 + K))

    eL = normalize(eta_L)
    dr = np.abs(np.diff(r))
    dEta = np.diff(eL.on(tm))
    step_margin = float(np.min(dEta - dr)) if len(dr) else 0.0
    worst_step = int(np.argmin(dEta - dr)) if len(dr) else 0
    bv = bv_verdict(tr, zero_staircase(S, T), eL, 0.0, 1.0)

    # Weierstrass globalization: the cap-ball condition extends to all velocities
    viol = 0
    worst_w = 0.0
    vbar = xbar.velocities()
    for _ in range(probes):
        j = int(rng.integers(len(tm)))
        w = rng.standard_normal(n)
        w *= rng.uniform(0, 10 * cap) / max(np.linalg.norm(w), 1e-300)
        gap = (p[j] @ w - V.Lval(tm[j], xbar(tm[j]), w)) - (p[j] @ vbar[j] - V.Lval(tm[j], xbar(tm[j]), vbar[j]))
        worst_w = max(worst_w, float(gap))
        if gap > 1e-9 * max(1.0, abs(float(p[j] @ w))):
            viol += 1

    ok = (drift < drift_tol and dual <= tol_b and chain <= tol_b and step_margin >= -step_tol
          and viol == 0 and identity <= ce_tol)
    details = {
        "levels": list(levels), "sup_slopes": slopes, "slope_drift": drift,
        "euler_residual": euler, "p_identity_residual": identity,
        "dual_bound_margin": -dual, "chain_bound_margin": -chain, "p_sup": float(np.max(pn)),
        "K_measured": K_meas, "V_cap_certified": cap_ok,
        "step_margin": step_margin, "worst_step_time": float(g[worst_step + 1]) if len(dr) else None,
        "bv_pairs": bv.as_dict(), "weierstrass_violations": viol, "weierstrass_worst_gap": worst_w,
    }
    verdict = "Lipschitz certified" if ok else "not certified"
    return LipschitzCertificate(k1, k2, float(k3), K, cap, slopes[-1], verdict, details)
