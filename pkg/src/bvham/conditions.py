"""Residual checks of the necessary conditions, the nondegeneracy test and the degenerate triple."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hamiltonian import eval_H
from .multifun import Arc
from .setvalued import CompactSet, distance_to_set
from .trajectory import EndpointSet, Problem, fd_gradient
from .transcription import MultiplierSet

__all__ = [
    "ConditionReport",
    "check_theorem1",
    "NondegeneracyReport",
    "check_nondegeneracy",
    "trivial_multiplier",
]

KKT_TOL = 1e-6
NONTRIV_TOL = 1e-12
ND_TOL = 1e-8
IP_MARGIN = 1e-6
_FACE_TOL = 1e-9


@dataclass
class ConditionReport:
    """name -> value, tolerance, verdict; informational entries do not affect ``passed``."""

    entries: dict = field(default_factory=dict)

    def add(self, name, value, tol, passed=None, informational=False, **extra):
        value = float(value)
        ok = (value <= tol) if passed is None else bool(passed)
        self.entries[name] = {"value": value, "tol": float(tol), "passed": ok,
                              "informational": informational, **extra}

    def __getitem__(self, name):
        return self.entries[name]

    def passed_subset(self, names):
        return all(self.entries[n]["passed"] for n in names)

    @property
    def passed(self):
        return all(e["passed"] for e in self.entries.values() if not e["informational"])

    def to_dict(self):
        return {"conditions": self.entries, "passed": self.passed}


class _Frozen:
    """F and L read at stage times when the multipliers come from a left-sampled problem."""

    def __init__(self, P: Problem, M: MultiplierSet):
        self.P, self.M = P, M
        self.sg = None if M.stage_grid is None else np.asarray(M.stage_grid, dtype=float)

    def time(self, s):
        if self.sg is None:
            return s
        j = int(np.clip(np.searchsorted(self.sg, s, side="right") - 1, 0, len(self.sg) - 2))
        return float(self.sg[j])

    def L(self):
        if self.P.L is None:
            return None
        return lambda t, x, v: self.P.L(self.time(t), x, v)

    def F(self, s, x):
        return self.P.F(self.time(s), x, check=False)

    def H(self, s, x, q, lam):
        return eval_H(self.P.F, self.L(), lam, self.time(s), x, q, check=False, V=self.F(s, x))[0]


def _tube_term(M, t, x):
    if M.xref is None:
        return 0.0
    d = np.atleast_1d(x) - M.xref(t)
    return float(d @ d)


def check_theorem1(P: Problem, xbar: Arc, M: MultiplierSet, tol=KKT_TOL, alpha=0.0) -> ConditionReport:
    """Residuals of nontriviality, adjoint inclusion, Weierstrass, transversality and gamma support.

    When M carries a stage grid, F and L are read at the left end of each cell
    (the discrete problem the multipliers came from) and the tube term of the
    penalized cost is part of the Hamiltonian.
    """
    tol = tol if isinstance(tol, dict) else {k: tol for k in ("ii", "iii", "iv", "v")}
    fz = _Frozen(P, M)
    lam = M.lam
    g = M.grid
    S, T = g[0], g[-1]
    h = np.diff(g)
    q = M.q
    qv = q.values
    p = M.p.values
    vel = xbar.velocities()
    rep = ConditionReport()
    rep.add("i_nontriviality", M.nontriviality(), NONTRIV_TOL,
            passed=M.nontriviality() > NONTRIV_TOL)

    res_x, res_p, res_w = [], [], []
    for j in range(len(h)):
        staged = fz.sg is not None
        tj = g[j] if staged else 0.5 * (g[j] + g[j + 1])
        xj = xbar.values[j] if staged else xbar(tj)
        qj = qv[j + 1]

        def Haug(s, y):
            return fz.H(s, y, qj, lam) - lam * _tube_term(M, s, y)
        samples = [s for s in tj + h[j] * np.array([0.0, -1.0, 1.0, -2.0, 2.0]) if S <= s <= T]
        grads = np.array([fd_gradient(lambda y: Haug(s, y), xj) for s in samples])
        minus_pdot = -(p[j + 1] - p[j]) / h[j]
        res_x.append(distance_to_set(minus_pdot, CompactSet(grads, hull=len(grads) > 1)))
        faces = []
        for s in samples:
            V = fz.F(s, xj)
            if fz.L() is None or lam == 0:
                pts = V.vertices if V.hull else V.points
                vals = pts @ qj
                top = float(vals.max())
                faces.append(pts[vals >= top - _FACE_TOL * max(1.0, abs(top))])
            else:
                faces.append(eval_H(P.F, fz.L(), lam, fz.time(s), xj, qj, check=False, V=V)[1][None, :])
        face = np.unique(np.vstack(faces), axis=0)
        res_p.append(distance_to_set(vel[j], CompactSet(face, hull=len(face) > 1)))
        Hj = fz.H(tj, xj, qj, lam)
        Lv = 0.0 if fz.L() is None else fz.L()(tj, xj, vel[j])
        res_w.append(max(0.0, Hj - (float(qj @ vel[j]) - lam * Lv)))
    rx, rp = float(np.max(res_x)), float(np.max(res_p))
    rep.add("ii_adjoint", max(rx, rp), tol["ii"], x_component=rx, p_component=rp,
            worst_cell=int(np.argmax(np.maximum(res_x, res_p))))
    rep.add("iii_weierstrass", float(np.max(res_w)), tol["iii"], worst_cell=int(np.argmax(res_w)))

    C = P.C
    if alpha > 0 and C.kind != "fixed-initial":
        C = EndpointSet(C.kind, C.x0, C.x1, C.r0 + (np.sqrt(2) * alpha if C.kind == "product-of-balls" else 0),
                        C.r1 + np.sqrt(2) * alpha)
    g0, g1 = P.ggrad(xbar.values[0], xbar.values[-1])
    xi0 = p[0] - lam * g0
    xi1 = -qv[-1] - lam * g1
    rep.add("iv_transversality", C.normal_residual(xbar.values[0], xbar.values[-1], xi0, xi1), tol["iv"])

    gam_res = 0.0
    supp_res = 0.0
    if P.has_h:
        for j in np.flatnonzero(M.mu_density > 0):
            gam_res = max(gam_res, float(np.linalg.norm(M.gamma[j] - P.hgrad(xbar.values[j]))))
            supp_res = max(supp_res, abs(P.hval(xbar.values[j])))
        for (ta, m), ga in zip(M.mu_atoms, M.atom_gamma):
            if m > 0:
                xa = xbar(ta)
                gam_res = max(gam_res, float(np.linalg.norm(np.atleast_1d(ga) - P.hgrad(xa))))
                supp_res = max(supp_res, abs(P.hval(xa)))
    elif M.mu_total() > 0:
        gam_res = np.inf
    rep.add("v_gamma", gam_res, tol["v"])
    rep.add("measure_support", supp_res, np.inf, informational=True)
    return rep


@dataclass
class NondegeneracyReport:
    value: float
    nondegenerate: bool
    inward_margin: float
    inward_pointing: bool
    h_at_start: float
    nd_tol: float = ND_TOL
    ip_margin: float = IP_MARGIN

    def as_dict(self):
        return dict(self.__dict__)


def check_nondegeneracy(P: Problem, xbar: Arc, M: MultiplierSet, nd_tol=ND_TOL, ip_margin=IP_MARGIN,
                        probes=20) -> NondegeneracyReport:
    """lam + mu((S, T]) and the inward-pointing probe min grad h(x0).v over F(s, x0), s -> S+."""
    if not P.C.initial_fixed:
        raise ValueError("nondegeneracy check needs a fixed initial state")
    if not P.has_h:
        raise ValueError("nondegeneracy check needs a state constraint h")
    value = M.lam + M.mu_after_start()
    x0 = P.C.x0
    S, T = P.horizon
    gh = P.hgrad(x0)
    margin = np.nan
    for k in range(3, 3 + probes):
        s = S + (T - S) * 2.0**-k
        V = P.F(s, x0, check=False)
        pts = V.vertices if V.hull else V.points
        margin = float(np.min(pts @ gh))
    return NondegeneracyReport(float(value), value > nd_tol, margin, margin < -ip_margin,
                               P.hval(x0), nd_tol, ip_margin)


def trivial_multiplier(P: Problem, xbar: Arc) -> MultiplierSet:
    """lam = 0, a unit atom of mu at S with gamma = grad h(x(S)), and p = -grad h(x(S))."""
    if not P.has_h:
        raise ValueError("the degenerate triple needs a state constraint")
    x0 = xbar.values[0]
    if abs(P.hval(x0)) > 1e-12:
        raise ValueError(f"initial state is not on the constraint boundary (h = {P.hval(x0):.3g})")
    gh = P.hgrad(x0)
    N = xbar.n_cells
    p = Arc(xbar.grid, np.tile(-gh, (N + 1, 1)))
    return MultiplierSet(xbar.grid, p, 0.0, np.zeros(N), np.zeros((N, P.dim)),
                         mu_atoms=[(float(xbar.grid[0]), 1.0)], atom_gamma=[gh])
