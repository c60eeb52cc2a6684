"""Control problems with a velocity multifunction, trajectory defects and Filippov repair."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .multifun import Arc, Multifunction, TubeViolation
from .setvalued import distance_to_set, nearest_point

__all__ = [
    "EndpointSet",
    "Problem",
    "defect",
    "cell_defects",
    "filippov_approximate",
    "gronwall_constant",
    "FeasibilityReport",
    "feasibility_report",
    "write_arc_csv",
    "read_arc_csv",
    "fd_gradient",
]

FEAS_TOL = 1e-7
PROJ_TOL = 1e-9
_FD_STEP = 1e-6


def fd_gradient(f, x, step=_FD_STEP):
    """Central-difference gradient of a scalar function of an n-vector."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step * max(1.0, abs(x[i]))
        g[i] = (f(x + e) - f(x - e)) / (2 * e[i])
    return g


@dataclass(frozen=True)
class EndpointSet:
    """Endpoint constraint (x(S), x(T)) in C.

    kinds: ``fixed-initial`` (x(S)=x0), ``fixed-both`` (x(S)=x0, x(T)=x1),
    ``product-of-balls`` (x(S) in B(x0, r0), x(T) in B(x1, r1)).
    """

    kind: str
    x0: np.ndarray
    x1: Optional[np.ndarray] = None
    r0: float = 0.0
    r1: float = 0.0

    KINDS = ("fixed-initial", "fixed-both", "product-of-balls")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unsupported endpoint set {self.kind!r}; expected one of {self.KINDS}")
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))
        if self.kind != "fixed-initial":
            if self.x1 is None:
                raise ValueError(f"endpoint set {self.kind!r} needs x1")
            object.__setattr__(self, "x1", np.atleast_1d(np.asarray(self.x1, dtype=float)))
        if self.kind == "fixed-both":
            object.__setattr__(self, "r0", 0.0)
            object.__setattr__(self, "r1", 0.0)

    @property
    def initial_fixed(self):
        return self.kind in ("fixed-initial", "fixed-both") or self.r0 == 0

    @property
    def final_fixed(self):
        return self.kind == "fixed-both" or (self.kind == "product-of-balls" and self.r1 == 0)

    def residual(self, a, b):
        """Distance of (a, b) from C."""
        a, b = np.atleast_1d(a), np.atleast_1d(b)
        d0 = max(float(np.linalg.norm(a - self.x0)) - self.r0, 0.0)
        if self.kind == "fixed-initial":
            return d0
        d1 = max(float(np.linalg.norm(b - self.x1)) - self.r1, 0.0)
        return float(np.hypot(d0, d1))

    def normal_residual(self, a, b, z0, z1, tol=1e-9):
        """Distance from (z0, z1) to the normal cone of C at (a, b)."""
        z0, z1 = np.atleast_1d(z0), np.atleast_1d(z1)
        return float(np.hypot(self._ball_normal(a, self.x0, self.r0, z0, tol, free=self.initial_fixed),
                              self._ball_normal(b, self.x1, self.r1, z1, tol,
                                                free=self.final_fixed, absent=self.kind == "fixed-initial")))

    @staticmethod
    def _ball_normal(x, c, r, z, tol, free, absent=False):
        if absent:  # unconstrained component: the cone is {0}
            return float(np.linalg.norm(z))
        if free:  # a point: the cone is everything
            return 0.0
        d = np.atleast_1d(x) - c
        nd = float(np.linalg.norm(d))
        if nd < r - tol:
            return float(np.linalg.norm(z))
        u = d / nd
        s = max(float(z @ u), 0.0)
        return float(np.linalg.norm(z - s * u))


@dataclass(eq=False)
class Problem:
    """Minimize g(x(S), x(T)) + int L over F-trajectories with h(x) <= 0 and endpoints in C."""

    F: Multifunction
    g: Callable
    C: EndpointSet
    L: Optional[Callable] = None
    h: Optional[Callable] = None
    g_grad: Optional[Callable] = None
    h_grad: Optional[Callable] = None
    L_grad_x: Optional[Callable] = None
    L_grad_v: Optional[Callable] = None
    k_h: float = 1.0
    name: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self):
        return self.F.horizon

    @property
    def xbar(self):
        return self.F.xbar

    @property
    def dim(self):
        return self.F.dim

    @property
    def has_L(self):
        return self.L is not None

    @property
    def has_h(self):
        return self.h is not None

    def Lval(self, t, x, v):
        return 0.0 if self.L is None else float(self.L(t, x, v))

    def Lgx(self, t, x, v):
        if self.L is None:
            return np.zeros(self.dim)
        if self.L_grad_x is not None:
            return np.atleast_1d(np.asarray(self.L_grad_x(t, x, v), dtype=float))
        return fd_gradient(lambda y: self.L(t, y, v), x)

    def Lgv(self, t, x, v):
        if self.L is None:
            return np.zeros(self.dim)
        if self.L_grad_v is not None:
            return np.atleast_1d(np.asarray(self.L_grad_v(t, x, v), dtype=float))
        return fd_gradient(lambda w: self.L(t, x, w), v)

    def hval(self, x):
        return -np.inf if self.h is None else float(self.h(np.atleast_1d(x)))

    def hgrad(self, x):
        if self.h is None:
            return np.zeros(self.dim)
        if self.h_grad is not None:
            return np.atleast_1d(np.asarray(self.h_grad(np.atleast_1d(x)), dtype=float))
        return fd_gradient(self.h, x)

    def ggrad(self, a, b):
        """(dg/dx0, dg/dx1)."""
        a, b = np.atleast_1d(a).astype(float), np.atleast_1d(b).astype(float)
        if self.g_grad is not None:
            g0, g1 = self.g_grad(a, b)
            return np.atleast_1d(np.asarray(g0, dtype=float)), np.atleast_1d(np.asarray(g1, dtype=float))
        return fd_gradient(lambda y: self.g(y, b), a), fd_gradient(lambda y: self.g(a, y), b)

    def cost(self, x: Arc):
        """g plus midpoint quadrature of L along a piecewise-linear arc."""
        c = float(self.g(x.values[0], x.values[-1]))
        if self.L is not None:
            v = x.velocities()
            for j, tm in enumerate(x.midpoints):
                c += x.steps[j] * self.Lval(tm, x(tm), v[j])
        return c

    def check_structure(self, samples=20, rng=None):
        """Spot checks of the h Lipschitz bound and convexity of L in v on chords."""
        rng = np.random.default_rng(0) if rng is None else rng
        S, T = self.horizon
        out = {"h_lipschitz_ok": True, "L_convex_ok": True, "witness": None}
        for _ in range(samples):
            t = rng.uniform(S, T)
            c = self.F.reference(t)
            r = min(self.F.delta_bar, 1.0) if np.isfinite(self.F.delta_bar) else 1.0
            x, y = c + r * rng.uniform(-1, 1, self.dim), c + r * rng.uniform(-1, 1, self.dim)
            if self.h is not None:
                if abs(self.hval(x) - self.hval(y)) > self.k_h * np.linalg.norm(x - y) + 1e-9:
                    out["h_lipschitz_ok"] = False
                    out["witness"] = ("h", x, y)
            if self.L is not None:
                V = self.F(t, c, check=False).vertices
                a, b = V[rng.integers(len(V))], V[rng.integers(len(V))]
                s = rng.uniform()
                mid = self.Lval(t, c, (1 - s) * a + s * b)
                if mid > (1 - s) * self.Lval(t, c, a) + s * self.Lval(t, c, b) + 1e-9:
                    out["L_convex_ok"] = False
                    out["witness"] = ("L", t, a, b, s)
        return out


def cell_defects(F: Multifunction, x: Arc):
    """Per-cell distance of the arc's velocity from F at the cell midpoint."""
    v = x.velocities()
    out = np.empty(x.n_cells)
    for j, tm in enumerate(x.midpoints):
        xm = x(tm)
        F.check_tube(xm, tm)
        out[j] = distance_to_set(v[j], F(tm, xm, check=False))
    return out


def defect(F: Multifunction, x: Arc) -> float:
    """Midpoint quadrature of d_F(t, x(t))(x'(t)) over the arc's grid."""
    return float(np.sum(x.steps * cell_defects(F, x)))


def gronwall_constant(F: Multifunction):
    S, T = F.horizon
    return float(np.exp(F.lip_x * (T - S)))


def filippov_approximate(F: Multifunction, x: Arc, x0=None, proj_tol=PROJ_TOL, max_iter=60) -> Arc:
    """An F-trajectory from x0 following x: each cell velocity is the projection of x' onto F.

    The projection is taken at the cell midpoint state, found by fixed-point
    iteration since the midpoint depends on the chosen velocity.
    """
    x0 = x.values[0] if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    F.check_tube(x0, x.S)
    v = x.velocities()
    z = np.empty_like(x.values)
    z[0] = x0
    for j, (t0, t1) in enumerate(zip(x.grid[:-1], x.grid[1:])):
        h, tm = t1 - t0, 0.5 * (t0 + t1)
        w = v[j]
        for _ in range(max_iter):
            zm = z[j] + 0.5 * h * w
            w_new = nearest_point(v[j], F(tm, zm, check=False))
            if np.linalg.norm(w_new - w) <= 0.1 * proj_tol:
                w = w_new
                break
            w = w_new
        z[j + 1] = z[j] + h * w
        try:
            F.check_tube(z[j + 1], t1)
        except TubeViolation as exc:
            raise TubeViolation(t1, z[j + 1], exc.distance, exc.radius) from None
    return Arc(x.grid, z, "linear")


@dataclass
class FeasibilityReport:
    max_h: float
    endpoint_residual: float
    max_cell_defect: float
    feas_tol: float

    @property
    def feasible(self):
        return max(self.max_h, self.endpoint_residual, self.max_cell_defect) <= self.feas_tol

    def as_dict(self):
        return {"max_h": self.max_h, "endpoint_residual": self.endpoint_residual,
                "max_cell_defect": self.max_cell_defect, "feasible": self.feasible}


def feasibility_report(P: Problem, x: Arc, feas_tol=FEAS_TOL, F: Optional[Multifunction] = None):
    """Constraint, endpoint and dynamics residuals of an arc (F defaults to P.F)."""
    ts = np.union1d(x.grid, x.midpoints)
    max_h = max(P.hval(x(t)) for t in ts) if P.has_h else 0.0
    end = P.C.residual(x.values[0], x.values[-1])
    dfc = float(np.max(cell_defects(P.F if F is None else F, x)))
    return FeasibilityReport(float(max_h), float(end), dfc, feas_tol)


def write_arc_csv(path, arc: Arc):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x_{i + 1}" for i in range(arc.dim)])
        for t, row in zip(arc.grid, arc.values):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def read_arc_csv(path, interp="linear") -> Arc:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    if not head or head[0] != "t":
        raise ValueError(f"{path}: first column must be 't'")
    data = np.array([[float(v) for v in r] for r in body if r])
    return Arc(data[:, 0], data[:, 1:], interp)
