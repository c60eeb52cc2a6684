"""Left-sampled multistage approximations, penalized discrete problems and their multipliers.

Discrete problem on a grid t_0 < ... < t_N with steps h_j:

    minimize  g(x_0, x_N) + sum_j h_j [ |x_j - xref_j|^2 + K (h(x_j) - beta)^+ + L(t_j, x_j, v_j) ]
    subject to x_{j+1} = x_j + h_j v_j,  v_j in F(t_j, x_j),  |x_j - xref_j| <= delta_bar / 2.

The costate q_j is minus the derivative of the cost-to-go with respect to x_j,
so the velocity on cell j maximizes q_{j+1}.v - L over F(t_j, x_j).
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import linprog

from .chain import chain_newton
from .multifun import Arc, Multifunction
from .setvalued import CompactSet, contains, distance_to_set, support_function
from .trajectory import Problem, fd_gradient
from .hamiltonian import eval_H

__all__ = [
    "PenaltySchedule",
    "StageProblem",
    "MultiplierSet",
    "PenalizedSolution",
    "NonStationaryError",
    "left_sample",
    "discrete_cost",
    "solve_penalized",
    "exhaustive_cost",
    "extract_multipliers",
    "jump_estimates",
    "write_multipliers_json",
    "read_multipliers_json",
]

KKT_TOL = 1e-6
KINK_TOL = 1e-7
_BIG = 1e30  # stands in for +inf inside interpolated value tables


class NonStationaryError(RuntimeError):
    def __init__(self, residual, cell):
        super().__init__(f"discrete solution is not stationary: KKT residual {residual:.3g} at cell {cell}")
        self.residual, self.cell = residual, cell


@dataclass
class PenaltySchedule:
    """Cell counts N_i, penalty weights K_i, relaxations beta_i and Filippov gaps alpha_i.

    beta_i and alpha_i may be left as None; alpha is then measured and beta
    set to 2 k_h alpha_i + 1/N_i by the pipeline.
    """

    N: list
    K: list
    beta: Optional[list] = None
    alpha: Optional[list] = None

    def __post_init__(self):
        if len(self.N) == 0:
            raise ValueError("penalty schedule is empty")
        if len(self.K) != len(self.N):
            raise ValueError("schedule needs one K per N")
        if any(int(n) < 2 for n in self.N):
            raise ValueError("each stage needs N >= 2 cells")
        if np.any(np.diff(self.K) < 0):
            raise ValueError("penalty weights K must be nondecreasing")
        for name in ("beta", "alpha"):
            seq = getattr(self, name)
            if seq is not None:
                if len(seq) != len(self.N):
                    raise ValueError(f"schedule needs one {name} per N")
                if np.any(np.diff(seq) > 0):
                    raise ValueError(f"{name} must be nonincreasing")

    def __len__(self):
        return len(self.N)

    def coupling_ok(self, k_h):
        if self.beta is None or self.alpha is None:
            return True
        return all(b > 2 * k_h * a for b, a in zip(self.beta, self.alpha))

    @staticmethod
    def default_beta(alpha, k_h, N):
        return 2 * k_h * alpha + 1.0 / N


@dataclass(eq=False)
class StageProblem:
    """F and L frozen at the left end of each cell of ``grid``."""

    F: Multifunction
    grid: np.ndarray
    L: Optional[Callable] = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)

    @property
    def N(self):
        return len(self.grid) - 1

    @property
    def steps(self):
        return np.diff(self.grid)

    def cell_of(self, t):
        return int(np.clip(np.searchsorted(self.grid, t, side="right") - 1, 0, self.N - 1))

    def F_stage(self, j, x=None):
        return self.F(self.grid[j], x, check=False)

    def L_stage(self, j, x, v):
        return 0.0 if self.L is None else float(self.L(self.grid[j], x, v))

    def H_stage(self, j, x, q, lam=1.0):
        L = None if self.L is None else (lambda t, y, v: self.L(self.grid[j], y, v))
        return eval_H(self.F, L, lam, self.grid[j], x, q, check=False)[0]

    def as_multifunction(self) -> Multifunction:
        base = self.F
        grid = self.grid

        def ev(t, x, a):
            j = int(np.clip(np.searchsorted(grid, t, side="right") - 1, 0, len(grid) - 2))
            return base.eval(grid[j], x, a)
        return replace(base, eval=ev, name=(base.name or "F") + "_stage")

    def as_lagrangian(self):
        if self.L is None:
            return None
        grid, L = self.grid, self.L

        def Li(t, x, v):
            j = int(np.clip(np.searchsorted(grid, t, side="right") - 1, 0, len(grid) - 2))
            return L(grid[j], x, v)
        return Li


def left_sample(F: Multifunction, N: int, L=None, grid=None) -> StageProblem:
    """Uniform N-cell stage problem with F(t_j, .) on [t_j, t_{j+1}) (last cell closed)."""
    if N < 2:
        raise ValueError("left_sample needs N >= 2")
    S, T = F.horizon
    g = np.linspace(S, T, N + 1) if grid is None else np.asarray(grid, dtype=float)
    return StageProblem(F, g, L)


# -- cost evaluation -----------------------------------------------------------

class _Costs:
    """Running-cost pieces with vectorized evaluation where the oracles allow it."""

    def __init__(self, P: Problem, stage: StageProblem, K, beta, xr):
        self.P, self.stage, self.K, self.beta = P, stage, float(K), float(beta)
        self.xr = np.asarray(xr, dtype=float)
        self.t = stage.grid[:-1]
        self.h = stage.steps
        self.n = P.dim
        self._vec_h = self._probe(lambda X: np.asarray(P.h(X.T), dtype=float), P.has_h)
        self._vec_L = self._probe(lambda X: np.asarray(P.L(self.t[0], X.T, X.T), dtype=float), P.has_L)

    def _probe(self, fn, present):
        if not present:
            return False
        X = np.ones((3, self.n)) * 0.1
        try:
            out = fn(X)
            return out.shape == (3,)
        except Exception:
            return False

    def hvals(self, X):
        X = np.atleast_2d(X)
        if not self.P.has_h:
            return np.full(len(X), -np.inf)
        if self._vec_h:
            return np.asarray(self.P.h(X.T), dtype=float)
        return np.array([self.P.hval(x) for x in X])

    def state_cost(self, j, X):
        """|x - xref_j|^2 + K (h(x) - beta)^+ for rows of X (j may be an array)."""
        X = np.atleast_2d(X)
        d = X - self.xr[j] if np.ndim(j) == 0 else X - self.xr[np.asarray(j)]
        c = np.sum(d * d, axis=1)
        if self.P.has_h:
            c = c + self.K * np.maximum(self.hvals(X) - self.beta, 0.0)
        return c

    def Lvals(self, t, X, V):
        X, V = np.atleast_2d(X), np.atleast_2d(V)
        if not self.P.has_L:
            return np.zeros(max(len(X), len(V)))
        m = max(len(X), len(V))
        X = np.broadcast_to(X, (m, self.n))
        V = np.broadcast_to(V, (m, self.n))
        if self._vec_L:
            tt = np.broadcast_to(np.asarray(t, dtype=float), (m,))
            try:
                out = np.asarray(self.P.L(tt, X.T, V.T), dtype=float)
                if out.shape == (m,):
                    return out
            except Exception:
                pass
        tt = np.broadcast_to(np.asarray(t, dtype=float), (m,))
        return np.array([self.P.Lval(a, x, v) for a, x, v in zip(tt, X, V)])

    def total(self, xs, vs):
        run = self.state_cost(np.arange(len(vs)), xs[:-1]) + self.Lvals(self.t, xs[:-1], vs)
        return float(self.P.g(xs[0], xs[-1]) + np.sum(self.h * run))


def discrete_cost(P: Problem, stage: StageProblem, xs, vs, K, beta, xref=None):
    xr = _xref_nodes(P, stage, xref)
    return _Costs(P, stage, K, beta, xr).total(np.asarray(xs, float), np.asarray(vs, float))


def _xref_nodes(P, stage, xref):
    ref = xref if xref is not None else P.xbar
    if ref is None:
        return np.zeros((stage.N + 1, P.dim))
    return np.atleast_2d(ref(stage.grid)).reshape(stage.N + 1, P.dim)


# -- solver ----------------------------------------------------------------------

@dataclass
class PenalizedSolution:
    x: Arc
    v: np.ndarray
    cost: float
    K: float
    beta: float
    alpha: float
    xref: np.ndarray
    method: str
    sweeps: int = 0
    stage: Optional[StageProblem] = None



def _final_radius(C, alpha):
    return C.r1 + np.sqrt(2) * alpha if C.kind == "product-of-balls" else np.sqrt(2) * alpha


def solve_penalized(P: Problem, stage: StageProblem, K, beta, alpha=0.0, xref=None, *,
                    grid_points=None, n_weights=41, max_sweeps=60, step_tol=1e-10,
                    round_digits=12) -> PenalizedSolution:
    """Minimize the penalized discrete problem.

    Finite velocity sets use an exact forward dynamic programme over reachable
    states; convex-hull sets use a backward grid programme followed by
    coordinate refinement on the exact discrete cost.
    """
    if stage.L is None and P.L is not None:
        stage = replace(stage, L=P.L)
    xr = _xref_nodes(P, stage, xref)
    costs = _Costs(P, stage, K, beta, xr)
    C = P.C
    if not C.initial_fixed and C.kind != "product-of-balls":
        raise ValueError(f"unsupported initial condition for {C.kind}")
    x0 = C.x0
    radius = P.F.delta_bar / 2 if np.isfinite(P.F.delta_bar) else np.inf
    if np.linalg.norm(x0 - xr[0]) > radius + 1e-12 and C.initial_fixed:
        raise ValueError("infeasible start: x0 lies outside the half tube around the reference")
    hull = stage.F_stage(0, x0).hull
    if not hull:
        if not C.initial_fixed:
            raise ValueError("finite velocity sets need a fixed initial state")
        xs, vs = _tree_dp(P, stage, costs, x0, radius, alpha, round_digits)
        method, sweeps = "tree", 0
    else:
        if P.dim > 2:
            raise ValueError("grid dynamic programming supports state dimension <= 2")
        xs, vs = _grid_dp(P, stage, costs, radius, alpha, grid_points, n_weights)
        method = "grid"
        sweeps = 0
        if not P.F.state_dependent:
            final_ok = None
            if not C.final_fixed:
                if C.kind == "product-of-balls":
                    r1 = _final_radius(C, alpha)
                    final_ok = lambda y: np.linalg.norm(y - C.x1) <= r1 + 1e-12
                else:
                    final_ok = lambda y: True
            xs, vs = _polish(stage, costs, xs, vs, radius, final_ok)
            for _ in range(max_sweeps):
                before = costs.total(xs, vs)
                xs, vs, k = _refine_states(stage, costs, xs, vs, radius, max_sweeps, step_tol, final_ok)
                sweeps += k
                if final_ok is not None:
                    xs, vs, k = _refine(stage, costs, xs, vs, radius, max_sweeps, step_tol)
                    sweeps += k
                if before - costs.total(xs, vs) <= 1e-15 * max(1.0, abs(before)):
                    break
            xs, vs = _polish(stage, costs, xs, vs, radius, final_ok)
    arc = Arc(stage.grid, xs, "linear")
    return PenalizedSolution(arc, vs, costs.total(xs, vs), float(K), float(beta), float(alpha), xr,
                             method, sweeps, stage)


def _tree_dp(P, stage, costs, x0, radius, alpha, digits):
    n, N = P.dim, stage.N
    X = x0[None, :].copy()
    acc = np.zeros(1)
    back = []
    for j in range(N):
        h = stage.steps[j]
        run = costs.state_cost(j, X)
        if not P.F.state_dependent:
            V = stage.F_stage(j, X[0]).points
            src = np.repeat(np.arange(len(X)), len(V))
            vel = np.tile(V, (len(X), 1))
        else:
            Vs = [stage.F_stage(j, x).points for x in X]
            src = np.repeat(np.arange(len(X)), [len(V) for V in Vs])
            vel = np.vstack(Vs)
        Y = X[src] + h * vel
        c = acc[src] + h * (run[src] + costs.Lvals(stage.grid[j], X[src], vel))
        keep = np.flatnonzero(np.linalg.norm(Y - costs.xr[j + 1], axis=1) <= radius + 1e-12)
        if not len(keep):
            raise ValueError(f"no admissible state survives stage {j} (tube too narrow?)")
        keys = np.round(Y[keep], digits) + 0.0  # fold -0.0 into 0.0
        # within each rounded key keep the cheapest candidate, the earliest one on ties
        order = np.lexsort((keep, c[keep]) + tuple(keys.T[::-1]))
        ks = keys[order]
        start = np.ones(len(order), dtype=bool)
        start[1:] = np.any(ks[1:] != ks[:-1], axis=1)
        group = np.cumsum(start) - 1
        first_seen = np.full(start.sum(), len(keep))
        np.minimum.at(first_seen, group, order)
        win = keep[order[start]][np.argsort(first_seen, kind="stable")]
        acc, X = c[win], Y[win]
        back.append(list(zip(src[win], vel[win])))
    total = acc + np.array([float(P.g(x0, x)) for x in X])
    if P.C.final_fixed or P.C.kind == "product-of-balls":
        rad = _final_radius(P.C, alpha)
        ok = np.linalg.norm(X - P.C.x1, axis=1) <= rad + 1e-9
        if not ok.any():
            raise ValueError("no reachable final state meets the endpoint constraint")
        total = np.where(ok, total, np.inf)
    i = int(np.argmin(total))
    xs = np.empty((N + 1, n))
    vs = np.empty((N, n))
    xs[N] = X[i]
    for j in range(N - 1, -1, -1):
        i, v = back[j][i]
        vs[j] = v
    xs[0] = x0
    for j in range(N):  # replay forward so states match the velocities exactly
        xs[j + 1] = xs[j] + stage.steps[j] * vs[j]
    return xs, vs


def _velocity_candidates(V: CompactSet, n_weights):
    verts = V.vertices
    if len(verts) == 1:
        return verts
    if V.dim == 1:
        lo, hi = V.bounds
        return np.linspace(lo, hi, n_weights)[:, None]
    w = np.linspace(0, 1, max(3, n_weights // 4))[1:-1]
    out = [verts]
    for a, b in itertools.combinations(range(len(verts)), 2):
        out.append(verts[a] + w[:, None] * (verts[b] - verts[a]))
    out.append(verts.mean(axis=0)[None, :])
    return np.vstack(out)


def _terminal_values(P, C, X, x0, alpha, scale):
    g = np.array([float(P.g(x0, x)) for x in X])
    if C.kind == "fixed-initial":
        return g
    rad = _final_radius(C, alpha)
    dist = np.maximum(np.linalg.norm(X - C.x1, axis=1) - rad, 0.0)
    return g + scale * dist


def _grid_dp(P, stage, costs, radius, alpha, grid_points, n_weights):
    n, N, C = P.dim, stage.N, P.C
    S, T = stage.grid[0], stage.grid[-1]
    bound = P.F.bound
    if not np.isfinite(bound):
        bound = max(float(np.max(np.linalg.norm(stage.F_stage(j, costs.xr[j]).vertices, axis=1)))
                    for j in range(N))
    R = radius if np.isfinite(radius) else max(1.0, bound * (T - S))
    G = grid_points or (201 if n == 1 else 41)
    offs = np.linspace(-R, R, G)
    exact_pen = 1e3 * (1.0 + bound * (T - S) + abs(costs.K))
    x0 = C.x0

    def nodes(j):
        if n == 1:
            return (costs.xr[j][0] + offs)[:, None]
        ax = [costs.xr[j][d] + offs for d in range(n)]
        return np.array(np.meshgrid(*ax, indexing="ij")).reshape(n, -1).T

    def interp(j, vals):
        if n == 1:
            ax = costs.xr[j][0] + offs

            def f(Y):
                y = Y[:, 0]
                out = np.interp(y, ax, vals)
                out[(y < ax[0] - 1e-12) | (y > ax[-1] + 1e-12)] = _BIG
                return out
            return f
        axes = tuple(costs.xr[j][d] + offs for d in range(n))
        rgi = RegularGridInterpolator(axes, vals.reshape((G,) * n), bounds_error=False, fill_value=_BIG)
        return lambda Y: rgi(Y)

    values = [None] * (N + 1)
    XN = nodes(N)
    values[N] = _terminal_values(P, C, XN, x0, alpha, exact_pen)
    for j in range(N - 1, -1, -1):
        X = nodes(j)
        h = stage.steps[j]
        nxt = interp(j + 1, values[j + 1])
        run = costs.state_cost(j, X)
        out = np.empty(len(X))
        if not P.F.state_dependent:
            W = _velocity_candidates(stage.F_stage(j, X[0]), n_weights)
            Y = X[:, None, :] + h * W[None, :, :]
            Lc = costs.Lvals(stage.grid[j], np.repeat(X, len(W), axis=0), np.tile(W, (len(X), 1)))
            tot = h * (run[:, None] + Lc.reshape(len(X), len(W))) + nxt(Y.reshape(-1, n)).reshape(len(X), len(W))
            out = tot.min(axis=1)
        else:
            for i, x in enumerate(X):
                W = _velocity_candidates(stage.F_stage(j, x), n_weights)
                tot = h * (run[i] + costs.Lvals(stage.grid[j], x[None, :], W)) + nxt(x + h * W)
                out[i] = tot.min()
        values[j] = np.minimum(out, _BIG)
    # forward rollout on the exact dynamics
    if C.initial_fixed:
        start = x0
    else:
        X = nodes(0)
        ok = np.linalg.norm(X - x0, axis=1) <= C.r0 + np.sqrt(2) * alpha + 1e-12
        if not ok.any():
            raise ValueError("infeasible start: no grid state in the initial ball")
        g0 = np.where(ok, values[0], _BIG)
        start = X[int(np.argmin(g0))]
    xs = np.empty((N + 1, n))
    vs = np.empty((N, n))
    xs[0] = start
    for j in range(N):
        h = stage.steps[j]
        V = stage.F_stage(j, xs[j])
        if j == N - 1 and C.final_fixed:
            target = (C.x1 - xs[j]) / h
            vs[j] = target if distance_to_set(target, V) <= 1e-12 else _nearest(V, target)
        else:
            W = _velocity_candidates(V, 4 * n_weights)
            nxt = interp(j + 1, values[j + 1])
            tot = h * costs.Lvals(stage.grid[j], xs[j][None, :], W) + nxt(xs[j] + h * W)
            if not (tot < 0.5 * _BIG).any():
                raise ValueError(f"grid exit: no admissible velocity at stage {j}")
            vs[j] = W[int(np.argmin(tot))]
        xs[j + 1] = xs[j] + h * vs[j]
    return xs, vs


def _nearest(V, w):
    from .setvalued import nearest_point
    return nearest_point(w, V)


def _refine(stage, costs, xs, vs, radius, max_sweeps, step_tol):
    """Coordinate descent on cell velocities against the exact discrete cost."""
    N = stage.N
    h = stage.steps
    t = stage.grid[:-1]
    P = costs.P
    xs, vs = xs.copy(), vs.copy()
    sets = [stage.F_stage(j, xs[j]) for j in range(N)]
    x0 = xs[0]

    def tail(j, vj):
        d = h[j] * (vj - vs[j])
        y = xs[j + 1:] + d
        if np.any(np.linalg.norm(y - costs.xr[j + 1:], axis=1) > radius + 1e-12):
            return np.inf
        c = h[j] * float(costs.Lvals(t[j], xs[j][None, :], vj[None, :])[0])
        if j + 1 < N:
            k = np.arange(j + 1, N)
            c += float(np.sum(h[k] * (costs.state_cost(k, y[:-1]) + costs.Lvals(t[k], y[:-1], vs[k]))))
        return c + float(P.g(x0, y[-1]))

    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        moved = 0.0
        for j in range(N):
            verts = sets[j].vertices
            if len(verts) < 2:
                continue
            base = tail(j, vs[j])
            scale = float(np.max(np.ptp(verts, axis=0))) or 1.0
            improved = False
            for w in verts:
                probe = vs[j] + 1e-7 * (w - vs[j])
                if tail(j, probe) < base - 1e-15 * max(1.0, abs(base)):
                    improved = True
                    break
            if not improved:
                continue
            best_v, best_c = vs[j].copy(), base
            for w in verts:
                a, b = vs[j].copy(), w
                phi = lambda s: tail(j, a + s * (b - a))
                s, c = _golden_min(phi, step_tol / scale)
                if c < best_c:
                    best_c, best_v = c, a + s * (b - a)
            if best_c < base:
                d = h[j] * (best_v - vs[j])
                moved = max(moved, float(np.linalg.norm(best_v - vs[j])))
                xs[j + 1:] += d
                vs[j] = best_v
        if moved < step_tol:
            break
    return xs, vs, sweeps


def _segment(V, c, d, h):
    """Interval of s with c + s d in h V for a convex velocity set V (1-D closed form, else bisection)."""
    if V.dim == 1:
        lo, hi = V.bounds
        a, b = (h * lo - c[0]) / d[0], (h * hi - c[0]) / d[0]
        return min(a, b), max(a, b)
    out = []
    for sign in (-1.0, 1.0):
        good, bad = 0.0, 1.0
        while contains(V, (c + sign * bad * d) / h, 1e-12) and bad < 1e6:
            good, bad = bad, 2 * bad
        for _ in range(60):
            mid = 0.5 * (good + bad)
            if contains(V, (c + sign * mid * d) / h, 1e-12):
                good = mid
            else:
                bad = mid
        out.append(sign * good)
    return out[0], out[1]


def _refine_states(stage, costs, xs, vs, radius, max_sweeps, step_tol, final_ok):
    """Coordinate descent on node states; a move at node j only touches cells j-1 and j.

    The final node moves only when ``final_ok`` is given (a free or ball endpoint).
    """
    N, n = stage.N, xs.shape[1]
    h = stage.steps
    t = stage.grid[:-1]
    P = costs.P
    xs = xs.copy()
    sets = [stage.F_stage(j, xs[j]) for j in range(N)]
    last = N if final_ok is not None else N - 1
    dirs = np.eye(n)

    def local(j, y):
        c = h[j - 1] * P.Lval(t[j - 1], xs[j - 1], (y - xs[j - 1]) / h[j - 1])
        if j < N:
            d = y - costs.xr[j]
            sc = float(d @ d)
            if P.has_h:
                sc += costs.K * max(P.hval(y) - costs.beta, 0.0)
            c += h[j] * (sc + P.Lval(t[j], y, (xs[j + 1] - y) / h[j]))
        else:
            c += float(P.g(xs[0], y))
        return c

    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        moved = 0.0
        for j in range(1, last + 1):
            for d in dirs:
                lo, hi = _segment(sets[j - 1], xs[j] - xs[j - 1], d, h[j - 1])
                if j < N:
                    a, b = _segment(sets[j], xs[j + 1] - xs[j], -d, h[j])
                    lo, hi = max(lo, a), min(hi, b)
                if np.isfinite(radius):
                    e = xs[j] - costs.xr[j]
                    disc = float(e @ d) ** 2 - float(e @ e) + radius**2
                    if disc < 0:
                        continue
                    root = np.sqrt(disc)
                    lo, hi = max(lo, -float(e @ d) - root), min(hi, -float(e @ d) + root)
                lo, hi = min(lo, 0.0), max(hi, 0.0)
                if hi - lo <= step_tol:
                    continue
                base = local(j, xs[j])

                def phi(u):
                    y = xs[j] + (lo + u * (hi - lo)) * d
                    if j == N and not final_ok(y):
                        return np.inf
                    return local(j, y)
                u, c = _golden_min(phi, step_tol / (hi - lo))
                if c < base - 1e-15 * max(1.0, abs(base)):
                    step = (lo + u * (hi - lo)) * d
                    xs[j] = xs[j] + step
                    moved = max(moved, float(np.linalg.norm(step)))
        if moved < step_tol:
            break
    vs = np.diff(xs, axis=0) / h[:, None]
    return xs, vs, sweeps


def _interior(V, v, eps=1e-7):
    return all(contains(V, v + s * eps * e, 1e-12) for e in np.eye(len(v)) for s in (-1.0, 1.0))


def _polish(stage, costs, xs, vs, radius, final_ok):
    """Newton on the nodes whose cost is smooth: velocities interior to F, away from the penalty kink."""
    N = stage.N
    h, t = stage.steps, stage.grid[:-1]
    P = costs.P
    sets = [stage.F_stage(j, xs[j]) for j in range(N)]
    inner = [_interior(sets[j], vs[j]) for j in range(N)]
    free = np.zeros(N + 1, dtype=bool)
    for j in range(1, N + 1):
        if j == N and final_ok is None:
            continue
        ok = inner[j - 1] and (j == N or inner[j])
        if ok and P.has_h and j < N:
            ok = abs(P.hval(xs[j]) - costs.beta) > 1e-8
        free[j] = ok
    if not free.any():
        return xs, vs

    def cell(j, a, b):
        return h[j] * P.Lval(t[j], a, (b - a) / h[j])

    def node(j, a):
        if j == N:
            return float(P.g(xs[0], a))
        d = a - costs.xr[j]
        c = float(d @ d)
        if P.has_h:
            c += costs.K * max(P.hval(a) - costs.beta, 0.0)
        return h[j] * c

    def feasible(Y):
        V = np.diff(Y, axis=0) / h[:, None]
        if not all(contains(sets[j], V[j], 1e-12) for j in range(N)):
            return False
        if np.isfinite(radius) and np.any(np.linalg.norm(Y - costs.xr, axis=1) > radius + 1e-12):
            return False
        return final_ok is None or bool(final_ok(Y[-1]))

    before = costs.total(xs, vs)
    Y, _, _ = chain_newton(cell, node, xs, free, feasible)
    W = np.diff(Y, axis=0) / h[:, None]
    if costs.total(Y, W) < before:
        return Y, W
    return xs, vs


def _golden_min(phi, tol, max_iter=200):
    g = (np.sqrt(5) - 1) / 2
    lo, hi = 0.0, 1.0
    c, d = hi - g * (hi - lo), lo + g * (hi - lo)
    fc, fd = phi(c), phi(d)
    for _ in range(max_iter):
        if hi - lo < tol:
            break
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - g * (hi - lo)
            fc = phi(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + g * (hi - lo)
            fd = phi(d)
    cands = [(phi(0.0), 0.0), (phi(1.0), 1.0), (fc, c), (fd, d)]
    val, s = min(cands)
    return s, val


def exhaustive_cost(P: Problem, stage: StageProblem, K, beta, alpha=0.0, xref=None):
    """Brute-force minimum over all vertex-velocity sequences (state-independent point sets).

    Every prefix is kept separately (no state merging), so this is plain enumeration; a
    prefix is costed once and shared by all of its continuations.
    """
    if P.F.state_dependent:
        raise ValueError("exhaustive enumeration needs state-independent velocity sets")
    xr = _xref_nodes(P, stage, xref)
    N, n = stage.N, P.dim
    h = stage.steps
    t = stage.grid[:-1]
    radius = P.F.delta_bar / 2 if np.isfinite(P.F.delta_bar) else np.inf
    x0 = np.asarray(P.C.x0, dtype=float)
    if np.linalg.norm(x0 - xr[0]) > radius + 1e-12:
        return np.inf
    X = x0[None, :].copy()
    cost = np.zeros(1)
    for j in range(N):
        V = stage.F_stage(j).points
        run = np.empty((len(X), len(V)))
        for a, x in enumerate(X):
            d = x - xr[j]
            base = float(d @ d)
            if P.has_h:
                base += K * max(P.hval(x) - beta, 0.0)
            for b, v in enumerate(V):
                run[a, b] = base + P.Lval(t[j], x, v)
        cost = (cost[:, None] + h[j] * run).ravel()
        X = (X[:, None, :] + h[j] * V[None, :, :]).reshape(-1, n)
        ok = np.linalg.norm(X - xr[j + 1], axis=1) <= radius + 1e-12
        X, cost = X[ok], cost[ok]
    if P.C.kind != "fixed-initial":
        ok = np.linalg.norm(X - P.C.x1, axis=1) <= _final_radius(P.C, alpha) + 1e-9
        X, cost = X[ok], cost[ok]
    if not len(X):
        return np.inf
    return float(min(c + float(P.g(x0, x)) for c, x in zip(cost, X)))


# -- multipliers -----------------------------------------------------------------

@dataclass(eq=False)
class MultiplierSet:
    """Costate p, cost multiplier lam, measure mu (atoms plus cell densities) and gamma.

    ``q`` holds the node values of p + int_[S,t) gamma dmu with the ``right``
    rule, so q on (t_j, t_{j+1}] is the costate seen by cell j.
    """

    grid: np.ndarray
    p: Arc
    lam: float
    mu_density: np.ndarray
    gamma: np.ndarray
    mu_atoms: list = field(default_factory=list)
    atom_gamma: list = field(default_factory=list)
    r: Optional[Arc] = None
    stage_grid: Optional[np.ndarray] = None
    xref: Optional[Arc] = None
    nu: Optional[np.ndarray] = None
    normalization_residual: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.mu_density = np.asarray(self.mu_density, dtype=float).ravel()
        n = self.p.dim
        self.gamma = np.asarray(self.gamma, dtype=float).reshape(len(self.grid) - 1, n)
        if np.any(self.mu_density < -1e-14) or any(m < -1e-14 for _, m in self.mu_atoms):
            raise ValueError("measure masses must be nonnegative")

    @property
    def dim(self):
        return self.p.dim

    @property
    def steps(self):
        return np.diff(self.grid)

    def mu_cumulative(self):
        """mu([S, t_j)) at the nodes plus mass at T (closed interval)."""
        cell = np.concatenate([[0.0], np.cumsum(self.steps * self.mu_density)])
        return cell

    def mu_total(self):
        return float(np.sum(self.steps * self.mu_density) + sum(m for _, m in self.mu_atoms))

    def mu_after_start(self):
        """mu((S, T]): everything except an atom sitting at S."""
        S = self.grid[0]
        return float(np.sum(self.steps * self.mu_density) + sum(m for t, m in self.mu_atoms if t > S))

    @property
    def q(self) -> Arc:
        h = self.steps
        acc = np.zeros((len(self.grid), self.dim))
        for j in range(1, len(self.grid)):
            acc[j] = acc[j - 1] + h[j - 1] * self.mu_density[j - 1] * self.gamma[j - 1]
        last = len(self.grid) - 1
        for (ta, m), ga in zip(self.mu_atoms, self.atom_gamma):
            for j in range(1, last + 1):  # [S, t_j) holds the atom once t_j > ta; [S, T] is closed
                if ta < self.grid[j] or j == last:
                    acc[j] += m * np.atleast_1d(ga)
        return Arc(self.grid, self.p.values + acc, "right")

    def q_inf_norm(self):
        return float(np.max(np.linalg.norm(self.q.values, axis=1)))

    def p_inf_norm(self):
        return float(np.max(np.linalg.norm(self.p.values, axis=1)))

    def nontriviality(self):
        return self.p_inf_norm() + self.lam + self.mu_total()

    def scaled(self, theta):
        th = float(theta)
        return replace(self, p=Arc(self.p.grid, self.p.values * th, self.p.interp), lam=self.lam * th,
                       mu_density=self.mu_density * th, mu_atoms=[(t, m * th) for t, m in self.mu_atoms],
                       r=None if self.r is None else Arc(self.r.grid, self.r.values * th, self.r.interp))

    def to_dict(self):
        return {
            "lambda": self.lam,
            "p": self.p.values.tolist(),
            "mu_atoms": [[float(t), float(m)] for t, m in self.mu_atoms],
            "atom_gamma": [np.atleast_1d(g).tolist() for g in self.atom_gamma],
            "mu_density": self.mu_density.tolist(),
            "gamma": self.gamma.tolist(),
            "r": [] if self.r is None else self.r.values[:-1, 0].tolist(),
            "normalization_residual": self.normalization_residual,
            "grid": self.grid.tolist(),
            "q": self.q.values.tolist(),
            "stage_grid": None if self.stage_grid is None else np.asarray(self.stage_grid).tolist(),
            "xref": None if self.xref is None else self.xref.values.tolist(),
            "penalty": {k: float(self.meta[k]) for k in ("K", "beta", "alpha") if k in self.meta} or None,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            grid = np.asarray(d["grid"], dtype=float)
            p = Arc(grid, np.asarray(d["p"], dtype=float))
            r = d.get("r") or None
            return cls(
                grid=grid, p=p, lam=float(d["lambda"]),
                mu_density=np.asarray(d["mu_density"], dtype=float),
                gamma=np.asarray(d["gamma"], dtype=float),
                mu_atoms=[(float(t), float(m)) for t, m in d.get("mu_atoms", [])],
                atom_gamma=[np.asarray(g, dtype=float) for g in d.get("atom_gamma", [])],
                r=None if r is None else Arc(grid, np.append(r, r[-1]), "left"),
                stage_grid=None if d.get("stage_grid") is None else np.asarray(d["stage_grid"], dtype=float),
                xref=None if d.get("xref") is None else Arc(grid, np.asarray(d["xref"], dtype=float)),
                normalization_residual=float(d.get("normalization_residual", 0.0)),
                meta=dict(d.get("penalty") or {}),
            )
        except KeyError as exc:
            raise ValueError(f"multiplier file is missing field {exc.args[0]!r}") from None


def write_multipliers_json(path, M: MultiplierSet):
    with open(path, "w") as fh:
        json.dump(M.to_dict(), fh, indent=1)


def read_multipliers_json(path) -> MultiplierSet:
    with open(path) as fh:
        return MultiplierSet.from_dict(json.load(fh))


def _grad_sigma(stage, j, x, q):
    """x-gradient of the support function of F(t_j, x) at q (zero for state-free F)."""
    if not stage.F.state_dependent:
        return np.zeros_like(x)
    return fd_gradient(lambda y: support_function(stage.F_stage(j, y), q)[0], x)


def extract_multipliers(P: Problem, sol: PenalizedSolution, kkt_tol=KKT_TOL, kink_tol=KINK_TOL,
                        n_weights=41) -> MultiplierSet:
    """Discrete multipliers of the penalized problem, normalized to |p| + lam + |mu| = 1."""
    stage = sol.stage
    xs, vs, xr = sol.x.values, sol.v, sol.xref
    N, n = stage.N, P.dim
    h, t = stage.steps, stage.grid[:-1]
    K, beta = sol.K, sol.beta
    hv = np.array([P.hval(x) for x in xs[:-1]]) if P.has_h else np.full(N, -np.inf)
    gam = np.array([P.hgrad(x) for x in xs[:-1]]) if P.has_h else np.zeros((N, n))
    nu = np.where(hv - beta > kink_tol, 1.0, 0.0)
    kinks = np.flatnonzero(np.abs(hv - beta) <= kink_tol) if P.has_h and K > 0 else np.array([], int)
    _, g1 = P.ggrad(xs[0], xs[-1])
    C = P.C
    # unknowns: kink weights, then free components of q_N
    free_final = []
    if C.final_fixed:
        free_final = [("free", i) for i in range(n)]
    elif C.kind == "product-of-balls":
        d = xs[-1] - C.x1
        if np.linalg.norm(d) >= _final_radius(C, sol.alpha) - 1e-9 and np.linalg.norm(d) > 0:
            free_final = [("ray", d / np.linalg.norm(d))]
    nz = len(kinks) + len(free_final)

    def recurse(qN, nu_vec):
        q = np.empty((N + 1, n))
        q[N] = qN
        for j in range(N - 1, -1, -1):
            drift = 2 * (xs[j] - xr[j]) + P.Lgx(t[j], xs[j], vs[j]) + K * nu_vec[j] * gam[j]
            q[j] = q[j + 1] - h[j] * drift + h[j] * _grad_sigma(stage, j, xs[j], q[j + 1])
        return q

    qN0 = -g1
    base = recurse(qN0, nu)
    cols = []
    for k in kinks:  # q is affine in the unknowns once the F-gradient terms are frozen
        e = np.zeros(N)
        e[k] = 1.0
        qe = np.zeros((N + 1, n))
        for j in range(N - 1, -1, -1):
            qe[j] = qe[j + 1] - h[j] * K * e[j] * gam[j]
        cols.append(qe)
    for kind, val in free_final:
        qe = np.zeros((N + 1, n))
        if kind == "free":
            qe[N, val] = 1.0
        else:
            qe[N] = -val
        for j in range(N - 1, -1, -1):
            qe[j] = qe[j + 1]
        cols.append(qe)
    # Weierstrass rows: (q_{j+1}).(w - v_j) - (L(w) - L(v_j)) <= s_j
    rows_w, rows_c = [], []
    for j in range(N):
        Fj = stage.F_stage(j, xs[j])
        W = _velocity_candidates(Fj, n_weights)
        if P.has_L:  # nearby velocities pin q_{j+1} to the v-gradient of L where v_j is interior
            eps = 1e-7 * max(1.0, float(np.max(np.abs(vs[j]))))
            near = vs[j] + eps * np.vstack([np.eye(n), -np.eye(n)])
            near = [w for w in near if contains(Fj, w, 1e-12)]
            if near:
                W = np.vstack([W, near])
        dL = np.array([stage.L_stage(j, xs[j], w) for w in W]) - stage.L_stage(j, xs[j], vs[j])
        rows_w.append(W - vs[j])
        rows_c.append(dL)

    def residuals(q):
        return np.array([max(0.0, float(np.max(rows_w[j] @ q[j + 1] - rows_c[j]))) for j in range(N)])

    z = np.zeros(nz)
    if nz:
        z = _fit_unknowns(base, cols, rows_w, rows_c, len(kinks), free_final, N)
    q = base + sum(zk * c for zk, c in zip(z, cols)) if nz else base
    nu = nu.copy()
    nu[kinks] = z[:len(kinks)]
    res = residuals(q)
    scale = max(1.0, float(np.max(np.abs(q))))
    worst = int(np.argmax(res))
    if res[worst] / scale > kkt_tol:
        raise NonStationaryError(float(res[worst] / scale), worst)
    m = K * nu  # mu density with lam = 1
    if not P.has_h:
        m = np.zeros(N)
    acc = np.concatenate([[np.zeros(n)], np.cumsum((h * m)[:, None] * gam, axis=0)])
    p = q - acc
    lam = 1.0
    total = float(np.max(np.linalg.norm(p, axis=1))) + lam + float(np.sum(h * m))
    c = 1.0 / total
    p, q, lam, m = p * c, q * c, lam * c, m * c
    r = np.array([stage.H_stage(j, xs[j] + 0.5 * h[j] * vs[j], q[j + 1], lam) for j in range(N)])
    M = MultiplierSet(stage.grid, Arc(stage.grid, p), lam, m, gam, r=Arc(stage.grid, np.append(r, r[-1]), "left"),
                      stage_grid=stage.grid, xref=Arc(stage.grid, xr), nu=nu,
                      meta={"kkt_residual": float(res[worst] / scale), "K": K, "beta": beta,
                            "alpha": sol.alpha})
    M.normalization_residual = abs(M.nontriviality() - 1.0)
    return M


def _fit_unknowns(base, cols, rows_w, rows_c, n_kinks, free_final, N):
    """LP: choose kink weights in [0, 1] and free final costate to minimize Weierstrass slack."""
    nz = len(cols)
    A, b = [], []
    for j in range(N):
        W, dL = rows_w[j], rows_c[j]
        for w, c in zip(W, dL):
            row = np.zeros(nz + N)
            for k in range(nz):
                row[k] = w @ cols[k][j + 1]
            row[nz + j] = -1.0
            A.append(row)
            b.append(c - w @ base[j + 1])
    cost = np.concatenate([np.zeros(nz), np.ones(N)])
    bounds = [(0.0, 1.0)] * n_kinks
    for kind, _ in free_final:
        bounds.append((None, None) if kind == "free" else (0.0, None))
    bounds += [(0.0, None)] * N
    sol = linprog(cost, A_ub=np.array(A), b_ub=np.array(b), bounds=bounds, method="highs")
    if sol.status != 0:
        raise NonStationaryError(np.inf, -1)
    return sol.x[:nz]


def jump_estimates(P: Problem, M: MultiplierSet, sol: PenalizedSolution, eta_F, eta_L=None):
    """Per interior node: bound - |H_j(x_j, q_j) - H_{j-1}(x_j, q_j)| (nonnegative means satisfied)."""
    stage = sol.stage
    xs = sol.x.values
    q = M.q.values
    qn = M.q_inf_norm()
    g = stage.grid
    out = []
    for j in range(1, stage.N):
        d = stage.H_stage(j, xs[j], q[j], M.lam) - stage.H_stage(j - 1, xs[j], q[j], M.lam)
        bound = qn * (eta_F(g[j]) - eta_F(g[j - 1]))
        if eta_L is not None:
            bound += M.lam * (eta_L(g[j]) - eta_L(g[j - 1]))
        out.append((float(g[j]), float(d), float(bound), float(bound - abs(d))))
    return out
