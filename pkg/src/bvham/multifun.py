"""Time-dependent multifunctions localized around a reference arc."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .setvalued import CompactSet, hausdorff_distance

__all__ = [
    "Arc",
    "Multifunction",
    "TubeViolation",
    "LimitNotCertified",
    "one_sided_limit",
    "endpoint_modify",
    "interval_family",
    "ball_family",
    "polytope_table_family",
    "singleton_family",
    "callback_family",
]

INTERP_RULES = ("linear", "left", "right")

TOL_LIMIT = 1e-6
MAX_REFINE = 40


class TubeViolation(ValueError):
    def __init__(self, t, x, distance, radius):
        super().__init__(
            f"state {np.round(x, 12).tolist()} at t={t:.12g} lies {distance:.3g} from the "
            f"reference arc (tube radius {radius:.3g})"
        )
        self.t, self.x, self.distance, self.radius = t, x, distance, radius


class LimitNotCertified(RuntimeError):
    def __init__(self, t, side, gaps):
        super().__init__(
            f"{side} limit at t={t:.12g} not certified after {len(gaps)} refinements "
            f"(last gap {gaps[-1] if gaps else float('nan'):.3g})"
        )
        self.t, self.side, self.gaps = t, side, list(gaps)


@dataclass(frozen=True, eq=False)
class Arc:
    """Time grid plus node values.

    ``interp`` selects how values between nodes are read:
    ``linear`` (absolutely continuous arcs), ``left`` (constant on
    ``[t_j, t_{j+1})``) or ``right`` (constant on ``(t_j, t_{j+1}]``).
    """

    grid: np.ndarray
    values: np.ndarray
    interp: str = "linear"

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float).ravel()
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v.reshape(-1, 1)
        if len(g) < 2:
            raise ValueError("an arc needs at least two grid points")
        if len(g) != len(v):
            raise ValueError(f"grid has {len(g)} points but values has {len(v)} rows")
        if np.any(np.diff(g) <= 0):
            raise ValueError("arc grid must be strictly increasing")
        if self.interp not in INTERP_RULES:
            raise ValueError(f"unknown interpolation rule {self.interp!r}")
        g.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, f, grid, interp="linear"):
        grid = np.asarray(grid, dtype=float)
        return cls(grid, np.array([np.atleast_1d(f(t)) for t in grid], dtype=float), interp)

    @classmethod
    def constant(cls, value, S, T, n=1):
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(np.array([S, T]), np.vstack([v, v]))

    @property
    def dim(self):
        return self.values.shape[1]

    @property
    def S(self):
        return float(self.grid[0])

    @property
    def T(self):
        return float(self.grid[-1])

    @property
    def n_cells(self):
        return len(self.grid) - 1

    @property
    def steps(self):
        return np.diff(self.grid)

    @property
    def midpoints(self):
        return 0.5 * (self.grid[:-1] + self.grid[1:])

    def cell_index(self, t):
        """Index j of the cell [t_j, t_{j+1}) holding t (the last cell is closed)."""
        j = np.searchsorted(self.grid, t, side="right") - 1
        return np.clip(j, 0, self.n_cells - 1)

    def __call__(self, t):
        scalar = np.ndim(t) == 0
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.interp == "linear":
            out = np.column_stack(
                [np.interp(t, self.grid, self.values[:, k]) for k in range(self.dim)]
            )
        elif self.interp == "left":
            j = np.searchsorted(self.grid, t, side="right") - 1
            out = self.values[np.clip(j, 0, len(self.grid) - 1)]
        else:
            j = np.searchsorted(self.grid, t, side="left")
            out = self.values[np.clip(j, 0, len(self.grid) - 1)]
        return out[0] if scalar else out

    def velocities(self):
        """Per-cell slopes of the piecewise-linear interpolant, shape (N, n)."""
        return np.diff(self.values, axis=0) / self.steps[:, None]

    def image(self, t0, t1, count=8):
        """Samples of the arc over [t0, t1]: nodes inside plus ``count`` even points."""
        inner = self.grid[(self.grid > t0) & (self.grid < t1)]
        ts = np.union1d(np.linspace(t0, t1, max(count, 2)), inner)
        return self(ts)

    def sup_distance(self, other: "Arc"):
        ts = np.union1d(self.grid, other.grid)
        ts = ts[(ts >= max(self.S, other.S)) & (ts <= min(self.T, other.T))]
        return float(np.max(np.linalg.norm(self(ts) - other(ts), axis=1)))

    def inf_norm(self):
        return float(np.max(np.linalg.norm(self.values, axis=1)))


@dataclass(eq=False)
class Multifunction:
    """Set-valued map (t, x, a) -> CompactSet with a declared locality tube.

    ``eval`` is always called as ``eval(t, x, a)``; families that ignore x
    or a set ``state_dependent=False`` and/or leave ``param_set`` empty.
    """

    eval: Callable
    horizon: tuple
    dim: int
    param_set: Optional[CompactSet] = None
    lip_x: float = 0.0
    bound: float = np.inf
    delta_bar: float = np.inf
    xbar: Optional[Arc] = None
    state_dependent: bool = True
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        S, T = map(float, self.horizon)
        if not T > S:
            raise ValueError("horizon must satisfy T > S")
        self.horizon = (S, T)

    @property
    def S(self):
        return self.horizon[0]

    @property
    def T(self):
        return self.horizon[1]

    def params(self):
        """Parameter samples: vertices of A (all points for point-list sets)."""
        if self.param_set is None:
            return [None]
        A = self.param_set
        pts = A.vertices if A.hull else A.points
        return [p.copy() for p in pts]

    def reference(self, t):
        if self.xbar is None:
            return np.zeros(self.dim)
        return self.xbar(t)

    def check_tube(self, x, t0, t1=None):
        """Raise TubeViolation unless x is within delta_bar of xbar([t0, t1])."""
        if self.xbar is None or not np.isfinite(self.delta_bar) or x is None:
            return
        t1 = t0 if t1 is None else t1
        ref = self.xbar.image(t0, t1, 3) if t1 > t0 else self.xbar(np.array([t0]))
        dist = float(np.min(np.linalg.norm(ref - np.asarray(x, dtype=float), axis=1)))
        if dist > self.delta_bar * (1 + 1e-12) + 1e-12:
            raise TubeViolation(t0, np.asarray(x, dtype=float), dist, self.delta_bar)

    def __call__(self, t, x=None, a=None, check=True):
        S, T = self.horizon
        if not (S - 1e-14 <= t <= T + 1e-14):
            raise ValueError(f"time {t} outside horizon [{S}, {T}]")
        if x is None:
            x = self.reference(t)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if check:
            self.check_tube(x, t)
        out = self.eval(t, x, a)
        if not isinstance(out, CompactSet):
            out = CompactSet(out)
        if out.dim != self.dim:
            raise ValueError(f"oracle returned a {out.dim}-D set for a {self.dim}-D multifunction")
        return out

    def with_reference(self, xbar: Arc, delta_bar=None):
        return replace(self, xbar=xbar, delta_bar=self.delta_bar if delta_bar is None else delta_bar)


def one_sided_limit(F: Multifunction, t, side, x=None, a=None, h0=None,
                    tol_limit=TOL_LIMIT, max_refine=MAX_REFINE):
    """Estimate F(t+, x, a) or F(t-, x, a) by geometric probing.

    Probes t +- h0 * 2**-j and stops once successive probes are within
    ``tol_limit`` in Hausdorff distance; the last probe is returned.
    """
    S, T = F.horizon
    if side not in ("left", "right"):
        raise ValueError("side must be 'left' or 'right'")
    if side == "left" and not S < t <= T:
        raise ValueError(f"left limit needs t in (S, T], got {t}")
    if side == "right" and not S <= t < T:
        raise ValueError(f"right limit needs t in [S, T), got {t}")
    if x is None:
        x = F.reference(t)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    F.check_tube(x, t)
    room = (t - S) if side == "left" else (T - t)
    h = min(h0 if h0 is not None else (T - S) / 8.0, room / 2.0)
    sign = -1.0 if side == "left" else 1.0
    prev = F(t + sign * h, x, a, check=False)
    gaps = []
    for _ in range(max_refine):
        h *= 0.5
        cur = F(t + sign * h, x, a, check=False)
        gap = hausdorff_distance(prev, cur)
        gaps.append(gap)
        if gap < tol_limit:
            return cur
        prev = cur
    raise LimitNotCertified(t, side, gaps)


def endpoint_modify(F: Multifunction, delta=None, tol_limit=TOL_LIMIT, max_refine=MAX_REFINE):
    """Replace the values at S and T by the one-sided limits F(S+) and F(T-).

    The replacement applies to states within ``delta`` of the reference arc
    (default: the declared tube radius); elsewhere F is unchanged.
    """
    S, T = F.horizon
    delta = F.delta_bar if delta is None else delta
    cache = {}

    def limit(t, side, x, a):
        key = (t, side, tuple(np.round(x, 15)), None if a is None else tuple(a))
        if key not in cache:
            cache[key] = one_sided_limit(F, t, side, x, a, tol_limit=tol_limit,
                                         max_refine=max_refine)
        return cache[key]

    def ev(t, x, a):
        if t == S and np.linalg.norm(x - F.reference(S)) <= delta:
            return limit(S, "right", x, a)
        if t == T and np.linalg.norm(x - F.reference(T)) <= delta:
            return limit(T, "left", x, a)
        return F.eval(t, x, a)

    for a in F.params():  # certify up front so failures surface here
        limit(S, "right", F.reference(S), a)
        limit(T, "left", F.reference(T), a)
    return replace(F, eval=ev, name=(F.name + "~") if F.name else "modified")


# -- builtin families ------------------------------------------------------

def interval_family(lower, upper, horizon, **kw):
    """1-D interval [lower(t), upper(t)]."""
    def ev(t, x, a):
        return CompactSet.interval(lower(t), upper(t))
    kw.setdefault("state_dependent", False)
    kw.setdefault("name", "interval")
    return Multifunction(ev, horizon, 1, **kw)


def ball_family(radius, horizon, dim=1, center=None, sides=64, **kw):
    """Ball of radius radius(t) about center(t) (origin by default)."""
    def ev(t, x, a):
        c = np.zeros(dim) if center is None else np.atleast_1d(center(t))
        return CompactSet.ball(c, radius(t), sides)
    kw.setdefault("state_dependent", False)
    kw.setdefault("name", "ball")
    return Multifunction(ev, horizon, dim, **kw)


def polytope_table_family(times, vertex_lists, horizon, hull=True, **kw):
    """Time-sampled vertex lists, constant from the left between sample times."""
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0):
        raise ValueError("polytope table times must be increasing")
    sets = [CompactSet(v, hull=hull) for v in vertex_lists]
    if len(sets) != len(times):
        raise ValueError("one vertex list per table time is required")
    dim = sets[0].dim

    def ev(t, x, a):
        j = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(sets) - 1))
        return sets[j]
    kw.setdefault("state_dependent", False)
    kw.setdefault("name", "polytope_table")
    return Multifunction(ev, horizon, dim, **kw)


def singleton_family(f, horizon, dim=1, **kw):
    """Single-valued F(t) = {f(t)}."""
    def ev(t, x, a):
        return CompactSet(np.atleast_1d(np.asarray(f(t), dtype=float))[None, :])
    kw.setdefault("state_dependent", False)
    kw.setdefault("name", "singleton")
    return Multifunction(ev, horizon, dim, **kw)


def callback_family(fn, horizon, dim, **kw):
    """Wrap a library callback fn(t, x, a) -> CompactSet or point array."""
    kw.setdefault("name", getattr(fn, "__name__", "callback"))
    return Multifunction(fn, horizon, dim, **kw)
