"""Cumulative variation of a multifunction along a reference arc.

The sup over partitions of [S, t] with mesh <= eps is approximated from
below by dynamic programming over dyadic cells of every level whose width
is <= eps, so mixed-level partitions are included.  Values are reported at
the knots of the finest level.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .multifun import Arc, LimitNotCertified, Multifunction, TubeViolation, one_sided_limit
from .setvalued import CompactSet, contains, hausdorff_distance, unit_directions

__all__ = [
    "Partition",
    "CumulativeVariation",
    "VariationError",
    "partition_sum",
    "cumulative_variation",
    "normalize",
    "restriction_compare",
    "RestrictionReport",
    "interpolant",
    "Interpolant",
    "InterpolantError",
    "richardson",
    "limit_table",
    "write_staircase_csv",
    "total_variation",
]

TOL_ETA = 1e-6
N_TUBE = 8
M_BALL = 16


class VariationError(RuntimeError):
    pass


class InterpolantError(ValueError):
    def __init__(self, offending):
        super().__init__(f"jump sizes exceed the variation increments at j = {offending}")
        self.offending = list(offending)


@dataclass(frozen=True)
class Partition:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        if len(t) < 2:
            raise ValueError("a partition needs at least two points")
        if np.any(np.diff(t) <= 0):
            raise ValueError("partition times must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, S, T, N):
        return cls(np.linspace(S, T, int(N) + 1))

    @property
    def diam(self):
        return float(np.max(np.diff(self.times)))

    @property
    def n_cells(self):
        return len(self.times) - 1


def total_variation(values):
    """Classical total variation of a sampled function (sum of |increments|)."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    return float(np.sum(np.linalg.norm(np.diff(v, axis=0), axis=1)))


# -- tube sampling ---------------------------------------------------------

def _tube_samples(F: Multifunction, t0, t1, delta, n_tube, m_ball):
    if delta > F.delta_bar * (1 + 1e-12):
        raise TubeViolation(t0, F.reference(t0), delta, F.delta_bar)
    if not F.state_dependent:
        return F.reference(t0)[None, :]
    ts = np.linspace(t0, t1, n_tube) if t1 > t0 else np.array([t0])
    centres = np.atleast_2d(F.reference(ts))
    if delta <= 0:
        return centres
    dirs = unit_directions(F.dim, m_ball)
    ring = centres[:, None, :] + delta * dirs[None, :, :]
    return np.vstack([centres, ring.reshape(-1, F.dim)])


def _cell_term(F, t0, t1, delta, params, n_tube, m_ball):
    best = 0.0
    for x in _tube_samples(F, t0, t1, delta, n_tube, m_ball):
        for a in params:
            d = hausdorff_distance(F(t1, x, a, check=False), F(t0, x, a, check=False))
            if d > best:
                best = d
    return best


def partition_sum(F: Multifunction, partition: Partition, delta, n_tube=N_TUBE, m_ball=M_BALL,
                  params=None) -> float:
    """Sum over cells of the tube-and-parameter sup of d_H(F(t_{i+1}), F(t_i))."""
    if isinstance(partition, Partition):
        times = partition.times
    else:
        times = Partition(partition).times
    S, T = F.horizon
    if times[0] < S - 1e-14 or times[-1] > T + 1e-14:
        raise ValueError("partition leaves the horizon")
    params = F.params() if params is None else params
    total = 0.0
    for t0, t1 in zip(times[:-1], times[1:]):  # fixed order keeps the sum reproducible
        total += _cell_term(F, t0, t1, delta, params, n_tube, m_ball)
    return total


# -- staircases ------------------------------------------------------------

def _one_sided_estimates(values):
    """Right and left limit estimates at each knot by two-point extrapolation."""
    v = np.asarray(values, dtype=float)
    n = len(v)
    right = v.copy()
    left = v.copy()
    for k in range(n - 1):
        d1 = v[k + 1] - v[k]
        d2 = v[k + 2] - v[k + 1] if k + 2 < n else 0.0
        right[k] = v[k] + min(max(d1 - d2, 0.0), d1)
    for k in range(1, n):
        e1 = v[k] - v[k - 1]
        e2 = v[k - 1] - v[k - 2] if k >= 2 else 0.0
        left[k] = v[k] - min(max(e1 - e2, 0.0), e1)
    return right, left


@dataclass(frozen=True, eq=False)
class CumulativeVariation:
    """Nondecreasing staircase on knots; between knots the left value applies."""

    knots: np.ndarray
    values: np.ndarray
    delta: float = 0.0
    eps: float = np.inf
    refined: bool = False
    normalized: bool = False
    level: int = 0
    gap: float = np.nan
    right_values: Optional[np.ndarray] = None
    left_values: Optional[np.ndarray] = None

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float).ravel()
        v = np.asarray(self.values, dtype=float).ravel()
        if len(k) != len(v) or len(k) < 2:
            raise ValueError("knots and values must have equal length >= 2")
        if np.any(np.diff(k) <= 0):
            raise ValueError("knots must be strictly increasing")
        if np.any(np.diff(v) < -1e-12 * max(1.0, float(np.abs(v).max()))):
            raise VariationError("staircase is not monotone (oracle impure?)")
        r, l = _one_sided_estimates(v)
        if self.right_values is None:
            object.__setattr__(self, "right_values", r)
        if self.left_values is None:
            object.__setattr__(self, "left_values", l)
        object.__setattr__(self, "knots", k)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_values(cls, knots, values, **kw):
        return cls(knots, values, **kw)

    @property
    def S(self):
        return float(self.knots[0])

    @property
    def T(self):
        return float(self.knots[-1])

    def _index(self, t):
        return np.clip(np.searchsorted(self.knots, t, side="right") - 1, 0, len(self.knots) - 1)

    def __call__(self, t):
        return self.values[self._index(t)] if np.ndim(t) else float(self.values[self._index(t)])

    def increment(self, s, t):
        return self(t) - self(s)

    def right_limit(self, t):
        """eta(t+) estimate; exact value at T."""
        k = int(self._index(t))
        if self.knots[k] == t:
            return float(self.right_values[k])
        return float(self.values[k])

    def left_limit(self, t):
        k = int(self._index(t))
        if self.knots[k] == t:
            return float(self.left_values[k])
        return float(self.values[k])

    def jumps(self, tol=1e-9):
        """(t, size) for knots where the right and left estimates differ by more than tol."""
        size = self.right_values - self.left_values
        idx = np.flatnonzero(size > tol)
        return [(float(self.knots[i]), float(size[i])) for i in idx]

    def scaled(self, factor):
        f = float(factor)
        return replace(self, values=self.values * f, right_values=self.right_values * f,
                       left_values=self.left_values * f)

    def on(self, times):
        """Values at the given times (left rule)."""
        return np.asarray(self(np.asarray(times, dtype=float)), dtype=float)


def _levels(S, T, eps, refine_levels, base_cells):
    if base_cells is None:
        base_cells = max(1, int(np.ceil((T - S) / eps * (1 - 1e-12)))) if np.isfinite(eps) else 1
    finest = base_cells * 2**refine_levels
    h = (T - S) / finest
    # stride (in finest cells) of each admissible level, finest first
    strides = [2**j for j in range(refine_levels + 1) if 2**j * h <= eps * (1 + 1e-12)]
    if not strides:
        raise ValueError(f"no refinement level has cells narrower than eps={eps}")
    return finest, strides


def _dp(term, M, strides, step=1):
    """Best mixed-dyadic partition sum at knots 0, step, 2*step, ..., M."""
    ks = range(0, M + 1, step)
    V = {0: 0.0}
    for k in ks:
        if k == 0:
            continue
        best = -np.inf
        for s in strides:
            if s >= step and k % s == 0 and (k - s) in V:
                cand = V[k - s] + term(k - s, k)
                if cand > best:
                    best = cand
        V[k] = best
    return np.array([V[k] for k in ks])


def cumulative_variation(F: Multifunction, delta, eps=None, refine_levels=8, *, base_cells=None,
                         n_tube=N_TUBE, m_ball=M_BALL, tol_eta=TOL_ETA, params=None,
                         horizon=None, cell_term=None) -> CumulativeVariation:
    """Staircase of the (delta, eps)-perturbed cumulative variation of F.

    ``refined`` is set when the finest level and the one below it agree
    within ``tol_eta`` at every shared knot.  ``cell_term(t0, t1)`` may
    replace the generic tube-and-parameter sup of d_H(F(t1), F(t0)).
    """
    S, T = F.horizon if horizon is None else horizon
    eps = (T - S) if eps is None else float(eps)
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = F.params() if params is None else params
    M, strides = _levels(S, T, eps, int(refine_levels), base_cells)
    knots = S + (T - S) * np.arange(M + 1) / M
    knots[-1] = T
    cache = {}

    def term(i, k):
        key = (i, k)
        if key not in cache:
            cache[key] = (_cell_term(F, knots[i], knots[k], delta, params, n_tube, m_ball)
                          if cell_term is None else float(cell_term(knots[i], knots[k])))
        return cache[key]

    fine = _dp(term, M, strides)
    coarse_strides = [s for s in strides if s >= 2]
    if coarse_strides:
        coarse = _dp(term, M, coarse_strides, step=2)
        gap = float(np.max(np.abs(fine[::2] - coarse)))
        refined = gap < tol_eta
    else:
        gap, refined = np.nan, False
    if np.any(np.diff(fine) < -1e-12):
        raise VariationError("dynamic programme produced a decreasing staircase")
    right, left = _probed_limits(F, knots, fine, delta, params, n_tube, m_ball, tol_eta)
    return CumulativeVariation(knots, fine, delta=float(delta), eps=eps, refined=bool(refined),
                               level=int(refine_levels), gap=gap, right_values=right, left_values=left)


def _side_jump(F, t, side, delta, params, n_tube, m_ball, h0):
    """sup over tube samples and parameters of d_H(F(t), F(t+-)); probes stay within h0 of t."""
    best = 0.0
    for x in _tube_samples(F, t, t, delta, n_tube, m_ball):
        for a in params:
            lim = one_sided_limit(F, t, side, x, a, h0=h0)
            best = max(best, hausdorff_distance(lim, F(t, x, a, check=False)))
    return best


def _probed_limits(F, knots, values, delta, params, n_tube, m_ball, tol):
    """Right and left limits at knots, probing F wherever the staircase moves.

    A rise over (t_k, t_{k+1}] may come from a jump at t_k+ or at t_{k+1}; the
    knot values alone cannot tell, so the one-sided jumps of F decide.  Knots
    where a probe is not certified keep the extrapolated estimate.
    """
    right, left = _one_sided_estimates(values)
    h0 = 0.5 * float(np.min(np.diff(knots)))
    rise = np.diff(values) > tol
    for k in range(len(knots)):
        if k + 1 < len(knots) and rise[k]:
            try:
                j = _side_jump(F, knots[k], "right", delta, params, n_tube, m_ball, h0)
                j = j if j > tol else 0.0  # below tol is probe residue, not a jump
                right[k] = min(values[k] + j, values[k + 1])
            except LimitNotCertified:
                pass
        if k > 0 and rise[k - 1]:
            try:
                j = _side_jump(F, knots[k], "left", delta, params, n_tube, m_ball, h0)
                j = j if j > tol else 0.0
                left[k] = max(values[k] - j, values[k - 1])
            except LimitNotCertified:
                pass
    return right, left


def normalize(eta: CumulativeVariation) -> CumulativeVariation:
    """Replace interior values by right limits; endpoint values are kept."""
    v = eta.values.copy()
    v[1:-1] = eta.right_values[1:-1]
    return replace(eta, values=v, normalized=True)


def richardson(values, ratio=2.0, order=1.0):
    """One Richardson step on a sequence computed at parameters shrinking by ``ratio``."""
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        return float(v[-1])
    f = ratio**order
    return float((f * v[-1] - v[-2]) / (f - 1))


def limit_table(F: Multifunction, deltas, epss, t=None, refine_levels=8, **kw):
    """eta^delta_eps(t) on a (delta, eps) grid plus extrapolated limits.

    Rows follow ``deltas``; within a row eps decreases.  Returns a dict with
    the table, the per-delta extrapolation in eps and the final extrapolation
    in delta.
    """
    t = F.T if t is None else t
    table = np.array([[cumulative_variation(F, d, e, refine_levels, **kw)(t) for e in epss]
                      for d in deltas])
    by_delta = np.array([richardson(row) for row in table])
    return {"deltas": list(map(float, deltas)), "epss": list(map(float, epss)),
            "table": table, "eta_delta": by_delta, "eta": richardson(by_delta)}


def write_staircase_csv(path, etas):
    """CSV with columns t, eta, delta, eps, level (one block per staircase)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "eta", "delta", "eps", "level"])
        for eta in etas:
            for t, v in zip(eta.knots, eta.values):
                w.writerow([repr(float(t)), repr(float(v)), repr(eta.delta), repr(eta.eps), eta.level])


# -- restriction comparison ------------------------------------------------

@dataclass
class RestrictionReport:
    times: np.ndarray
    eta_A: np.ndarray
    eta_A1: np.ndarray
    margin: float
    worst_pair: tuple

    @property
    def passed(self):
        return self.margin >= -1e-9


def restriction_compare(F: Multifunction, A1: CompactSet, A: CompactSet, grid, delta=0.0,
                        eps=None, refine_levels=6, **kw) -> RestrictionReport:
    """Compare the variation of F over parameter sets A1 and A on grid intervals.

    margin = min over grid pairs s < t of (increment over A) - (increment over A1).
    """
    pts = A1.vertices if A1.hull else A1.points
    bad = [i for i, p in enumerate(pts) if not contains(A, p, 1e-12)]
    if bad:
        raise ValueError(f"A1 is not contained in A (points {bad})")
    times = grid.times if isinstance(grid, Partition) else np.asarray(grid, dtype=float)
    etaA = cumulative_variation(replace(F, param_set=A), delta, eps, refine_levels, **kw).on(times)
    etaA1 = cumulative_variation(replace(F, param_set=A1), delta, eps, refine_levels, **kw).on(times)
    dA = etaA[None, :] - etaA[:, None]
    dA1 = etaA1[None, :] - etaA1[:, None]
    iu = np.triu_indices(len(times), 1)
    diff = (dA - dA1)[iu]
    w = int(np.argmin(diff))
    return RestrictionReport(times, etaA, etaA1, float(diff[w]),
                             (float(times[iu[0][w]]), float(times[iu[1][w]])))


# -- interpolants ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Interpolant:
    """Jump interpolant m and its eta-reparametrized companion m_tilde.

    m takes the value m0 + d_1 + ... + d_k on [t_k, t_{k+1}); m_tilde agrees
    with m at grid points and spreads each jump d_{k+1} across
    [t_k, t_{k+1}) in proportion to the growth of eta.
    """

    grid: np.ndarray
    node_values: np.ndarray
    eta: CumulativeVariation

    @property
    def m(self) -> Arc:
        return Arc(self.grid, self.node_values, "left")

    def m_tilde(self, t):
        scalar = np.ndim(t) == 0
        t = np.atleast_1d(np.asarray(t, dtype=float))
        g, m = self.grid, self.node_values
        k = np.clip(np.searchsorted(g, t, side="right") - 1, 0, len(g) - 2)
        e_t = self.eta.on(t)
        e0 = self.eta.on(g[k])
        e1 = self.eta.on(g[k + 1])
        de = e1 - e0
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(de > 0, (e_t - e0) / np.where(de > 0, de, 1.0), 0.0)
        out = m[k] + (m[k + 1] - m[k]) * frac
        out = np.where(t >= g[-1], m[-1], out)
        return float(out[0]) if scalar else out

    def m_tilde_arc(self) -> Arc:
        ts = np.union1d(self.grid, self.eta.knots[(self.eta.knots >= self.grid[0])
                                                  & (self.eta.knots <= self.grid[-1])])
        return Arc(ts, self.m_tilde(ts), "left")


def interpolant(eta: CumulativeVariation, grid, jump_data, m0=0.0, slack=1e-12) -> Interpolant:
    """Build the interpolants from jumps d_1..d_N (d_j at t_j; d_N may be omitted)."""
    g = grid.times if isinstance(grid, Partition) else np.asarray(grid, dtype=float)
    d = np.asarray(jump_data, dtype=float).ravel()
    N = len(g) - 1
    if len(d) == N - 1:
        d = np.append(d, 0.0)
    if len(d) != N:
        raise ValueError(f"expected {N - 1} or {N} jump values, got {len(d)}")
    inc = np.diff(eta.on(g))
    scale = max(1.0, float(np.abs(eta.values).max()))
    bad = [j + 1 for j in range(N) if abs(d[j]) > inc[j] + slack * scale]
    if bad:
        raise InterpolantError(bad)
    nodes = float(m0) + np.concatenate([[0.0], np.cumsum(d)])
    return Interpolant(g, nodes, eta)
