"""Compact sets in R^n stored as finite point clouds, optionally convexified.

Everything the rest of the package needs from set geometry goes through
three functions: :func:`distance_to_set`, :func:`hausdorff_distance` and
:func:`support_function`.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import ConvexHull, QhullError

__all__ = [
    "CompactSet",
    "DimensionError",
    "distance_to_set",
    "nearest_point",
    "hausdorff_distance",
    "support_function",
    "contains",
]

_RANK_TOL = 1e-12
_TIE_TOL = 1e-12


class DimensionError(ValueError):
    """Raised when operands live in spaces of different dimension."""

    def __init__(self, expected, got, what="operand"):
        super().__init__(f"dimension mismatch: expected {expected}, got {got} ({what})")
        self.expected = expected
        self.got = got


@dataclass(frozen=True, eq=False)
class CompactSet:
    """A non-empty compact set given by a finite list of points.

    With ``hull=True`` the set is the convex hull of ``points``.
    """

    points: np.ndarray
    hull: bool = False

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] == 0:
            raise ValueError("CompactSet needs a non-empty (m, n) array of points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("CompactSet points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "hull", bool(self.hull))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __repr__(self):
        kind = "hull" if self.hull else "points"
        return f"CompactSet({kind}, m={len(self.points)}, dim={self.dim})"

    # -- constructors -----------------------------------------------------
    @classmethod
    def point(cls, x):
        return cls(np.atleast_1d(np.asarray(x, dtype=float))[None, :])

    @classmethod
    def interval(cls, lo, hi):
        lo, hi = float(lo), float(hi)
        if hi < lo:
            raise ValueError(f"empty interval [{lo}, {hi}]")
        if hi == lo:
            return cls([[lo]])
        return cls([[lo], [hi]], hull=True)

    @classmethod
    def ball(cls, center, radius, sides=64):
        """Closed ball; exact in 1-D, an inscribed regular polygon / polyhedron otherwise."""
        c = np.atleast_1d(np.asarray(center, dtype=float))
        r = float(radius)
        if r < 0:
            raise ValueError("negative radius")
        n = c.size
        if r == 0:
            return cls(c[None, :])
        if n == 1:
            return cls.interval(c[0] - r, c[0] + r)
        return cls(c + r * unit_directions(n, sides), hull=True)

    # -- geometry ---------------------------------------------------------
    @cached_property
    def _geometry(self):
        return _HullGeometry(self.points) if self.hull else None

    @cached_property
    def vertices(self) -> np.ndarray:
        """Extreme points for hull sets, the full point list otherwise."""
        if not self.hull:
            return self.points
        return self._geometry.vertices

    @cached_property
    def bounds(self):
        """(lo, hi) of a 1-D set."""
        return float(self.points[:, 0].min()), float(self.points[:, 0].max())

    @property
    def is_interval(self) -> bool:
        return self.dim == 1 and (self.hull or len(self.points) == 1)

    def translate(self, shift):
        return CompactSet(self.points + np.asarray(shift, dtype=float), self.hull)

    def scale(self, factor):
        return CompactSet(self.points * float(factor), self.hull)


def unit_directions(n, count):
    """Deterministic, roughly uniform unit vectors in R^n."""
    if n == 1:
        return np.array([[-1.0], [1.0]])
    if n == 2:
        ang = 2 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(ang), np.sin(ang)])
    if n == 3:
        # Fibonacci sphere
        k = np.arange(count) + 0.5
        phi = np.arccos(1 - 2 * k / count)
        theta = np.pi * (1 + 5**0.5) * k
        return np.column_stack(
            [np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)]
        )
    eye = np.eye(n)
    return np.vstack([eye, -eye])


class _HullGeometry:
    """Affine reduction of a point cloud plus facet data of its hull (rank <= 3)."""

    def __init__(self, points):
        self.origin = points.mean(axis=0)
        centred = points - self.origin
        scale = max(1.0, float(np.abs(points).max()))
        if centred.shape[0] > 1:
            _, s, vt = np.linalg.svd(centred, full_matrices=False)
            rank = int(np.sum(s > _RANK_TOL * scale * max(centred.shape)))
        else:
            rank, vt = 0, np.zeros((0, points.shape[1]))
        if rank > 3:
            raise ValueError("convex-hull sets are supported up to affine dimension 3")
        self.rank = rank
        self.basis = vt[:rank].T  # (n, rank)
        y = centred @ self.basis
        self.coords = y
        if rank == 0:
            self.vertex_index = np.array([0])
            self.lo = self.hi = None
        elif rank == 1:
            lo_i, hi_i = int(np.argmin(y[:, 0])), int(np.argmax(y[:, 0]))
            self.vertex_index = np.unique([lo_i, hi_i])
            self.lo, self.hi = float(y[lo_i, 0]), float(y[hi_i, 0])
        else:
            try:
                ch = ConvexHull(y)
            except QhullError:  # nearly degenerate; jiggle-free fallback
                ch = ConvexHull(y, qhull_options="QJ")
            self.vertex_index = np.sort(ch.vertices)
            self.equations = ch.equations
            self.facets = [y[s] for s in ch.simplices]
        self.vertices = points[self.vertex_index]

    def project(self, x):
        """Nearest point of the hull to x (in ambient coordinates)."""
        d = x - self.origin
        y = d @ self.basis
        if self.rank == 0:
            return self.origin.copy()
        if self.rank == 1:
            yp = np.clip(y, self.lo, self.hi)
        else:
            if np.all(self.equations[:, :-1] @ y + self.equations[:, -1] <= 1e-13):
                yp = y
            else:
                best, yp = np.inf, y
                for f in self.facets:
                    cand = _project_simplex(y, f)
                    dist = float(np.sum((cand - y) ** 2))
                    if dist < best:
                        best, yp = dist, cand
        return self.origin + self.basis @ yp


def _project_simplex(y, verts):
    """Project y onto conv(verts) (k <= 4 vertices) by enumerating faces."""
    best, best_pt = np.inf, verts[0]
    k = len(verts)
    for size in range(1, k + 1):
        for idx in itertools.combinations(range(k), size):
            v = verts[list(idx)]
            if size == 1:
                cand = v[0]
            else:
                # affine combination v0 + D c minimizing |.-y|
                d = (v[1:] - v[0]).T
                c, *_ = np.linalg.lstsq(d, y - v[0], rcond=None)
                if np.any(c < -1e-14) or c.sum() > 1 + 1e-14:
                    continue
                cand = v[0] + d @ c
            dist = float(np.sum((cand - y) ** 2))
            if dist < best:
                best, best_pt = dist, cand
    return best_pt


def _check_dim(A, n, what="point"):
    if A.dim != n:
        raise DimensionError(A.dim, n, what)


def nearest_point(x, A: CompactSet) -> np.ndarray:
    """A point of A closest to x."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _check_dim(A, x.size)
    if not A.hull:
        i = int(np.argmin(np.sum((A.points - x) ** 2, axis=1)))
        return A.points[i].copy()
    return A._geometry.project(x)


def distance_to_set(x, A: CompactSet) -> float:
    """Euclidean distance from x to A (exact for point lists and hulls of rank <= 3)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _check_dim(A, x.size)
    if A.dim == 1 and A.is_interval:
        lo, hi = A.bounds
        return float(max(lo - x[0], x[0] - hi, 0.0))
    if not A.hull:
        return float(np.sqrt(np.min(np.sum((A.points - x) ** 2, axis=1))))
    return float(np.linalg.norm(x - A._geometry.project(x)))


def contains(A: CompactSet, x, tol=1e-12) -> bool:
    return distance_to_set(x, A) <= tol


def _excess(A: CompactSet, B: CompactSet) -> float:
    """sup_{a in A} d_B(a)."""
    if B.hull or (B.dim == 1 and B.is_interval):
        # d_B is convex, so its sup over conv(A) sits at a point of A
        src = A.vertices
        if B.dim == 1 and B.is_interval:
            lo, hi = B.bounds
            y = src[:, 0]
            return float(np.max(np.maximum(np.maximum(lo - y, y - hi), 0.0)))
        return max(distance_to_set(a, B) for a in src)
    if not A.hull:
        diff = A.points[:, None, :] - B.points[None, :, :]
        return float(np.sqrt(np.max(np.min(np.sum(diff**2, axis=2), axis=1))))
    # hull source, finite target: d_B is not convex
    if A.dim == 1:
        lo, hi = A.bounds
        b = np.sort(B.points[:, 0])
        cand = [lo, hi] + [0.5 * (u + v) for u, v in zip(b[:-1], b[1:]) if lo <= 0.5 * (u + v) <= hi]
        return max(float(np.min(np.abs(b - c))) for c in cand)
    samples = _hull_samples(A, 12)
    diff = samples[:, None, :] - B.points[None, :, :]
    return float(np.sqrt(np.max(np.min(np.sum(diff**2, axis=2), axis=1))))


def _hull_samples(A, level):
    """Points of conv(A): vertices plus barycentric grids on facet fans."""
    v = A.vertices
    c = v.mean(axis=0)
    out = [v, c[None, :]]
    w = np.linspace(0.0, 1.0, level + 1)
    for i, j in itertools.combinations(range(len(v)), 2):
        seg = v[i] + w[:, None] * (v[j] - v[i])
        fan = c + w[:, None, None] * (seg[None, :, :] - c)
        out.append(fan.reshape(-1, v.shape[1]))
    return np.vstack(out)


def hausdorff_distance(A: CompactSet, B: CompactSet) -> float:
    """Hausdorff distance max(sup_A d_B, sup_B d_A)."""
    if A.dim != B.dim:
        raise DimensionError(A.dim, B.dim, "set")
    if A is B or (A.hull == B.hull and np.array_equal(A.points, B.points)):
        return 0.0
    if A.dim == 1 and A.is_interval and B.is_interval:
        alo, ahi = A.bounds
        blo, bhi = B.bounds
        return float(max(abs(alo - blo), abs(ahi - bhi)))
    return max(_excess(A, B), _excess(B, A))


def support_function(A: CompactSet, p):
    """max_{v in A} p.v and an attaining point (lexicographically smallest on ties)."""
    p = np.atleast_1d(np.asarray(p, dtype=float))
    _check_dim(A, p.size, "direction")
    pts = A.vertices if A.hull else A.points
    vals = pts @ p
    top = float(vals.max())
    ties = np.flatnonzero(vals >= top - _TIE_TOL * max(1.0, abs(top)))
    if len(ties) > 1:
        cand = pts[ties]
        order = np.lexsort(cand.T[::-1])
        arg = cand[order[0]]
    else:
        arg = pts[ties[0]]
    return top, arg.copy()
