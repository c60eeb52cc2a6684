import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.distance import cdist

from bvham.setvalued import (CompactSet, DimensionError, contains, distance_to_set, hausdorff_distance,
                             nearest_point, support_function, unit_directions)


def dense_hull_samples(A: CompactSet, k=60, rng=None):
    """Independent sampler: random convex combinations plus edge points of the hull."""
    rng = np.random.default_rng(0) if rng is None else rng
    P = A.points
    if not A.hull:
        return P
    w = rng.dirichlet(np.ones(len(P)) * 0.3, size=k * 40)
    edges = [P[i] + s * (P[j] - P[i]) for i in range(len(P)) for j in range(len(P))
             for s in np.linspace(0, 1, k)]
    return np.vstack([P, w @ P, np.array(edges)])


def brute_hausdorff(A, B):
    a, b = dense_hull_samples(A), dense_hull_samples(B)
    D = cdist(a, b)
    return max(D.min(axis=1).max(), D.min(axis=0).max())


coords = st.floats(-3, 3, allow_nan=False, width=64)


def clouds(n, m_max=6):
    return st.integers(1, m_max).flatmap(lambda m: arrays(np.float64, (m, n), elements=coords))


# -- examples ---------------------------------------------------------------

def test_distance_identity():
    assert distance_to_set([0.0], CompactSet.point([0.0])) == 0.0


def test_distance_collinear_projection():
    A = CompactSet([[0, 0], [1, 0]], hull=True)
    assert distance_to_set([2, 0], A) == pytest.approx(1.0, abs=1e-14)


def test_distance_interior_point():
    A = CompactSet([[0, 0], [2, 0], [0, 2]], hull=True)
    assert distance_to_set([1, 1], A) == pytest.approx(0.0, abs=1e-14)


def test_hausdorff_intervals():
    assert hausdorff_distance(CompactSet.interval(-1, 1), CompactSet.interval(-1, 2)) == 1.0


def test_hausdorff_square_scaled():
    sq = CompactSet([[0, 0], [1, 0], [0, 1], [1, 1]], hull=True)
    big = sq.scale(2.0)
    d = hausdorff_distance(sq, big)
    assert d == pytest.approx(np.sqrt(2), abs=1e-12)
    # independent dense-sampling oracle (frozen value sqrt(2))
    assert brute_hausdorff(sq, big) == pytest.approx(np.sqrt(2), abs=1e-9)


def test_support_examples():
    assert support_function(CompactSet.point([0.0, 0.0]), [4.0, -1.0])[0] == 0.0
    val, arg = support_function(CompactSet([[-1, 0], [1, 0]], hull=True), [3, 7])
    assert val == 3.0 and np.array_equal(arg, [1.0, 0.0])
    disc = CompactSet.ball([0.0, 0.0], 1.0, sides=64)
    val, _ = support_function(disc, [0, 2])
    assert abs(val - 2.0) <= 2 * (1 - np.cos(np.pi / 64)) + 1e-15


def test_support_tie_break_lexicographic():
    A = CompactSet([[1, 1], [1, -1], [0, 5]], hull=False)
    _, arg = support_function(A, [1, 0])
    assert np.array_equal(arg, [1.0, -1.0])


def test_empty_and_mismatch_rejected():
    with pytest.raises(ValueError):
        CompactSet(np.zeros((0, 2)))
    with pytest.raises(DimensionError):
        distance_to_set([0, 0, 0], CompactSet.point([0, 0]))
    with pytest.raises(DimensionError):
        hausdorff_distance(CompactSet.point([0]), CompactSet.point([0, 0]))


def test_nearest_point_on_hull_matches_brute_force():
    A = CompactSet([[0, 0], [3, 0], [0, 2], [2, 2]], hull=True)
    x = np.array([4.0, 3.0])
    y = nearest_point(x, A)
    s = dense_hull_samples(A, k=400)
    assert np.linalg.norm(x - y) <= np.min(np.linalg.norm(s - x, axis=1)) + 1e-12
    assert contains(A, y, 1e-10)


def test_unit_directions_are_unit():
    for n in (1, 2, 3):
        d = unit_directions(n, 16)
        assert np.allclose(np.linalg.norm(d, axis=1), 1.0)


def test_hull_in_3d_distance():
    cube = CompactSet(np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], float), hull=True)
    assert distance_to_set([2.0, 0.5, 0.5], cube) == pytest.approx(1.0, abs=1e-12)
    assert distance_to_set([2.0, 2.0, 2.0], cube) == pytest.approx(np.sqrt(3), abs=1e-12)


# -- properties -------------------------------------------------------------

@given(st.integers(1, 3).flatmap(lambda n: st.tuples(clouds(n), clouds(n), st.booleans(), st.booleans())))
def test_hausdorff_symmetry_and_identity(data):
    a, b, ha, hb = data
    A, B = CompactSet(a, ha), CompactSet(b, hb)
    assert hausdorff_distance(A, B) == hausdorff_distance(B, A)
    assert hausdorff_distance(A, CompactSet(a, ha)) <= 1e-12


@given(st.integers(1, 3).flatmap(lambda n: st.tuples(clouds(n), clouds(n), clouds(n))))
def test_hausdorff_triangle(data):
    A, B, C = (CompactSet(x, hull=True) for x in data)
    assert hausdorff_distance(A, C) <= hausdorff_distance(A, B) + hausdorff_distance(B, C) + 1e-12


@given(st.integers(1, 3).flatmap(lambda n: st.tuples(clouds(n), arrays(np.float64, n, elements=coords),
                                                     arrays(np.float64, n, elements=coords),
                                                     st.floats(0, 5))))
def test_support_sublinear_and_homogeneous(data):
    a, p, q, lam = data
    A = CompactSet(a, hull=True)
    s = lambda v: support_function(A, v)[0]
    assert s(p + q) <= s(p) + s(q) + 1e-12 * (1 + abs(s(p)) + abs(s(q)))
    assert s(lam * p) == pytest.approx(lam * s(p), rel=1e-12, abs=1e-12)


@given(st.integers(1, 2).flatmap(lambda n: st.tuples(clouds(n, 5), clouds(n, 5))))
def test_hausdorff_equals_support_gap(data):
    A, B = CompactSet(data[0], hull=True), CompactSet(data[1], hull=True)
    count = 4000
    dirs = unit_directions(A.dim, count)
    sA = np.max(A.points @ dirs.T, axis=0)
    sB = np.max(B.points @ dirs.T, axis=0)
    gap = float(np.max(np.abs(sA - sB)))
    d = hausdorff_distance(A, B)
    # support functions are R-Lipschitz in p, so direction sampling loses at most R * spacing
    R = np.abs(A.points).sum(axis=1).max() + np.abs(B.points).sum(axis=1).max()
    spacing = np.pi / count if A.dim == 2 else 0.0
    assert gap <= d + 1e-12
    assert d - gap <= R * spacing + 1e-12


@given(st.integers(1, 3).flatmap(lambda n: st.tuples(clouds(n), arrays(np.float64, n, elements=coords))))
def test_distance_zero_on_points_and_projection_is_feasible(data):
    a, x = data
    A = CompactSet(a, hull=True)
    for p in a:
        assert distance_to_set(p, A) <= 1e-9
    y = nearest_point(x, A)
    assert contains(A, y, 1e-8)
    assert distance_to_set(x, A) == pytest.approx(np.linalg.norm(x - y), abs=1e-12)
