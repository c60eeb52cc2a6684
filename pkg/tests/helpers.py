"""Problem builders shared by the tests."""
import numpy as np

from bvham.multifun import Arc, interval_family, polytope_table_family
from bvham.trajectory import EndpointSet, Problem

H = (0.0, 1.0)


def linear_problem(upper=lambda t: 1.0, lower=lambda t: -1.0, ref=((0.0, 1.0), ((0.0,), (1.0,))),
                   g=lambda a, b: -b[0], h=None, C=None, L=None, k_h=1.0, delta_bar=0.5, horizon=H):
    xb = Arc(np.asarray(ref[0], float), np.asarray(ref[1], float))
    F = interval_family(lower, upper, horizon).with_reference(xb, delta_bar)
    return Problem(F, g, C or EndpointSet("fixed-initial", [0.0]), L=L, h=h, k_h=k_h)


def autonomous():
    return linear_problem()


def lipschitz():
    grid = np.linspace(0, 1, 65)
    return linear_problem(lambda t: 1 + t, lambda t: -(1 + t), (grid, (grid + grid**2 / 2)[:, None]))


def jump():
    return linear_problem(lambda t: 1.0 if t < 0.5 else 2.0, ref=((0, 0.5, 1), ((0,), (0.5,), (1.5,))))


def constrained():
    return linear_problem(ref=((0, 0.5, 1), ((0,), (0.5,), (0.5,))), h=lambda x: x[0] - 0.5)


def boundary_start():
    return linear_problem(ref=((0, 1), ((0,), (0,))), g=lambda a, b: b[0], h=lambda x: -x[0])


def fixed_both():
    return linear_problem(ref=((0, 1), ((0,), (0.5,))), g=lambda a, b: 0.0,
                          C=EndpointSet("fixed-both", [0.0], [0.5]),
                          L=lambda t, x, v: 0.5 * float(np.asarray(v).ravel()[0]) ** 2)


def random_vertex_problem(rng, N):
    """1-D instance with finite (non-convexified) velocity sets changing at every cell."""
    times = np.linspace(0, 1, N + 1)[:-1]
    m = 2 if N > 9 else 3
    verts = [np.sort(rng.uniform(-1, 1, m))[:, None] for _ in range(N)]
    xb = Arc([0.0, 1.0], [[0.0], [0.0]])
    F = polytope_table_family(times, verts, H, hull=False).with_reference(xb, 20.0)
    c = rng.uniform(-1, 1)
    h = None
    if rng.uniform() < 0.5:
        s, b = rng.choice([-1.0, 1.0]), rng.uniform(0.05, 0.4)
        h = lambda x, s=s, b=b: s * x[0] - b
    L = None
    if rng.uniform() < 0.5:
        w = rng.uniform(0.1, 1.0)
        L = lambda t, x, v, w=w: w * float(v[0]) ** 2
    return Problem(F, lambda a, b, c=c: c * b[0], EndpointSet("fixed-initial", [0.0]), L=L, h=h)
