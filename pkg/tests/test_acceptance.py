"""Acceptance suite: one test per criterion, each printing a single pass/fail line."""
import time

import numpy as np
import pytest

from bvham.calcvar import VariationalProblem, lipschitz_certificate
from bvham.conditions import check_nondegeneracy, check_theorem1, trivial_multiplier
from bvham.hamiltonian import bv_verdict, trace, zero_staircase
from bvham.multifun import Arc, callback_family, endpoint_modify, interval_family, one_sided_limit, singleton_family
from bvham.pipeline import run_stage
from bvham.setvalued import CompactSet, hausdorff_distance
from bvham.transcription import exhaustive_cost, left_sample, solve_penalized
from bvham.variation import Partition, cumulative_variation, interpolant, normalize, restriction_compare

import helpers
from helpers import H


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\ncriterion {number:2d} {title}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


def dense_tv(f, n=200_001):
    y = np.array([f(t) for t in np.linspace(0, 1, n)])
    return float(np.abs(np.diff(y)).sum())


def square(t):
    return 1.0 if (0.25 <= t < 0.5 or t >= 0.75) else 0.0


def test_c01_metric_axioms(verdict):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(500):
        n = rng.integers(1, 4)
        A, B, C = (CompactSet(rng.normal(size=(rng.integers(1, 7), n)), hull=bool(rng.integers(2)))
                   for _ in range(3))
        dab, dba = hausdorff_distance(A, B), hausdorff_distance(B, A)
        dac, dbc = hausdorff_distance(A, C), hausdorff_distance(B, C)
        worst = max(worst, abs(dab - dba), hausdorff_distance(A, CompactSet(A.points, A.hull)),
                    dac - dab - dbc)
    dt = time.perf_counter() - t0
    verdict(1, "Hausdorff axioms", worst <= 1e-12 and dt < 5, f"worst violation {worst:.2e}, {dt:.2f}s")


def test_c02_variation_oracle(verdict):
    cases = [("step", lambda t: 0.0 if t < 0.3 else 2.0, 1e-12), ("ramp", lambda t: t, 1e-12),
             ("t^2", lambda t: t * t, 1e-12), ("sin", lambda t: np.sin(2 * np.pi * t), 1e-3),
             ("square", square, 1e-12)]
    t0 = time.perf_counter()
    errs = {}
    for name, f, tol in cases:
        eta = cumulative_variation(singleton_family(f, H), 0.0, 1 / 64, 4)
        errs[name] = (abs(eta(1.0) - dense_tv(f)), tol)
    dt = time.perf_counter() - t0
    ok = all(e <= tol for e, tol in errs.values()) and dt < 10
    verdict(2, "variation vs dense TV", ok, ", ".join(f"{k} {e:.1e}" for k, (e, _) in errs.items()) + f", {dt:.2f}s")


def test_c03_endpoint_identity(verdict):
    f = lambda t: 0.0 if t == 0.0 else (1.0 if t < 0.5 else 3.0)
    F = singleton_family(f, H)
    eta = cumulative_variation(F, 0.0, 1 / 32, 2)
    etat = cumulative_variation(endpoint_modify(F), 0.0, 1 / 32, 2)
    defect = hausdorff_distance(F(0.0), one_sided_limit(F, 0.0, "right"))
    pairs = [(0.1, 0.4), (0.2, 0.7), (0.45, 0.9), (0.05, 0.95)]
    inc = max(abs(eta.increment(s, t) - etat.increment(s, t)) for s, t in pairs)
    d_end = abs((eta.right_limit(0.0) - etat.right_limit(0.0)) - defect)
    verdict(3, "endpoint modification identity", inc <= 2e-6 and d_end <= 1e-6,
            f"increment gap {inc:.1e}, endpoint defect error {d_end:.1e}")


def test_c04_restriction_monotone(verdict):
    worst = np.inf
    for seed in range(100):
        rng = np.random.default_rng(seed)
        A = CompactSet(rng.normal(size=(4, 2)), hull=True)
        A1 = CompactSet(rng.dirichlet(np.ones(4), size=2) @ A.points, hull=True)
        u = rng.uniform(-1, 1, size=2)
        F = callback_family(lambda t, x, a, u=u: CompactSet([[float(u @ a) * (1 + square(t))]]), H, 1)
        rep = restriction_compare(F, A1, A, Partition.uniform(0, 1, 4), eps=1 / 8, refine_levels=1)
        worst = min(worst, rep.margin)
    verdict(4, "restriction monotonicity", worst >= -1e-9, f"min margin {worst:.2e} over 100 instances")


def test_c05_interpolant_suite(verdict):
    fixtures = [lambda t: t, lambda t: t * t, square, lambda t: np.sin(2 * np.pi * t),
                lambda t: np.sin(2 * np.pi * t) + square(t), lambda t: 0.0 if t < 0.5 else 1.0,
                lambda t: np.cos(5 * t), lambda t: abs(t - 0.3), lambda t: 2.0 if t >= 0.6 else -1.0,
                lambda t: np.exp(t) * square(t)]
    rng = np.random.default_rng(5)
    grid_misses, violations, pairs = 0, 0, 0
    for f in fixtures:
        eta = normalize(cumulative_variation(singleton_family(f, H), 0.0, 1 / 32, 2))
        g = Partition.uniform(0, 1, 8)
        inc = np.diff(eta.on(g.times))
        I = interpolant(eta, g, inc * rng.uniform(-1, 1, len(inc)))
        grid_misses += int(not np.array_equal(I.m_tilde(g.times), I.m(g.times)[:, 0]))
        s, t = np.sort(rng.uniform(0, 1, (2, 1000)), axis=0)
        violations += int(np.sum(np.abs(I.m_tilde(t) - I.m_tilde(s)) > eta.on(t) - eta.on(s) + 1e-12))
        pairs += 1000
    verdict(5, "interpolant equalities and bound", grid_misses == 0 and violations == 0,
            f"{grid_misses} grid mismatches, {violations} violations in {pairs} pairs")


def test_c06_constancy(verdict):
    r = run_stage(helpers.autonomous(), 0, 64, 10.0)
    tv = r.trace.total_variation
    verdict(6, "autonomous trace constancy", tv <= 1e-6, f"trace variation {tv:.2e}")


def test_c07_lipschitz_inheritance(verdict):
    r = run_stage(helpers.lipschitz(), 0, 128, 10.0)
    tr, qn = r.trace, r.multipliers.q_inf_norm()
    slope = float(np.max(np.abs(np.diff(tr.values)) / np.diff(tr.times)))
    verdict(7, "Lipschitz inheritance", slope <= qn * (1 + 1e-3), f"max slope {slope:.6f}, |q| {qn:.6f}")


def test_c08_bv_tightness(verdict):
    N = 256
    F = interval_family(lambda t: -1, lambda t: 1.0 if t < 0.5 else 2.0, H)
    g = np.linspace(0, 1, N + 1)
    xb = Arc(g, np.where(g < 0.5, g, 0.5 + 2 * (g - 0.5)))
    tr = trace(F, None, 1.0, xb, Arc(g, np.ones(N + 1), "right"))
    etaF = normalize(cumulative_variation(F, 0.0, 1 / 64, 1, base_cells=64))
    dr = max(abs(d) for _, d in tr.jumps())
    d_eta = etaF.right_limit(0.5) - etaF.left_limit(0.5)
    rep = bv_verdict(tr, etaF, zero_staircase(0, 1), 1.0, 1.0, bv_tol=1e-8)
    analytic = abs(dr - 1.0) <= 1e-8 and abs(dr - d_eta) <= 1e-8 and abs(rep.min_margin) <= 1e-8

    r = run_stage(helpers.jump(), 0, N, 10.0)
    qn = r.multipliers.q_inf_norm()
    jumps = [abs(d) for t, d in r.trace.jumps() if abs(t - 0.5) <= 1.5 / N]
    dr_p = max(jumps, default=0.0)
    e = r.eta_F
    d_eta_p = e.right_limit(0.5) - e.left_limit(0.5)
    gap = abs(dr_p - qn * d_eta_p)
    verdict(8, "BV inheritance tightness", analytic and gap <= 1e-3,
            f"analytic |dr| {dr:.10f}; pipeline |dr| {dr_p:.6f} vs |q| * jump(eta) {qn * d_eta_p:.6f}")


def test_c09_jump_estimate_all_runs(verdict):
    runs = [(helpers.autonomous, 32), (helpers.lipschitz, 64), (helpers.jump, 128), (helpers.constrained, 64),
            (helpers.boundary_start, 32), (helpers.fixed_both, 32)]
    worst = min(run_stage(make(), 0, N, 10.0).min_jump_margin for make, N in runs)
    verdict(9, "jump estimate on every run", worst >= -1e-6, f"min margin {worst:.2e} over {len(runs)} runs")


def test_c10_degeneracy(verdict):
    P = helpers.boundary_start()
    r = run_stage(P, 0, 64, 10.0)
    x = r.solution.x
    T0 = trivial_multiplier(P, x)
    rep = check_theorem1(P, x, T0)
    first = all(rep[k]["passed"] and rep[k]["value"] <= 1e-10 for k in ("ii_adjoint", "iii_weierstrass")) \
        and rep["i_nontriviality"]["passed"]
    nd0 = check_nondegeneracy(P, x, T0)
    nd = check_nondegeneracy(P, x, r.multipliers)
    pipe = nd.inward_margin >= -1e-6 or nd.value >= 1e-3
    ok = first and nd0.value == 0.0 and not nd0.nondegenerate and pipe and nd.inward_margin < -1e-6
    verdict(10, "degeneracy fixture", ok,
            f"trivial nd value {nd0.value}, pipeline lambda+mu {nd.value:.4f}, inward margin {nd.inward_margin:.2e}")


def test_c11_solver_vs_enumeration(verdict):
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    worst, methods = 0.0, set()
    for _ in range(50):
        N = int(rng.integers(2, 17))
        P = helpers.random_vertex_problem(rng, N)
        stage = left_sample(P.F, N, L=P.L)
        sol = solve_penalized(P, stage, 5.0, 0.05)
        methods.add(sol.method)
        worst = max(worst, abs(sol.cost - exhaustive_cost(P, stage, 5.0, 0.05)))
    dt = time.perf_counter() - t0
    verdict(11, "solver vs enumeration", worst <= 1e-9 and dt < 30,
            f"max gap {worst:.1e}, methods {sorted(methods)}, {dt:.2f}s")


def test_c12_calcvar_certificate(verdict):
    c = lambda t: 1.0 if t >= 0.5 else 0.0
    V = VariationalProblem(lambda t, x, v: 0.5 * float(v @ v) + c(t) * float(x[0]), H, [0.0], [1.0],
                           theta=lambda r: 0.5 * r * r, alpha=1.0, delta=0.1)
    cert = lipschitz_certificate(V, levels=(64, 128, 256))
    d = cert.details
    ok = cert.certified and d["step_margin"] >= -1e-6 and d["slope_drift"] < 1e-2
    verdict(12, "calcvar Lipschitz certificate", ok,
            f"step margin {d['step_margin']:.1e}, slope drift {d['slope_drift']:.2e}, K {cert.K:.4f}")
