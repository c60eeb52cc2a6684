import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bvham.hamiltonian import eval_H
from bvham.multifun import Arc, interval_family, singleton_family
from bvham.pipeline import run_stage
from bvham.transcription import (MultiplierSet, PenaltySchedule, _Costs, _tree_dp, exhaustive_cost,
                                 extract_multipliers, left_sample, read_multipliers_json, solve_penalized,
                                 write_multipliers_json)

import helpers
from helpers import H


def test_left_sample_constant_and_staged():
    F = interval_family(lambda t: -1, lambda t: 1, H)
    st_ = left_sample(F, 5)
    assert all(st_.F_stage(j).bounds == (-1.0, 1.0) for j in range(5))
    G = left_sample(singleton_family(lambda t: t, H), 4)
    assert [G.F_stage(j).points[0, 0] for j in range(4)] == [0.0, 0.25, 0.5, 0.75]
    with pytest.raises(ValueError):
        left_sample(F, 1)


def test_left_sample_defect_bound_square_wave():
    from bvham.trajectory import defect
    from bvham.variation import cumulative_variation
    sq = lambda t: 1.0 if (0.25 <= t < 0.5 or t >= 0.75) else 0.0
    F = singleton_family(sq, H)
    xb = Arc.from_function(lambda t: 0.0, np.linspace(0, 1, 2))
    # an F-trajectory: integral of the square wave
    g = np.linspace(0, 1, 401)
    xb = Arc(g, np.cumsum(np.concatenate([[0.0], [sq(t) / 400 for t in g[:-1]]])))
    eta = cumulative_variation(F, 0.0, 1 / 16, 2)
    for N in (4, 8, 16, 32):
        d = defect(left_sample(F, N).as_multifunction(), xb)
        assert d <= 1.0 / N * (eta(1.0) - eta(0.0)) + 1e-12


def test_schedule_validation():
    with pytest.raises(ValueError):
        PenaltySchedule([], [])
    with pytest.raises(ValueError):
        PenaltySchedule([8, 16], [10.0, 5.0])
    s = PenaltySchedule([8], [1.0], [0.1], [0.1])
    assert not s.coupling_ok(1.0) and s.coupling_ok(0.4)
    assert PenaltySchedule.default_beta(0.1, 1.0, 10) == pytest.approx(0.3)


def test_bang_arc_for_linear_objective():
    P = helpers.autonomous()
    sol = solve_penalized(P, left_sample(P.F, 16), 10.0, 0.1)
    assert np.allclose(sol.x.values[:, 0], sol.x.grid, atol=1e-9)


def test_unconstrained_multipliers_have_no_measure():
    P = helpers.autonomous()
    sol = solve_penalized(P, left_sample(P.F, 16), 10.0, 0.1)
    M = extract_multipliers(P, sol)
    assert M.mu_total() == 0.0
    assert np.allclose(M.q.values, M.p.values)
    assert M.nontriviality() == pytest.approx(1.0)


def test_fixed_both_constant_costate():
    P = helpers.linear_problem(ref=((0, 1), ((0,), (0.5,))), g=lambda a, b: 0.0,
                               C=helpers.EndpointSet("fixed-both", [0.0], [0.5]))
    sol = solve_penalized(P, left_sample(P.F, 16), 10.0, 0.1)
    M = extract_multipliers(P, sol)
    assert np.ptp(M.p.values) <= 1e-9
    assert M.nontriviality() == pytest.approx(1.0)


def test_active_cells_carry_the_measure():
    r = run_stage(helpers.constrained(), 0, 64, 10.0)
    sol, M = r.solution, r.multipliers
    active = np.array([sol.x.values[j, 0] - 0.5 - sol.beta >= -1e-9 for j in range(64)])
    support = M.mu_density > 0
    assert active.any()
    assert np.array_equal(support, active)
    # off the kink the density is lam K nu with nu = 1
    strict = np.array([sol.x.values[j, 0] - 0.5 > sol.beta + 1e-9 for j in range(64)])
    assert np.allclose(M.mu_density[strict], M.lam * sol.K)
    assert np.all(M.mu_density[~active] == 0)


@pytest.mark.parametrize("make, N", [(helpers.autonomous, 32), (helpers.jump, 64), (helpers.constrained, 64),
                                     (helpers.fixed_both, 32), (helpers.boundary_start, 32)])
def test_discrete_weierstrass(make, N):
    P = make()
    r = run_stage(P, 0, N, 10.0)
    sol, M = r.solution, r.multipliers
    stage = sol.stage
    q = M.q.values
    for j in range(N):
        V = stage.F_stage(j, sol.x.values[j])
        vj = sol.v[j]
        Lj = 0.0 if P.L is None else P.Lval(stage.grid[j], sol.x.values[j], vj)
        for v in V.vertices:
            Lv = 0.0 if P.L is None else P.Lval(stage.grid[j], sol.x.values[j], v)
            assert q[j + 1] @ vj - M.lam * Lj >= q[j + 1] @ v - M.lam * Lv - 1e-6


@pytest.mark.parametrize("make, N", [(helpers.autonomous, 32), (helpers.lipschitz, 64), (helpers.jump, 64),
                                     (helpers.constrained, 64), (helpers.boundary_start, 32)])
def test_jump_estimates_hold(make, N):
    r = run_stage(make(), 0, N, 10.0)
    assert r.min_jump_margin >= -1e-6


def test_cost_not_above_comparison_arc():
    for make in (helpers.autonomous, helpers.jump, helpers.constrained):
        r = run_stage(make(), 0, 32, 10.0)
        assert r.solution.cost <= r.comparison_cost + 1e-12


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
def test_tree_dp_matches_enumeration(seed, N):
    rng = np.random.default_rng(seed)
    P = helpers.random_vertex_problem(rng, N)
    stage = left_sample(P.F, N, L=P.L)
    sol = solve_penalized(P, stage, 5.0, 0.05)
    assert sol.method == "tree"
    assert sol.cost == pytest.approx(exhaustive_cost(P, stage, 5.0, 0.05), abs=1e-9)


def test_multiplier_json_roundtrip(tmp_path):
    r = run_stage(helpers.constrained(), 0, 16, 10.0)
    M = r.multipliers
    write_multipliers_json(tmp_path / "m.json", M)
    M2 = read_multipliers_json(tmp_path / "m.json")
    assert np.array_equal(M2.q.values, M.q.values)
    assert np.array_equal(M2.r.values, M.r.values)
    assert M2.lam == M.lam and M2.meta["K"] == M.meta["K"]
    d = json.loads((tmp_path / "m.json").read_text())
    del d["lambda"]
    with pytest.raises(ValueError):
        MultiplierSet.from_dict(d)


def test_multiplier_scaling():
    r = run_stage(helpers.constrained(), 0, 16, 10.0)
    M = r.multipliers.scaled(3.0)
    assert M.lam == pytest.approx(3 * r.multipliers.lam)
    assert np.allclose(M.q.values, 3 * r.multipliers.q.values)
    with pytest.raises(ValueError):
        MultiplierSet(M.grid, M.p, 1.0, -np.ones(16), M.gamma)
