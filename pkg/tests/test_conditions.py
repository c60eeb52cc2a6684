import numpy as np
import pytest

from bvham.conditions import check_nondegeneracy, check_theorem1, trivial_multiplier
from bvham.multifun import Arc
from bvham.pipeline import run_stage
from bvham.transcription import MultiplierSet

import helpers


@pytest.fixture(scope="module")
def bstart():
    P = helpers.boundary_start()
    return P, run_stage(P, 0, 64, 10.0)


def test_pipeline_multipliers_pass():
    for make, N in ((helpers.autonomous, 32), (helpers.constrained, 64), (helpers.fixed_both, 32)):
        P = make()
        r = run_stage(P, 0, N, 10.0)
        rep = check_theorem1(P, r.solution.x, r.multipliers, alpha=r.alpha)
        assert rep.passed, rep.to_dict()


def test_zero_multipliers_fail_nontriviality():
    P = helpers.autonomous()
    g = np.linspace(0, 1, 9)
    M = MultiplierSet(g, Arc(g, np.zeros(9)), 0.0, np.zeros(8), np.zeros((8, 1)))
    rep = check_theorem1(P, Arc(g, g), M)
    assert rep["i_nontriviality"]["value"] == 0.0 and not rep.passed


def test_hand_adjoint_linear_instance():
    P = helpers.autonomous()
    g = np.linspace(0, 1, 17)
    M = MultiplierSet(g, Arc(g, np.ones(17)), 1.0, np.zeros(16), np.zeros((16, 1)))
    rep = check_theorem1(P, Arc(g, g), M)
    assert rep.passed
    for k in ("ii_adjoint", "iii_weierstrass", "iv_transversality"):
        assert rep[k]["value"] <= 1e-9  # central differences with a 1e-6 step


def test_trivial_multiplier_shape(bstart):
    P, r = bstart
    M = trivial_multiplier(P, r.solution.x)
    assert M.lam == 0.0 and M.mu_atoms == [(0.0, 1.0)]
    assert np.allclose(M.p.values, 1.0)
    assert np.allclose(M.q.values[1:], 0.0)


def test_trivial_multiplier_passes_first_three(bstart):
    P, r = bstart
    for x in (r.solution.x, Arc(np.linspace(0, 1, 9), np.linspace(0, 0.3, 9))):
        rep = check_theorem1(P, x, trivial_multiplier(P, x))
        for k in ("i_nontriviality", "ii_adjoint", "iii_weierstrass"):
            assert rep[k]["passed"]
        assert rep["ii_adjoint"]["value"] <= 1e-10 and rep["iii_weierstrass"]["value"] <= 1e-10


def test_trivial_multiplier_is_degenerate(bstart):
    P, r = bstart
    nd = check_nondegeneracy(P, r.solution.x, trivial_multiplier(P, r.solution.x))
    assert nd.value == 0.0 and not nd.nondegenerate
    assert nd.inward_pointing


def test_pipeline_multiplier_nondegenerate(bstart):
    P, r = bstart
    nd = check_nondegeneracy(P, r.solution.x, r.multipliers)
    assert nd.inward_margin < -1e-6
    assert nd.value >= 1e-3 and nd.nondegenerate


def test_half_lambda_is_nondegenerate(bstart):
    P, r = bstart
    g = r.solution.x.grid
    M = MultiplierSet(g, Arc(g, np.zeros(len(g))), 0.5, np.zeros(len(g) - 1), np.zeros((len(g) - 1, 1)),
                      mu_atoms=[(0.0, 3.0)], atom_gamma=[np.array([-1.0])])
    assert check_nondegeneracy(P, r.solution.x, M).nondegenerate


def test_nondegeneracy_needs_fixed_start_and_constraint():
    with pytest.raises(ValueError):
        check_nondegeneracy(helpers.autonomous(), Arc([0, 1], [0, 1]), None)
    with pytest.raises(ValueError):
        trivial_multiplier(helpers.constrained(), Arc([0, 1], [0.0, 0.5]))


@pytest.mark.parametrize("theta", [0.1, 10.0])
def test_verdicts_scale_invariant(theta):
    for make, N in ((helpers.constrained, 32), (helpers.boundary_start, 32), (helpers.jump, 32)):
        P = make()
        r = run_stage(P, 0, N, 10.0)
        a = check_theorem1(P, r.solution.x, r.multipliers, alpha=r.alpha)
        b = check_theorem1(P, r.solution.x, r.multipliers.scaled(theta), alpha=r.alpha)
        for k in ("ii_adjoint", "iii_weierstrass", "iv_transversality", "v_gamma"):
            assert a[k]["passed"] == b[k]["passed"], (make.__name__, k)
