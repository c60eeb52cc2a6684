"""End-to-end run over a penalty schedule: sample, solve, extract, trace and check."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .conditions import ConditionReport, check_theorem1
from .hamiltonian import (BVReport, HamiltonianTrace, bv_verdict, lagrangian_variation, trace,
                          zero_staircase)
from .multifun import Arc
from .trajectory import FeasibilityReport, Problem, feasibility_report, filippov_approximate
from .transcription import (MultiplierSet, PenalizedSolution, PenaltySchedule, discrete_cost,
                            extract_multipliers, jump_estimates, left_sample, solve_penalized,
                            _velocity_candidates)
from .variation import CumulativeVariation, cumulative_variation, normalize

__all__ = ["StageResult", "run_stage", "run_pipeline", "penalty_correction"]


@dataclass
class StageResult:
    index: int
    N: int
    K: float
    beta: float
    alpha: float
    solution: PenalizedSolution
    multipliers: MultiplierSet
    trace: HamiltonianTrace
    eta_F: CumulativeVariation
    eta_L: CumulativeVariation
    bv: BVReport
    jumps: list
    conditions: ConditionReport
    feasibility: FeasibilityReport
    comparison_cost: float
    meta: dict = field(default_factory=dict)

    @property
    def min_jump_margin(self):
        return min((j[3] for j in self.jumps), default=0.0)

    def summary(self):
        return {
            "index": self.index, "N": self.N, "K": self.K, "beta": self.beta, "alpha": self.alpha,
            "cost": self.solution.cost, "comparison_cost": self.comparison_cost,
            "lambda": self.multipliers.lam, "q_inf": self.multipliers.q_inf_norm(),
            "trace_variation": self.trace.total_variation,
            "min_jump_margin": self.min_jump_margin,
            "bv": self.bv.as_dict(), "conditions": self.conditions.to_dict(),
            "feasibility": self.feasibility.as_dict(),
        }


def _velocity_cloud(stage, xs, n_weights=9, cap=400):
    pts = np.vstack([_velocity_candidates(stage.F_stage(j, xs[j]), n_weights) for j in range(stage.N)])
    pts = np.unique(np.round(pts, 12), axis=0)
    if len(pts) > cap:
        pts = pts[np.linspace(0, len(pts) - 1, cap).round().astype(int)]
    return pts


def penalty_correction(P: Problem, x, xref, K, beta, lam):
    """Per-cell shift turning H into the trace of the penalized problem.

    Subtracts lam times the tube and penalty costs at the cell's left node and
    adds the integral of 2 lam (x - xref) . xref' up to that node, which
    removes the time dependence the moving tube centre puts into H.
    ``x`` and ``xref`` are node values.
    """
    x, xref = np.asarray(x, dtype=float), np.asarray(xref, dtype=float)
    xs, xr = x[:-1], xref[:-1]
    d = xs - xr
    cost = np.sum(d * d, axis=1)
    if P.has_h:
        cost = cost + K * np.maximum(np.array([P.hval(y) for y in xs]) - beta, 0.0)
    dr = np.diff(xref, axis=0)
    drift = np.concatenate([[0.0], np.cumsum(2 * np.sum(d * dr, axis=1))[:-1]])
    return lam * (drift - cost)


def run_stage(P: Problem, i, N, K, beta=None, alpha=None, *, kkt_tol=1e-6, bv_tol=1e-3,
              refine_levels=1, grid_points=None, n_weights=41) -> StageResult:
    if P.xbar is None:
        raise ValueError("the pipeline needs a reference arc")
    stage = left_sample(P.F, int(N), L=P.L)
    S, T = P.horizon
    xb = Arc(stage.grid, P.xbar(stage.grid))
    z = filippov_approximate(stage.as_multifunction(), xb, P.C.x0)
    alpha_meas = float(np.max(np.linalg.norm(z.values - xb.values, axis=1)))
    alpha = alpha_meas if alpha is None else float(alpha)
    beta = PenaltySchedule.default_beta(alpha, P.k_h, N) if beta is None else float(beta)
    if P.has_h and not beta > 2 * P.k_h * alpha:
        raise ValueError(f"stage {i}: beta={beta:.3g} violates beta > 2 k_h alpha = {2 * P.k_h * alpha:.3g}")
    sol = solve_penalized(P, stage, K, beta, alpha, grid_points=grid_points, n_weights=n_weights)
    M = extract_multipliers(P, sol, kkt_tol=kkt_tol)
    delta = P.F.delta_bar / 2 if np.isfinite(P.F.delta_bar) else 0.0
    eps = (T - S) / N
    eta_F = cumulative_variation(P.F, delta, eps, refine_levels, base_cells=N)
    if P.L is not None:
        eta_L = lagrangian_variation(P.L, (S, T), P.dim, _velocity_cloud(stage, sol.x.values), P.xbar, delta,
                                     eps, refine_levels, base_cells=N)
    else:
        eta_L = zero_staircase(S, T)
    corr = penalty_correction(P, sol.x.values, sol.xref, sol.K, sol.beta, M.lam)
    tr = trace(P.F, P.L, M.lam, sol.x, M.q, correction=corr)
    bv = bv_verdict(tr, normalize(eta_F), normalize(eta_L), M.q_inf_norm(), M.lam, bv_tol)
    jumps = jump_estimates(P, M, sol, eta_F, eta_L if P.L is not None else None)
    cond = check_theorem1(P, sol.x, M, tol=kkt_tol, alpha=alpha)
    feas = feasibility_report(P, sol.x, F=stage.as_multifunction())
    comp = discrete_cost(P, stage, z.values, z.velocities(), K, beta)
    return StageResult(i, int(N), float(K), float(beta), alpha, sol, M, tr, eta_F, eta_L, bv, jumps, cond,
                       feas, comp, {"alpha_measured": alpha_meas})


def run_pipeline(P: Problem, schedule: PenaltySchedule, **kw):
    out = []
    for i, (N, K) in enumerate(zip(schedule.N, schedule.K)):
        beta = None if schedule.beta is None else schedule.beta[i]
        alpha = None if schedule.alpha is None else schedule.alpha[i]
        out.append(run_stage(P, i, N, K, beta, alpha, **kw))
    return out
