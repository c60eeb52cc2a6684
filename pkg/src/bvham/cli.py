"""Command-line front-end: problem files in, staircases, arcs, multipliers and reports out.

Exit codes: 0 all verdicts pass, 1 a verdict fails, 2 usage or parse error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .calcvar import EulerStationarityError, check_hypotheses, lipschitz_certificate, solve_variational
from .conditions import check_nondegeneracy, check_theorem1
from .config import TOLERANCE_NAMES, ConfigError, load_config
from .hamiltonian import bv_verdict, lagrangian_variation, trace, write_trace_csv, zero_staircase
from .multifun import Arc
from .pipeline import _velocity_cloud, penalty_correction, run_pipeline
from .trajectory import read_arc_csv, write_arc_csv
from .transcription import NonStationaryError, left_sample, read_multipliers_json, write_multipliers_json
from .variation import cumulative_variation, normalize, richardson, write_staircase_csv

__all__ = ["main", "cmd_variation", "cmd_solve", "cmd_check", "cmd_certify"]

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
JUMP_TOL = 1e-6
JUMP_REPORT = 1e-3  # staircase steps below this fraction are refinement texture
DEFAULT_TOLS = {"kkt_tol": 1e-6, "bv_tol": 1e-3, "feas_tol": 1e-7, "nd_tol": 1e-8, "ip_margin": 1e-6,
                "ce_tol": 1e-6, "step_tol": 1e-6, "drift_tol": 1e-2, "tol_eta": 1e-6, "kink_tol": 1e-7}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(_plain(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _tolerances(cfg, overrides):
    tols = dict(DEFAULT_TOLS)
    tols.update(cfg.tolerances)
    for item in overrides or []:
        name, sep, val = item.partition("=")
        if not sep or name not in TOLERANCE_NAMES:
            raise ConfigError(f"--tol expects NAME=VAL with NAME in {', '.join(TOLERANCE_NAMES)}; got {item!r}")
        try:
            v = float(val)
        except ValueError:
            raise ConfigError(f"--tol {name}: {val!r} is not a number") from None
        if not v > 0:
            raise ConfigError(f"--tol {name}: overrides must be positive")
        tols[name] = v
    return tols


# -- commands -------------------------------------------------------------------

def cmd_variation(cfg, out, tols, levels=None):
    """Staircases of the perturbed cumulative variation over the (delta, eps) grid."""
    if cfg.F is None:
        raise ConfigError("missing required field", "F")
    var = cfg.variation or {"deltas": [0.0], "epss": [(cfg.horizon[1] - cfg.horizon[0]) / 64],
                            "refine_levels": 4, "base_cells": None}
    rl = var["refine_levels"] if levels is None else levels
    table, files = [], []
    for i, d in enumerate(var["deltas"]):
        row = []
        for k, e in enumerate(var["epss"]):
            eta = cumulative_variation(cfg.F, d, e, rl, base_cells=var["base_cells"], tol_eta=tols["tol_eta"])
            name = f"staircase_d{i}_e{k}.csv"
            write_staircase_csv(os.path.join(out, name), [eta])
            files.append(name)
            row.append({"delta": d, "eps": e, "eta_T": float(eta.values[-1]), "refined": eta.refined,
                        "gap": eta.gap, "jumps": [[float(t), float(s)] for t, s in eta.jumps(JUMP_REPORT * max(1.0, eta.values[-1]))]})
        table.append(row)
    eta_delta = [richardson([c["eta_T"] for c in row]) for row in table]
    summary = {"command": "variation", "name": cfg.name, "refine_levels": rl, "table": table,
               "eta_delta": eta_delta, "eta": richardson(eta_delta), "files": files}
    _dump(os.path.join(out, "variation_summary.json"), summary)
    print(f"variation: eta(T) extrapolated = {summary['eta']!r} over {len(files)} staircase(s)")
    return EXIT_PASS


def cmd_solve(cfg, out, tols, levels=None):
    """Left sampling, penalized solve, multiplier extraction and checks for each schedule index."""
    P, sch = cfg.problem, cfg.schedule
    if P is None:
        raise ConfigError("missing required field", "problem")
    if sch is None:
        raise ConfigError("missing required field", "schedule")
    rl = cfg.refine_levels if levels is None else levels
    try:
        stages = run_pipeline(P, sch, kkt_tol=tols["kkt_tol"], bv_tol=tols["bv_tol"], refine_levels=rl,
                              grid_points=cfg.solver.get("grid_points"),
                              n_weights=int(cfg.solver.get("n_weights", 41)))
    except NonStationaryError as exc:
        print(f"solve: {exc}", file=sys.stderr)
        return EXIT_FAIL
    ok = True
    reports = []
    for st in stages:
        i = st.index
        write_arc_csv(os.path.join(out, f"arc_{i}.csv"), st.solution.x)
        write_multipliers_json(os.path.join(out, f"multipliers_{i}.json"), st.multipliers)
        write_trace_csv(os.path.join(out, f"trace_{i}.csv"), st.trace, normalize(st.eta_F), normalize(st.eta_L),
                        st.multipliers.q_inf_norm(), st.multipliers.lam)
        write_staircase_csv(os.path.join(out, f"eta_F_{i}.csv"), [st.eta_F])
        summ = st.summary()
        summ["jumps"] = [[float(t), float(d), float(b), float(m)] for t, d, b, m in st.jumps]
        summ["mu_support_cells"] = np.flatnonzero(st.multipliers.mu_density > 0).tolist()
        stage_ok = st.conditions.passed and st.min_jump_margin >= -JUMP_TOL and st.feasibility.max_cell_defect \
            <= tols["feas_tol"]
        summ["passed"] = stage_ok
        ok &= stage_ok
        reports.append(summ)
        _dump(os.path.join(out, f"report_{i}.json"), summ)
        print(f"solve[{i}]: N={st.N} K={st.K!r} cost={st.solution.cost!r} lambda={st.multipliers.lam!r} "
              f"conditions={'pass' if st.conditions.passed else 'FAIL'} "
              f"jump_margin={st.min_jump_margin!r} bv={'pass' if st.bv.passed else 'fail'}")
    _dump(os.path.join(out, "solve_summary.json"), {"command": "solve", "name": cfg.name, "stages": reports,
                                                    "passed": ok})
    return EXIT_PASS if ok else EXIT_FAIL


def _load_multipliers(path):
    try:
        return read_multipliers_json(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in multiplier file: {exc.msg}", None, exc.lineno) from None
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(f"multiplier file {path}: {exc}") from None


def cmd_check(cfg, out, tols, multipliers, arc=None, levels=None):
    """Necessary conditions, the BV verdict and, per problem shape, nondegeneracy and the certificate."""
    P = cfg.problem
    if P is None:
        raise ConfigError("missing required field", "problem")
    M = _load_multipliers(multipliers)
    if arc is not None:
        try:
            xbar = read_arc_csv(arc)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"arc file {arc}: {exc}") from None
    else:
        xbar = Arc(M.grid, P.xbar(M.grid))
    if len(xbar.grid) != len(M.grid) or not np.allclose(xbar.grid, M.grid, rtol=0, atol=1e-12):
        raise ConfigError("arc and multipliers must share a grid")
    report = {"command": "check", "name": cfg.name}
    verdicts = {}

    cond = check_theorem1(P, xbar, M, tol=tols["kkt_tol"], alpha=float(M.meta.get("alpha", 0.0)))
    report["conditions"] = cond.to_dict()
    verdicts["conditions"] = cond.passed

    S, T = P.horizon
    N = len(M.grid) - 1
    corr = None
    if M.stage_grid is not None and "K" in M.meta and M.xref is not None:
        corr = penalty_correction(P, xbar.values, M.xref.values, M.meta["K"], M.meta["beta"], M.lam)
    tr = trace(P.F, P.L, M.lam, xbar, M.q, correction=corr)
    rl = cfg.refine_levels if levels is None else levels
    delta = P.F.delta_bar / 2 if np.isfinite(P.F.delta_bar) else 0.0
    eta_F = cumulative_variation(P.F, delta, (T - S) / N, rl, base_cells=N)
    if P.L is not None:
        stage = left_sample(P.F, N, L=P.L, grid=M.grid)
        eta_L = lagrangian_variation(P.L, (S, T), P.dim, _velocity_cloud(stage, xbar.values), P.xbar, delta,
                                     (T - S) / N, rl, base_cells=N)
    else:
        eta_L = zero_staircase(S, T)
    bv = bv_verdict(tr, normalize(eta_F), normalize(eta_L), M.q_inf_norm(), M.lam, tols["bv_tol"])
    report["bv"] = bv.as_dict()
    verdicts["bv"] = bv.passed

    if P.has_h and P.C.initial_fixed and abs(P.hval(P.C.x0)) <= 1e-12:
        nd = check_nondegeneracy(P, xbar, M, tols["nd_tol"], tols["ip_margin"])
        report["nondegeneracy"] = nd.as_dict()
        verdicts["nondegeneracy"] = nd.nondegenerate or not nd.inward_pointing
    if cfg.calcvar is not None:
        code, cert = _certificate(cfg, tols)
        report["certificate"] = cert
        verdicts["certificate"] = code == EXIT_PASS
    report["verdicts"] = verdicts
    report["passed"] = all(verdicts.values())
    _dump(os.path.join(out, "check_report.json"), report)
    for k, v in verdicts.items():
        print(f"check: {k}: {'pass' if v else 'FAIL'}")
    return EXIT_PASS if report["passed"] else EXIT_FAIL


def _certificate(cfg, tols):
    V = cfg.calcvar
    try:
        cert = lipschitz_certificate(V, levels=cfg.calcvar_levels, ce_tol=tols["ce_tol"],
                                     step_tol=tols["step_tol"], drift_tol=tols["drift_tol"])
    except EulerStationarityError as exc:
        return EXIT_FAIL, {"verdict": "not certified", "error": str(exc)}
    x = solve_variational(V, cfg.calcvar_levels[-1])
    hyp = check_hypotheses(V, x)
    out = cert.as_dict()
    out["hypotheses"] = hyp.as_dict()
    return (EXIT_PASS if cert.certified and hyp.passed else EXIT_FAIL), out


def cmd_certify(cfg, out, tols, levels=None):
    """Hypothesis checks and the Lipschitz certificate for the calcvar section."""
    if cfg.calcvar is None:
        raise ConfigError("missing required field", "calcvar")
    code, cert = _certificate(cfg, tols)
    _dump(os.path.join(out, "certificate.json"), cert)
    print(f"certify-lipschitz: {cert['verdict']}"
          + ("" if "hypotheses" not in cert else f"; hypotheses {'pass' if cert['hypotheses']['passed'] else 'FAIL'}"))
    return code


# -- entry point ---------------------------------------------------------------

def _parser():
    ap = argparse.ArgumentParser(prog="bvham", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="problem file (JSON)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--tol", action="append", default=[], metavar="NAME=VAL", help="tolerance override")
        p.add_argument("--levels", type=int, default=None, help="dyadic refinement levels")
        return p

    common(sub.add_parser("variation", help="cumulative-variation staircases"))
    common(sub.add_parser("solve", help="run the penalized multistage pipeline"))
    pc = common(sub.add_parser("check", help="check multipliers against the necessary conditions"))
    pc.add_argument("--multipliers", required=True, help="multiplier file (JSON)")
    pc.add_argument("--arc", default=None, help="arc file (CSV); defaults to the reference arc")
    common(sub.add_parser("certify-lipschitz", help="Lipschitz certificate for a variational problem"))
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.levels is not None and args.levels < 0:
        print("error: --levels must be nonnegative", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
        tols = _tolerances(cfg, args.tol)
        os.makedirs(args.out, exist_ok=True)
        if args.command == "variation":
            return cmd_variation(cfg, args.out, tols, args.levels)
        if args.command == "solve":
            return cmd_solve(cfg, args.out, tols, args.levels)
        if args.command == "check":
            return cmd_check(cfg, args.out, tols, args.multipliers, args.arc, args.levels)
        return cmd_certify(cfg, args.out, tols, args.levels)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
