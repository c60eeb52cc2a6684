"""JSON problem files: schema checks, safe expressions and problem construction.

Expressions are Python-syntax strings restricted to arithmetic, comparisons,
conditional expressions, subscripts and a fixed set of math functions.
"""
from __future__ import annotations

import ast
import json
import math
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .calcvar import VariationalProblem
from .multifun import (Arc, ball_family, callback_family, interval_family, polytope_table_family,
                       singleton_family)
from .setvalued import CompactSet
from .trajectory import EndpointSet, Problem
from .transcription import PenaltySchedule

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "compile_expr", "SCHEMA_VERSION"]

SCHEMA_VERSION = 1

TOLERANCE_NAMES = ("kkt_tol", "bv_tol", "feas_tol", "nd_tol", "ip_margin", "ce_tol", "step_tol", "drift_tol",
                   "tol_eta", "kink_tol")

_FUNCS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "log": np.log, "sqrt": np.sqrt,
    "tanh": np.tanh, "arctan": np.arctan, "abs": np.abs, "floor": np.floor, "sign": np.sign,
    "min": min, "max": max, "norm": lambda v: float(np.linalg.norm(v)), "dot": lambda a, b: float(np.dot(a, b)),
}
_CONSTS = {"pi": math.pi, "e": math.e}
_NODES = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.BoolOp, ast.Compare, ast.IfExp, ast.Call, ast.Name,
          ast.Load, ast.Constant, ast.Subscript, ast.Index if hasattr(ast, "Index") else ast.Constant,
          ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.Mod, ast.FloorDiv, ast.USub, ast.UAdd, ast.Not,
          ast.And, ast.Or, ast.Lt, ast.LtE, ast.Gt, ast.GtE, ast.Eq, ast.NotEq, ast.List, ast.Tuple)


class ConfigError(ValueError):
    """A problem-file error naming the offending field and, when known, its line."""

    def __init__(self, message, field=None, line=None):
        where = ""
        if field:
            where += f"field '{field}'"
        if line:
            where += f"{' ' if where else ''}(line {line})"
        super().__init__(f"{where}: {message}" if where else message)
        self.field, self.line = field, line


def compile_expr(src, variables, field_name=None, locate=None):
    """Compile an expression string into a function of the named variables."""
    if isinstance(src, (int, float)):
        val = float(src)
        return lambda *args: val
    if not isinstance(src, str):
        raise ConfigError(f"expected an expression string, got {type(src).__name__}", field_name,
                          locate(field_name) if locate else None)
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"bad expression {src!r}: {exc.msg}", field_name,
                          locate(field_name) if locate else None) from None
    allowed = set(variables) | set(_FUNCS) | set(_CONSTS)
    for node in ast.walk(tree):
        if not isinstance(node, _NODES):
            raise ConfigError(f"expression {src!r} uses unsupported syntax {type(node).__name__}", field_name,
                              locate(field_name) if locate else None)
        if isinstance(node, ast.Name) and node.id not in allowed:
            raise ConfigError(f"expression {src!r} uses unknown name {node.id!r}", field_name,
                              locate(field_name) if locate else None)
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS):
            raise ConfigError(f"expression {src!r} calls a function outside the allowed set", field_name,
                              locate(field_name) if locate else None)
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
            raise ConfigError(f"expression {src!r} contains a non-numeric constant", field_name,
                              locate(field_name) if locate else None)
    code = compile(tree, f"<{field_name or 'expr'}>", "eval")
    env = {"__builtins__": {}, **_FUNCS, **_CONSTS}
    names = tuple(variables)

    def fn(*args):
        return eval(code, env, dict(zip(names, args)))
    fn.source = src
    return fn


@dataclass
class RunConfig:
    raw: dict
    name: str
    horizon: tuple
    dim: int
    problem: Optional[Problem] = None
    schedule: Optional[PenaltySchedule] = None
    variation: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    refine_levels: int = 1
    calcvar: Optional[VariationalProblem] = None
    calcvar_levels: tuple = (64, 128, 256)
    solver: dict = field(default_factory=dict)
    F: object = None


class _Reader:
    def __init__(self, text):
        self.lines = text.splitlines()

    def locate(self, path):
        """Best-effort line number of the last key in a dotted path."""
        if not path:
            return None
        key = str(path).split(".")[-1].split("[")[0]
        pat = re.compile(r'"' + re.escape(key) + r'"\s*:')
        for i, line in enumerate(self.lines, 1):
            if pat.search(line):
                return i
        return None

    def err(self, msg, path):
        return ConfigError(msg, path, self.locate(path))

    def get(self, d, key, path, kind=None, default=...):
        if not isinstance(d, dict):
            raise self.err("expected an object", path)
        full = f"{path}.{key}" if path else key
        if key not in d:
            if default is ...:
                raise ConfigError("missing required field", full, self.locate(path) if path else None)
            return default
        val = d[key]
        if kind is not None and val is not None and not isinstance(val, kind):
            raise self.err(f"expected {getattr(kind, '__name__', kind)}, got {type(val).__name__}", full)
        return val

    def vector(self, val, n, path):
        try:
            arr = np.atleast_1d(np.asarray(val, dtype=float))
        except (TypeError, ValueError):
            raise self.err("expected a list of numbers", path) from None
        if arr.shape != (n,):
            raise self.err(f"expected {n} numbers, got shape {arr.shape}", path)
        return arr


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text)


def parse_config(text) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg} (column {exc.colno})", None, exc.lineno) from None
    rd = _Reader(text)
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object", None, 1)
    version = rd.get(raw, "schema_version", "", (int,))
    if version != SCHEMA_VERSION:
        raise rd.err(f"unsupported schema version {version}; expected {SCHEMA_VERSION}", "schema_version")
    name = rd.get(raw, "name", "", (str,), default="")
    hz = rd.get(raw, "horizon", "", (list,), default=[0.0, 1.0])
    if len(hz) != 2 or not float(hz[0]) < float(hz[1]):
        raise rd.err("horizon must be [S, T] with S < T", "horizon")
    horizon = (float(hz[0]), float(hz[1]))
    dim = rd.get(raw, "dim", "", (int,), default=1)
    if dim < 1:
        raise rd.err("dim must be positive", "dim")
    cfg = RunConfig(raw, name, horizon, dim)

    tols = rd.get(raw, "tolerances", "", (dict,), default={}) or {}
    for k, v in tols.items():
        if k not in TOLERANCE_NAMES:
            raise rd.err(f"unknown tolerance; expected one of {', '.join(TOLERANCE_NAMES)}", f"tolerances.{k}")
        if not isinstance(v, (int, float)) or v <= 0:
            raise rd.err("tolerance overrides must be positive numbers", f"tolerances.{k}")
    cfg.tolerances = {k: float(v) for k, v in tols.items()}
    cfg.refine_levels = int(rd.get(raw, "refine_levels", "", (int,), default=1))
    cfg.solver = rd.get(raw, "solver", "", (dict,), default={}) or {}

    if "F" in raw:
        cfg.F = _build_F(rd, raw, horizon, dim)
    if "problem" in raw:
        if cfg.F is None:
            raise ConfigError("missing required field", "F")
        cfg.problem = _build_problem(rd, raw["problem"], cfg.F, dim, name)
    if "schedule" in raw:
        cfg.schedule = _build_schedule(rd, raw["schedule"], cfg.problem)
    if "variation" in raw:
        cfg.variation = _build_variation(rd, raw["variation"], horizon)
    if "calcvar" in raw:
        cfg.calcvar, cfg.calcvar_levels = _build_calcvar(rd, raw["calcvar"], horizon, dim, name)
    if cfg.F is None and cfg.calcvar is None:
        raise ConfigError("missing required field (a velocity multifunction or a calcvar section)", "F")
    return cfg


def _vec_expr(rd, val, n, path, variables):
    if not isinstance(val, list) or len(val) != n:
        raise rd.err(f"expected a list of {n} expressions", path)
    fns = [compile_expr(v, variables, f"{path}[{i}]", rd.locate) for i, v in enumerate(val)]
    return lambda *args: np.array([float(f(*args)) for f in fns])


def _build_reference(rd, ref, dim, horizon):
    path = "F.reference"
    if "times" in ref:
        times = np.asarray(rd.get(ref, "times", path, (list,)), dtype=float)
        vals = np.asarray(rd.get(ref, "values", path, (list,)), dtype=float).reshape(len(times), dim)
        try:
            return Arc(times, vals)
        except ValueError as exc:
            raise rd.err(str(exc), path + ".times") from None
    if "expr" in ref:
        f = _vec_expr(rd, ref["expr"], dim, path + ".expr", ("t",))
        cells = int(rd.get(ref, "cells", path, (int,), default=256))
        return Arc.from_function(f, np.linspace(horizon[0], horizon[1], cells + 1))
    raise ConfigError("missing required field (times/values or expr)", path, rd.locate("reference"))


def _build_F(rd, raw, horizon, dim):
    section = rd.get(raw, "F", "", (dict,))
    fam = rd.get(section, "family", "F", (str,))
    kw = {}
    if "lip_x" in section:
        kw["lip_x"] = float(section["lip_x"])
    if fam == "interval":
        if dim != 1:
            raise rd.err("interval family needs dim = 1", "F.family")
        lo = compile_expr(rd.get(section, "lower", "F"), ("t",), "F.lower", rd.locate)
        hi = compile_expr(rd.get(section, "upper", "F"), ("t",), "F.upper", rd.locate)
        F = interval_family(lambda t: float(lo(t)), lambda t: float(hi(t)), horizon, **kw)
    elif fam == "ball":
        rad = compile_expr(rd.get(section, "radius", "F"), ("t",), "F.radius", rd.locate)
        c = section.get("center")
        cen = None if c is None else _vec_expr(rd, c, dim, "F.center", ("t",))
        F = ball_family(lambda t: float(rad(t)), horizon, dim, cen, **kw)
    elif fam == "polytope_table":
        times = rd.get(section, "times", "F", (list,))
        verts = rd.get(section, "vertices", "F", (list,))
        if len(times) != len(verts):
            raise rd.err("needs one vertex list per time", "F.vertices")
        hull = bool(section.get("hull", True))
        pts = []
        for i, v in enumerate(verts):
            if isinstance(v, dict):  # CompactSet literal {"points": [...], "hull": bool}
                if "points" not in v:
                    raise rd.err("missing required field", f"F.vertices[{i}].points")
                hull = bool(v.get("hull", hull))
                v = v["points"]
            pts.append(np.asarray(v, dtype=float).reshape(-1, dim))
        try:
            F = polytope_table_family(times, pts, horizon, hull=hull, **kw)
        except ValueError as exc:
            raise rd.err(str(exc), "F.times") from None
    elif fam == "singleton":
        f = _vec_expr(rd, rd.get(section, "value", "F"), dim, "F.value", ("t",))
        F = singleton_family(f, horizon, dim, **kw)
    elif fam == "callback":
        vlist = rd.get(section, "vertices", "F", (list,))
        fns = [_vec_expr(rd, v, dim, f"F.vertices[{i}]", ("t", "x")) for i, v in enumerate(vlist)]
        hull = bool(section.get("hull", True))

        def ev(t, x, a):
            return CompactSet(np.array([f(t, x) for f in fns]), hull=hull)
        F = callback_family(ev, horizon, dim, name="callback", **kw)
    else:
        raise rd.err(f"unknown family {fam!r}; expected interval, ball, polytope_table, singleton or callback",
                     "F.family")
    ref = section.get("reference")
    if ref is not None:
        xb = _build_reference(rd, ref, dim, horizon)
        db = float(rd.get(section, "delta_bar", "F", (int, float), default=np.inf))
        F = F.with_reference(xb, db)
    return F


def _build_g(rd, section, dim):
    kind = rd.get(section, "kind", "problem.g", (str,))
    if kind in ("linear", "affine"):
        c0 = rd.vector(section.get("c0", [0.0] * dim), dim, "problem.g.c0")
        c1 = rd.vector(section.get("c1", [0.0] * dim), dim, "problem.g.c1")
        const = float(section.get("const", 0.0)) if kind == "affine" else 0.0
        return (lambda a, b: float(c0 @ np.atleast_1d(a) + c1 @ np.atleast_1d(b) + const),
                lambda a, b: (c0.copy(), c1.copy()))
    if kind == "expression":
        f = compile_expr(rd.get(section, "expr", "problem.g"), ("x0", "x1"), "problem.g.expr", rd.locate)
        return (lambda a, b: float(f(np.atleast_1d(a), np.atleast_1d(b)))), None
    raise rd.err(f"unknown g kind {kind!r}; expected linear, affine or expression", "problem.g.kind")


def _build_h(rd, section, dim):
    kind = rd.get(section, "kind", "problem.h", (str,))
    if kind == "affine":
        a = rd.vector(rd.get(section, "a", "problem.h"), dim, "problem.h.a")
        b = float(section.get("b", 0.0))

        def h(x):  # also accepts an (n, m) stack of states
            return a @ np.asarray(x, dtype=float) + b
        return h, (lambda x: a.copy())
    if kind == "expression":
        f = compile_expr(rd.get(section, "expr", "problem.h"), ("x",), "problem.h.expr", rd.locate)
        grad = section.get("grad")
        gfn = None if grad is None else _vec_expr(rd, grad, dim, "problem.h.grad", ("x",))
        return (lambda x: float(f(np.atleast_1d(x)))), gfn
    raise rd.err(f"unknown h kind {kind!r}; expected affine or expression", "problem.h.kind")


def _build_problem(rd, section, F, dim, name):
    if not isinstance(section, dict):
        raise rd.err("expected an object", "problem")
    g, g_grad = _build_g(rd, rd.get(section, "g", "problem", (dict,)), dim)
    h = h_grad = None
    if section.get("h") is not None:
        h, h_grad = _build_h(rd, section["h"], dim)
    L = None
    if section.get("L") is not None:
        f = compile_expr(section["L"], ("t", "x", "v"), "problem.L", rd.locate)
        L = lambda t, x, v: float(f(t, np.atleast_1d(x), np.atleast_1d(v)))
    ep = rd.get(section, "endpoints", "problem", (dict,))
    kind = rd.get(ep, "kind", "problem.endpoints", (str,))
    try:
        C = EndpointSet(kind, rd.vector(rd.get(ep, "x0", "problem.endpoints"), dim, "problem.endpoints.x0"),
                        None if ep.get("x1") is None else rd.vector(ep["x1"], dim, "problem.endpoints.x1"),
                        float(ep.get("r0", 0.0)), float(ep.get("r1", 0.0)))
    except ValueError as exc:
        raise rd.err(str(exc), "problem.endpoints.kind") from None
    k_h = float(section.get("k_h", 1.0))
    if k_h <= 0:
        raise rd.err("k_h must be positive", "problem.k_h")
    if F.xbar is None:
        raise ConfigError("missing required field (the solver needs a reference arc)", "F.reference",
                          rd.locate("F"))
    return Problem(F, g, C, L=L, h=h, g_grad=g_grad, h_grad=h_grad, k_h=k_h, name=name)


def _build_schedule(rd, section, P):
    if not isinstance(section, dict):
        raise rd.err("expected an object", "schedule")
    N = rd.get(section, "N", "schedule", (list,))
    K = rd.get(section, "K", "schedule", (list,))
    beta = section.get("beta")
    alpha = section.get("alpha")
    try:
        sch = PenaltySchedule([int(n) for n in N], [float(k) for k in K],
                              None if beta is None else [float(b) for b in beta],
                              None if alpha is None else [float(a) for a in alpha])
    except ValueError as exc:
        raise rd.err(str(exc), "schedule.N") from None
    if P is not None and P.has_h and not sch.coupling_ok(P.k_h):
        raise rd.err(f"coupling beta > 2 k_h alpha violated (k_h = {P.k_h})", "schedule.beta")
    return sch


def _build_variation(rd, section, horizon):
    if not isinstance(section, dict):
        raise rd.err("expected an object", "variation")
    deltas = [float(d) for d in rd.get(section, "deltas", "variation", (list,), default=[0.0])]
    S, T = horizon
    epss = [float(e) for e in rd.get(section, "epss", "variation", (list,), default=[(T - S) / 64])]
    if any(d < 0 for d in deltas):
        raise rd.err("deltas must be nonnegative", "variation.deltas")
    if any(e <= 0 for e in epss):
        raise rd.err("epss must be positive", "variation.epss")
    return {"deltas": deltas, "epss": epss,
            "refine_levels": int(section.get("refine_levels", 4)),
            "base_cells": section.get("base_cells")}


def _build_calcvar(rd, section, horizon, dim, name):
    if not isinstance(section, dict):
        raise rd.err("expected an object", "calcvar")
    f = compile_expr(rd.get(section, "L", "calcvar"), ("t", "x", "v"), "calcvar.L", rd.locate)
    L = lambda t, x, v: float(f(t, np.atleast_1d(x), np.atleast_1d(v)))
    th = section.get("theta")
    theta = None
    if th is not None:
        tf = compile_expr(th, ("r",), "calcvar.theta", rd.locate)
        theta = lambda r: float(tf(r))
    K = section.get("K")
    V = VariationalProblem(L, horizon, rd.vector(rd.get(section, "x0", "calcvar"), dim, "calcvar.x0"),
                           rd.vector(rd.get(section, "x1", "calcvar"), dim, "calcvar.x1"), theta=theta,
                           alpha=float(section.get("alpha", 0.0)), K=None if K is None else float(K),
                           k_D={float(k): float(v) for k, v in (section.get("k_D") or {}).items()},
                           delta=float(section.get("delta", 0.0)), name=name)
    levels = tuple(int(n) for n in section.get("levels", [64, 128, 256]))
    if not levels or any(n < 2 for n in levels):
        raise rd.err("levels must be grid sizes >= 2", "calcvar.levels")
    return V, levels
