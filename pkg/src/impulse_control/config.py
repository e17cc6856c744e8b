"""Run configuration: an INI file with a fixed schema.

Every key is validated before any numerical work; unknown sections or keys
raise ConfigError naming the offender. Expressions for rewards and costs use
a tiny grammar: numbers, the variables x (and y for costs), + - * /, unary
minus, and the functions exp, abs and indicator, where indicator(e) is 1
when e >= 0 (to within 1e-9, so grid points that should sit on a jump do)
and 0 otherwise.
"""

from __future__ import annotations

import ast
import configparser
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .chain import ABSORBING, BOUNDARY_MODES, Grid, MarkovChain, build_diffusion
from .errors import ConfigError
from .problem import (AffineCost, AllTargets, BandTargets, ExpressionCost, FixedSetTargets, ImpulseProblem,
                      PiecewiseCost, TableCost, TableTargets)
from .simulate import SimConfig
from .solver import POLICY_REGIONS, VALUE_ITERATION, SolverConfig

INDICATOR_SLACK = 1e-9

PROBLEM_KINDS = ("impulse", "stopping", "multistop", "switching")

SCHEMA = {
    "problem": {"kind", "rate", "strict"},
    "process": {"kind", "drift", "sigma", "theta", "mean", "boundary"},
    "process1": {"kind", "drift", "sigma", "theta", "mean", "boundary"},
    "grid": {"lo", "hi", "n"},
    "reward": {"type", "value", "values", "expr"},
    "cost": {"type", "proportional", "fixed", "values", "pieces", "expr"},
    "targets": {"type", "points", "width", "rows"},
    "stopping": {"g"},
    "multistop": {"g", "k", "delta"},
    "switching": {"f0", "f1", "k0", "k1"},
    "solver": {"tol", "max_outer_iters", "stopping_inner"},
    "simulation": {"paths", "dt", "horizon", "seed", "x0", "max_interventions", "record_paths",
                   "strategy_file"},
    "verify": {"trials", "seed"},
}

REQUIRED = {
    "problem": {"kind", "rate"},
    "grid": {"lo", "hi", "n"},
    "process": {"kind"},
}


# --- expressions -----------------------------------------------------------

_FUNCS = {
    "exp": np.exp,
    "abs": np.abs,
    "indicator": lambda e: (np.asarray(e) >= -INDICATOR_SLACK).astype(float),
}
_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply, ast.Div: np.divide}


def compile_expression(text: str, variables=("x",), key: str = "expr") -> Callable:
    """Parse ``text`` under the whitelist grammar and return a vectorized function."""
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"{key}: cannot parse expression {text!r}: {exc.msg}") from None

    def check(node):
        if isinstance(node, ast.Expression):
            return check(node.body)
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            check(node.left)
            check(node.right)
            return
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            return check(node.operand)
        if isinstance(node, ast.Call):
            if not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS) or node.keywords \
                    or len(node.args) != 1:
                raise ConfigError(f"{key}: only exp(.), abs(.) and indicator(.) may be called")
            return check(node.args[0])
        if isinstance(node, ast.Name):
            if node.id not in variables:
                raise ConfigError(f"{key}: unknown name {node.id!r} (allowed: {', '.join(variables)})")
            return
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            return
        raise ConfigError(f"{key}: unsupported syntax {type(node).__name__} in {text!r}")

    check(tree)

    def evaluate(node, env):
        if isinstance(node, ast.Expression):
            return evaluate(node.body, env)
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](evaluate(node.left, env), evaluate(node.right, env))
        if isinstance(node, ast.UnaryOp):
            val = evaluate(node.operand, env)
            return -val if isinstance(node.op, ast.USub) else val
        if isinstance(node, ast.Call):
            return _FUNCS[node.func.id](evaluate(node.args[0], env))
        if isinstance(node, ast.Name):
            return env[node.id]
        return float(node.value)

    def fn(*args):
        env = {name: np.asarray(a, dtype=float) for name, a in zip(variables, args)}
        shape = np.broadcast(*env.values()).shape if env else ()
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = evaluate(tree, env)
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()

    return fn


# --- parsed configuration --------------------------------------------------

@dataclass
class RunConfig:
    kind: str
    rate: float
    strict: bool
    grid: Grid
    chain: MarkovChain
    f: np.ndarray
    solver: SolverConfig
    sim: SimConfig
    x0: float
    strategy_file: Optional[str]
    verify_trials: int
    verify_seed: int
    problem: Optional[ImpulseProblem] = None
    stopping_g: Optional[np.ndarray] = None
    multistop: Optional[tuple] = None  # (g, k, delta)
    switching: Optional[dict] = None
    raw: dict = field(default_factory=dict)


class _Section:
    def __init__(self, name, data):
        self.name = name
        self.data = data

    def has(self, key):
        return key in self.data

    def text(self, key, default=None):
        if key not in self.data:
            if default is None:
                raise ConfigError(f"missing key '{key}' in section [{self.name}]")
            return default
        return self.data[key].strip()

    def number(self, key, default=None, kind=float):
        if key not in self.data:
            if default is None:
                raise ConfigError(f"missing key '{key}' in section [{self.name}]")
            return default
        raw = self.data[key].strip()
        try:
            val = kind(raw)
        except ValueError:
            raise ConfigError(f"[{self.name}] {key} = {raw!r} is not a valid {kind.__name__}") from None
        if kind is float and math.isnan(val):
            raise ConfigError(f"[{self.name}] {key} must not be NaN")
        return val

    def flag(self, key, default=False):
        if key not in self.data:
            return default
        raw = self.data[key].strip().lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{self.name}] {key} = {raw!r} is not a boolean")


def _float_list(sec, key):
    raw = sec.text(key)
    try:
        return [float(t) for t in raw.replace(";", ",").split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"[{sec.name}] {key} must be a comma separated list of numbers") from None


def _reward(sec: _Section, states, key="reward"):
    kind = sec.text("type", "constant")
    n = len(states)
    if kind == "constant":
        return np.full(n, sec.number("value", 0.0))
    if kind == "table":
        vals = _float_list(sec, "values")
        if len(vals) != n:
            raise ConfigError(f"[{sec.name}] values has {len(vals)} entries, grid has {n}")
        return np.array(vals)
    if kind == "expression":
        fn = compile_expression(sec.text("expr"), ("x",), key=f"[{sec.name}] expr")
        out = fn(states)
        if not np.all(np.isfinite(out)):
            raise ConfigError(f"[{sec.name}] expr is not finite on the grid")
        return out
    raise ConfigError(f"[{sec.name}] type must be constant, table or expression, got {kind!r}")


def _cost(sec: _Section, n):
    kind = sec.text("type", "affine")
    if kind == "affine":
        return AffineCost(proportional=sec.number("proportional", 0.0), fixed=sec.number("fixed", 0.0))
    if kind == "table":
        rows = [r for r in sec.text("values").split(";") if r.strip()]
        try:
            mat = np.array([[float(t) for t in r.split(",")] for r in rows])
        except ValueError:
            raise ConfigError(f"[{sec.name}] values must be rows of numbers separated by ';'") from None
        if mat.shape != (n, n):
            raise ConfigError(f"[{sec.name}] values must be a {n}x{n} table, got {mat.shape}")
        return TableCost(mat)
    if kind == "piecewise":
        pieces = []
        for chunk in sec.text("pieces").split(","):
            if not chunk.strip():
                continue
            parts = chunk.split(":")
            if len(parts) != 4:
                raise ConfigError(f"[{sec.name}] pieces entries must read lo:hi:fixed:proportional")
            try:
                pieces.append(tuple(float(p) for p in parts))
            except ValueError:
                raise ConfigError(f"[{sec.name}] pieces entry {chunk.strip()!r} is not numeric") from None
        return PiecewiseCost(tuple(pieces))
    if kind == "expression":
        text = sec.text("expr")
        return ExpressionCost(compile_expression(text, ("x", "y"), key=f"[{sec.name}] expr"), source=text)
    raise ConfigError(f"[{sec.name}] type must be affine, table, piecewise or expression, got {kind!r}")


def _targets(sec: _Section, n):
    kind = sec.text("type", "all")
    if kind == "all":
        return AllTargets()
    if kind == "fixed":
        return FixedSetTargets(tuple(_float_list(sec, "points")))
    if kind == "band":
        return BandTargets(sec.number("width"))
    if kind == "table":
        rows = sec.text("rows").split(";")
        if len(rows) != n:
            raise ConfigError(f"[{sec.name}] rows lists {len(rows)} states, grid has {n}")
        try:
            table = tuple(np.array([int(t) for t in r.split()], dtype=np.intp) for r in rows)
        except ValueError:
            raise ConfigError(f"[{sec.name}] rows must hold whitespace separated state indices") from None
        return TableTargets(table)
    raise ConfigError(f"[{sec.name}] type must be all, fixed, band or table, got {kind!r}")


def _process(sec: _Section, grid, rate):
    kind = sec.text("kind")
    allowed = {"brownian": {"drift", "sigma"}, "geometric_brownian": {"drift", "sigma"},
               "ornstein_uhlenbeck": {"theta", "mean", "sigma"}}
    if kind not in allowed:
        raise ConfigError(f"[{sec.name}] kind must be one of {', '.join(allowed)}, got {kind!r}")
    params = {}
    for key in sorted(set(sec.data) - {"kind", "boundary"}):
        if key not in allowed[kind]:
            raise ConfigError(f"[{sec.name}] key '{key}' does not apply to kind {kind}")
        params[key] = sec.number(key)
    modes = tuple(m.strip() for m in sec.text("boundary", ABSORBING).split(","))
    for m in modes:
        if m not in BOUNDARY_MODES:
            raise ConfigError(f"[{sec.name}] boundary must be absorbing or reflecting, got {m!r}")
    if len(modes) not in (1, 2):
        raise ConfigError(f"[{sec.name}] boundary takes one mode or 'lower,upper'")
    try:
        return build_diffusion(kind, params, grid, rate, modes if len(modes) == 2 else modes[0])
    except ValueError as exc:
        raise ConfigError(f"[{sec.name}] {exc}") from None


def _cost_array(text, states, key):
    if text.strip().lower() in ("inf", "+inf"):
        return np.full(len(states), np.inf)
    return compile_expression(text, ("x",), key=key)(states)


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    """Read and validate ``path``; ``overrides`` may set seed or strict."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    raw = {s: dict(parser[s]) for s in parser.sections()}
    for s, keys in raw.items():
        if s not in SCHEMA:
            raise ConfigError(f"unknown section [{s}]")
        for k in keys:
            if k not in SCHEMA[s]:
                raise ConfigError(f"unknown key '{k}' in section [{s}]")
    for s, keys in REQUIRED.items():
        if s not in raw:
            raise ConfigError(f"missing section [{s}] (needs {', '.join(sorted(keys))})")
        for k in sorted(keys):
            if k not in raw[s]:
                raise ConfigError(f"missing key '{k}' in section [{s}]")
    sec = {s: _Section(s, raw.get(s, {})) for s in SCHEMA}
    overrides = overrides or {}

    kind = sec["problem"].text("kind")
    if kind not in PROBLEM_KINDS:
        raise ConfigError(f"[problem] kind must be one of {', '.join(PROBLEM_KINDS)}, got {kind!r}")
    rate = sec["problem"].number("rate")
    if not rate > 0:
        raise ConfigError("[problem] rate must be positive")
    strict = bool(overrides.get("strict")) or sec["problem"].flag("strict")

    g = sec["grid"]
    try:
        grid = Grid(g.number("lo"), g.number("hi"), g.number("n", kind=int))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[grid] {exc}") from None
    chain = _process(sec["process"], grid, rate)
    states = chain.states
    f = _reward(sec["reward"], states)

    s = sec["solver"]
    inner = s.text("stopping_inner", POLICY_REGIONS)
    if inner not in (POLICY_REGIONS, VALUE_ITERATION):
        raise ConfigError(f"[solver] stopping_inner must be {POLICY_REGIONS} or {VALUE_ITERATION}")
    try:
        solver = SolverConfig(tol=s.number("tol", 1e-9), max_outer_iters=s.number("max_outer_iters", 10_000, int),
                              stopping_inner=inner)
    except ValueError as exc:
        raise ConfigError(f"[solver] {exc}") from None

    m = sec["simulation"]
    seed = overrides.get("seed")
    try:
        sim = SimConfig(paths=m.number("paths", 10_000, int), dt=m.number("dt", 1e-3),
                        horizon=m.number("horizon", 50.0),
                        seed=int(seed) if seed is not None else m.number("seed", 0, int),
                        max_interventions_per_path=m.number("max_interventions", 10_000, int),
                        record_paths=m.flag("record_paths"))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[simulation] {exc}") from None
    x0 = m.number("x0", 0.0)
    strategy_file = m.text("strategy_file") if m.has("strategy_file") else None

    v = sec["verify"]
    cfg = RunConfig(kind=kind, rate=rate, strict=strict, grid=grid, chain=chain, f=f, solver=solver, sim=sim,
                    x0=x0, strategy_file=strategy_file, verify_trials=v.number("trials", 20, int),
                    verify_seed=v.number("seed", 0, int), raw=raw)

    if kind == "impulse":
        for name in ("cost", "targets"):
            if name not in raw:
                raise ConfigError(f"missing section [{name}] for an impulse problem")
        cfg.problem = ImpulseProblem(chain=chain, f=f, cost=_cost(sec["cost"], grid.n),
                                     targets=_targets(sec["targets"], grid.n))
        try:
            cfg.problem.pairs
        except ValueError as exc:
            raise ConfigError(f"[cost] {exc}") from None
    elif kind == "stopping":
        cfg.stopping_g = compile_expression(sec["stopping"].text("g"), ("x",), "[stopping] g")(states)
        if not np.all(np.isfinite(cfg.stopping_g)):
            raise ConfigError("[stopping] g is not finite on the grid")
    elif kind == "multistop":
        ms = sec["multistop"]
        gvals = compile_expression(ms.text("g"), ("x",), "[multistop] g")(states)
        if np.any(gvals < 0):
            raise ConfigError("[multistop] g must be nonnegative on the grid")
        k = ms.number("k", kind=int)
        delta = ms.number("delta")
        if k < 1 or not delta > 0:
            raise ConfigError("[multistop] needs k >= 1 and delta > 0")
        cfg.multistop = (gvals, k, delta)
    elif kind == "switching":
        sw = sec["switching"]
        chain1 = _process(sec["process1"], grid, rate) if "process1" in raw else chain
        cfg.switching = {
            "chain1": chain1,
            "f0": compile_expression(sw.text("f0"), ("x",), "[switching] f0")(states),
            "f1": compile_expression(sw.text("f1"), ("x",), "[switching] f1")(states),
            "k0": _cost_array(sw.text("k0"), states, "[switching] k0"),
            "k1": _cost_array(sw.text("k1"), states, "[switching] k1"),
        }
    return cfg
