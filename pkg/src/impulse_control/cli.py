"""Command line front end: solve, simulate, verify, oracle.

Exit codes: 0 success, 1 configuration error, 2 solver did not converge or
the value is not finite, 3 structural or verification failure, 4 simulation
contract violation. Human-readable text goes to stdout; machine output goes
to files in --out.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import oracle as oracle_mod
from .config import RunConfig, load_config
from .errors import (ConfigError, ContractViolationError, ConvergenceError, IllPosedError, ImpulseControlError,
                     RunawayStrategyError)
from .problem import FixedSetTargets, ImpulseProblem, StructureReport, check_structure
from .reductions import (MultiStopProblem, StoppingProblem, SwitchingProblem, compile_stopping, compile_switching,
                         integrability_note, solve_multistop, solve_stopping_direct, switching_consistency)
from .simulate import simulate, write_paths_csv
from .solver import (ValueSolution, certify_membership, complementarity_scan, concavity_diagnostic,
                     minimality_probe, solve)
from .strategy import NO_TARGET, InterventionStrategy, as_constant_boundary, describe, extract

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_STRUCTURE, EXIT_SIMULATION = 0, 1, 2, 3, 4
VALUE_COLUMNS = ("x", "f_bar", "v", "Mv", "h", "dynkin_residual", "obstacle_residual", "in_region", "target")
MAX_STRUCTURE_TRIPLES = 20_000_000
ORACLE_TOL = 2e-2


class StructuralFailure(ImpulseControlError):
    pass


def fmt(x) -> str:
    return format(float(x), ".17g")


# --- solving ---------------------------------------------------------------

@dataclass
class SolveOutcome:
    problem: Optional[ImpulseProblem]
    solution: Optional[ValueSolution]
    strategy: Optional[InterventionStrategy]
    structure: Optional[StructureReport]
    lines: list = field(default_factory=list)
    multistop: Optional[list] = None


def structure_report(problem: ImpulseProblem) -> Optional[StructureReport]:
    """Full triangle/trading scan, skipped when the triple count is prohibitive."""
    indptr, indices, _ = problem.pairs
    sizes = np.diff(indptr)
    if float(np.sum(sizes.astype(float) * (sizes + 1))) > MAX_STRUCTURE_TRIPLES:
        return None
    return check_structure(problem)


def build_problem(cfg: RunConfig) -> ImpulseProblem:
    if cfg.kind == "impulse":
        return cfg.problem
    if cfg.kind == "stopping":
        return compile_stopping(StoppingProblem(cfg.chain, cfg.stopping_g, cfg.f))
    if cfg.kind == "switching":
        sw = cfg.switching
        return compile_switching(SwitchingProblem(cfg.chain, sw["chain1"], sw["k0"], sw["k1"], sw["f0"], sw["f1"]))
    raise ConfigError(f"problem kind {cfg.kind} has no single impulse formulation")


def run_solve(cfg: RunConfig) -> SolveOutcome:
    if cfg.kind == "multistop":
        g, k, delta = cfg.multistop
        values = solve_multistop(MultiStopProblem(cfg.chain, g, k, delta))
        lines = [f"multiple stopping: k = {k}, refraction delta = {delta:g}, rate = {cfg.rate:g}"]
        for i, v in enumerate(values, 1):
            lines.append(f"  v_{i}: min {v.min():.6g}, max {v.max():.6g}")
        return SolveOutcome(None, None, None, None, lines, multistop=values)

    problem = build_problem(cfg)
    structure = structure_report(problem)
    lines = []
    if structure is None:
        lines.append("structure check: skipped (too many target triples for an exhaustive scan)")
    else:
        lines.append("structure check: " + structure.summary())
        if cfg.strict and not (structure.triangle_ok and structure.trading_ok):
            raise StructuralFailure("strict mode: " + structure.summary())
    slack = structure.summary() if structure is not None else "triangle slack not computed"
    try:
        sol = solve(problem, cfg.solver)
    except IllPosedError as exc:
        raise IllPosedError(f"{exc}; {slack}") from None
    except ConvergenceError as exc:
        raise ConvergenceError(f"{exc}; {slack}", exc.last_iterate, exc.residuals, exc.iterations) from None
    strat = extract(sol, problem)
    lines.append(f"solver: converged in {sol.iterations} outer iterations (tol {sol.tol:g})")
    lines.append(f"  max dynkin residual (non-kink) {_max_masked(sol.dynkin_residual, ~sol.kinks):.3g}; "
                 f"min obstacle residual {np.min(sol.obstacle_residual):.3g}")
    lines.append("strategy: " + describe(strat, problem.chain))
    if problem.chain.is_grid_chain:
        cb = as_constant_boundary(strat, problem.chain.grid)
        if cb is not None:
            lines.append(f"constant-boundary form: a = {cb.a:.6g}, alpha = {cb.alpha:.6g}, "
                         f"beta = {cb.beta_t:.6g}, b = {cb.b:.6g}")
    if cfg.kind == "stopping":
        lines.append(integrability_note(StoppingProblem(cfg.chain, cfg.stopping_g, cfg.f)))
    if strat.violations:
        x, y = strat.violations[0]
        raise StructuralFailure(
            f"extracted strategy re-enters its own region ({len(strat.violations)} targets, e.g. state {x} -> {y}); "
            f"interventions would pile up at one instant; {slack}")
    return SolveOutcome(problem, sol, strat, structure, lines)


def _max_masked(a, mask):
    vals = a[mask]
    return float(vals.max()) if vals.size else float("nan")


# --- files -----------------------------------------------------------------

def write_values_csv(path, problem: ImpulseProblem, sol: ValueSolution, strat: InterventionStrategy) -> None:
    """One row per state; ``target`` is a state index (-1 outside the region)."""
    cols = [problem.chain.states, sol.f_bar, sol.v, sol.Mv, sol.h, sol.dynkin_residual, sol.obstacle_residual]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VALUE_COLUMNS)
        for i in range(problem.n_states):
            w.writerow([fmt(c[i]) for c in cols] + [int(strat.region[i]), int(strat.target[i])])


def read_values_csv(path) -> dict:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read values file {path}: {exc.strerror}") from None
    if not rows or tuple(rows[0]) != VALUE_COLUMNS:
        raise ConfigError(f"values file {path} must have the header {','.join(VALUE_COLUMNS)}")
    data = list(zip(*rows[1:]))
    out = {}
    for name, col in zip(VALUE_COLUMNS, data):
        try:
            out[name] = np.array([int(c) for c in col]) if name in ("in_region", "target") \
                else np.array([float(c) for c in col])
        except ValueError:
            raise ConfigError(f"values file {path}: column {name} is not numeric") from None
    return out


def write_multistop_csv(path, states, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x"] + [f"v_{i}" for i in range(1, len(values) + 1)])
        for j in range(len(states)):
            w.writerow([fmt(states[j])] + [fmt(v[j]) for v in values])


def read_strategy_csv(path, problem: ImpulseProblem) -> InterventionStrategy:
    """Strategy file: header ``x,target`` and one row per region state (coordinates)."""
    x = problem.chain.states
    dx = problem.chain.grid.spacing
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read strategy file {path}: {exc.strerror}") from None
    if not rows or [c.strip() for c in rows[0]] != ["x", "target"]:
        raise ConfigError(f"strategy file {path} must start with the header x,target")
    region = np.zeros(problem.n_states, dtype=bool)
    target = np.full(problem.n_states, NO_TARGET, dtype=np.intp)

    def locate(val, what):
        try:
            v = float(val)
        except ValueError:
            raise ConfigError(f"strategy file: {what} {val!r} is not a number") from None
        d = np.abs(x - v)
        i = int(np.nanargmin(d))
        if d[i] > 1e-6 * dx:
            raise ConfigError(f"strategy file: {what} {v} is not a grid point")
        return i

    for row in rows[1:]:
        if not row:
            continue
        if len(row) != 2:
            raise ConfigError("strategy file rows must have two fields: x,target")
        i = locate(row[0], "x")
        region[i] = True
        target[i] = locate(row[1], "target")
    return InterventionStrategy(region=region, target=target)


def _write_text(path, lines) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# --- commands --------------------------------------------------------------

def cmd_solve(cfg: RunConfig, out: str) -> int:
    res = run_solve(cfg)
    if res.multistop is not None:
        write_multistop_csv(os.path.join(out, "multistop.csv"), cfg.chain.states, res.multistop)
    else:
        write_values_csv(os.path.join(out, "values.csv"), res.problem, res.solution, res.strategy)
    _write_text(os.path.join(out, "report.txt"), res.lines)
    print("\n".join(res.lines))
    return EXIT_OK


def _value_at(problem: ImpulseProblem, v: np.ndarray, x0: float) -> float:
    if problem.chain.is_grid_chain:
        return float(np.interp(x0, problem.chain.states, v))
    return float(v[int(np.nanargmin(np.abs(problem.chain.states - x0)))])


def cmd_simulate(cfg: RunConfig, out: str, strategy_path: Optional[str] = None) -> int:
    if cfg.kind == "multistop":
        raise ConfigError("[problem] kind multistop cannot be simulated; use impulse, stopping or switching")
    res = run_solve(cfg)
    problem = res.problem
    path = strategy_path or cfg.strategy_file
    if path:
        if cfg.kind != "impulse":
            raise ConfigError("strategy_file is only supported for impulse problems")
        strat = read_strategy_csv(path, problem)
        source = f"file {os.path.basename(path)}"
    else:
        strat = res.strategy
        source = "solved"
    est = simulate(problem, strat, cfg.x0, cfg.sim)
    v0 = _value_at(problem, res.solution.v, cfg.x0)
    gap = est.mean - v0
    flagged = abs(gap) > 3.0 * est.std_error
    lines = [f"strategy: {source}", f"x0 = {fmt(cfg.x0)}", f"seed = {cfg.sim.seed}",
             f"paths = {cfg.sim.paths}, dt = {fmt(cfg.sim.dt)}, horizon = {fmt(cfg.sim.horizon)}",
             est.summary().rstrip("\n"), f"solved v(x0) = {fmt(v0)}",
             f"mean - v(x0) = {fmt(gap)} ({'FLAG: beyond 3 standard errors' if flagged else 'within 3 standard errors'})"]
    _write_text(os.path.join(out, "simulation.txt"), lines)
    if cfg.sim.record_paths:
        write_paths_csv(est, os.path.join(out, "paths.csv"))
    print("\n".join(lines))
    return EXIT_OK


def matches_discontinuous_example(cfg: RunConfig) -> bool:
    """Standard Brownian motion, f = 0, A(x) = {x, 0}, K(x, 0) = 1 below 1 and -1 from 1 on."""
    proc = cfg.chain.process
    if cfg.kind != "impulse" or proc is None or proc.kind != "brownian":
        return False
    if float(proc.params.get("drift", 0.0)) != 0.0 or abs(float(proc.params.get("sigma", 1.0))) != 1.0:
        return False
    if np.any(cfg.f != 0.0):
        return False
    targets = cfg.problem.targets
    if not isinstance(targets, FixedSetTargets) or tuple(float(p) for p in targets.points) != (0.0,):
        return False
    x = cfg.chain.states
    zero = int(np.argmin(np.abs(x)))
    if abs(x[zero]) > 1e-9 * cfg.grid.spacing:
        return False
    others = np.flatnonzero(np.arange(x.size) != zero)
    k = cfg.problem.cost_of(others, np.full(others.size, zero))
    return bool(np.allclose(k, np.where(x[others] >= 1.0 - 1e-9 * cfg.grid.spacing, -1.0, 1.0), atol=1e-12))


def cmd_verify(cfg: RunConfig, out: str, values_path: Optional[str] = None) -> int:
    checks = []  # (name, passed, detail)
    if values_path:
        problem = build_problem(cfg)
        data = read_values_csv(values_path)
        if data["h"].size != problem.n_states:
            raise ConfigError(f"values file has {data['h'].size} rows, problem has {problem.n_states} states")
        rep = certify_membership(problem, data["h"])
        checks.append(("membership of supplied h", rep.passed, "; ".join(rep.failures) or "all constraints hold"))
    else:
        res = run_solve(cfg)
        if res.multistop is not None:
            vals = res.multistop
            mono = all(np.all(b >= a - 1e-12) for a, b in zip(vals, vals[1:]))
            checks.append(("v_(i+1) >= v_i", mono, f"{len(vals)} value arrays"))
        else:
            problem, sol = res.problem, res.solution
            rep = certify_membership(problem, sol.h)
            checks.append(("membership of solved h", rep.passed, "; ".join(rep.failures) or "all constraints hold"))
            mp = minimality_probe(problem, sol, cfg.verify_trials, seed=cfg.verify_seed)
            checks.append(("minimality probe", mp.passed,
                           f"{mp.certified} certified of {mp.trials}, worst margin {mp.worst_margin:.3g}"))
            comp = complementarity_scan(problem, sol)
            checks.append(("QVI complementarity", comp.passed, f"worst {comp.worst:.3g} at {comp.checked} points"))
            if problem.chain.is_grid_chain:
                try:
                    conc = concavity_diagnostic(problem.chain, sol.h)
                    checks.append(("concavity in psi/phi coordinates", conc.passed,
                                   f"worst slack {conc.worst_violation:.3g}"))
                except ImpulseControlError as exc:
                    checks.append(("concavity in psi/phi coordinates", True, f"not applicable: {exc}"))
            if cfg.kind == "stopping":
                direct = solve_stopping_direct(StoppingProblem(cfg.chain, cfg.stopping_g, cfg.f))
                err = float(np.max(np.abs(direct - sol.v[:cfg.chain.n_states])))
                checks.append(("stopping value vs direct solve", err <= 1e-8, f"max difference {err:.3g}"))
            if cfg.kind == "switching":
                sw = cfg.switching
                swp = SwitchingProblem(cfg.chain, sw["chain1"], sw["k0"], sw["k1"], sw["f0"], sw["f1"])
                con = switching_consistency(swp, sol)
                checks.append(("switching consistency", con.passed, f"max errors {con.max_error}"))
            if matches_discontinuous_example(cfg):
                sol_or = oracle_mod.discontinuous_cost_solution(cfg.rate)
                err = float(np.max(np.abs(sol.v - sol_or.value(cfg.chain.states))))
                checks.append(("closed-form oracle", err <= ORACLE_TOL,
                               f"sup error {err:.3g} (tolerance {ORACLE_TOL:g})"))
    lines = [f"{'PASS' if ok else 'FAIL'}  {name}: {detail}" for name, ok, detail in checks]
    _write_text(os.path.join(out, "verify.txt"), lines)
    print("\n".join(lines))
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_STRUCTURE


def cmd_oracle(cfg: RunConfig, out: str) -> int:
    sol = oracle_mod.discontinuous_cost_solution(cfg.rate)
    x = cfg.chain.states
    v = sol.value(x)
    with open(os.path.join(out, "oracle.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "v"])
        for a, b in zip(x, v):
            w.writerow([fmt(a), fmt(b)])
    if isinstance(sol, oracle_mod.Case1Solution):
        lines = [f"regime: one-sided (e^beta >= 2)", f"r = {fmt(sol.r)}", f"beta = {fmt(sol.beta)}",
                 f"lambda = {fmt(sol.lam)}"]
    else:
        lines = [f"regime: two-sided (e^beta < 2)", f"r = {fmt(sol.r)}", f"beta = {fmt(sol.beta)}",
                 f"h0 = {fmt(sol.h0)}", f"lambda1 = {fmt(sol.lambda1)}", f"lambda2 = {fmt(sol.lambda2)}",
                 f"x_star = {fmt(sol.x_star)}", f"residual = {sol.residual:.3g}"]
    _write_text(os.path.join(out, "oracle.txt"), lines)
    print("\n".join(lines))
    return EXIT_OK


# --- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="impulse-control", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("solve", "compute the value function and strategy"),
                       ("simulate", "Monte Carlo payoff of the solved (or a file) strategy"),
                       ("verify", "run the certificates on the solved value"),
                       ("oracle", "dump the closed-form Brownian reference")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="INI run configuration")
        p.add_argument("--out", default=".", help="output directory (created if missing)")
        p.add_argument("--seed", type=int, default=None, help="override [simulation] seed")
        p.add_argument("--strict", action="store_true", help="structural check failures are fatal")
        if name == "simulate":
            p.add_argument("--strategy", default=None, help="CSV strategy file (x,target)")
        if name == "verify":
            p.add_argument("--values", default=None, help="certify the h column of a values CSV instead")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {"seed": args.seed, "strict": args.strict})
        os.makedirs(args.out, exist_ok=True)
        if args.command == "solve":
            return cmd_solve(cfg, args.out)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.out, args.strategy)
        if args.command == "verify":
            return cmd_verify(cfg, args.out, args.values)
        return cmd_oracle(cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, IllPosedError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ContractViolationError, RunawayStrategyError) as exc:
        print(f"simulation contract violation: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except StructuralFailure as exc:
        print(f"structural failure: {exc}", file=sys.stderr)
        return EXIT_STRUCTURE


if __name__ == "__main__":
    sys.exit(main())
