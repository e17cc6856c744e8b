"""Special problem classes written as impulse control problems.

* Ordinary stopping: add a cemetery state; stopping at x is the shift x -> grave
  with cost -g(x).
* Multiple stopping with a deterministic refraction period: solved as a chain
  of ordinary stopping problems; a brute-force discrete-time dynamic
  programme on the extended state space serves as the reference.
* Two-regime switching: product chain {0, 1} x grid, the only shift being a
  regime change at cost k_i(x).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .chain import MarkovChain, expected_discounted_at_fixed_time, with_grave
from .problem import ImpulseProblem, IndexCost, TableTargets
from .solver import (POLICY_REGIONS, SolverConfig, ValueSolution, optimal_stopping, solve)


# --- ordinary stopping -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class StoppingProblem:
    """Stop once and collect g(X_tau), earning f until then.

    ``chain`` is the uncontrolled chain without the cemetery state; the
    compiler appends it. ``g`` and ``f`` are given on the chain's states.
    """

    chain: MarkovChain
    g: np.ndarray
    f: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.chain.n_states
        g = np.broadcast_to(np.asarray(self.g, dtype=float), (n,)).copy()
        f = np.zeros(n) if self.f is None else np.broadcast_to(np.asarray(self.f, dtype=float), (n,)).copy()
        if self.chain.grave is not None:
            raise ValueError("pass the chain without a grave state; compile_stopping adds it")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(f))):
            raise ValueError("stopping reward and running reward must be finite")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "f", f)


def compile_stopping(problem: StoppingProblem) -> ImpulseProblem:
    """A(x) = {x, grave}, K(x, grave) = -g(x); the grave admits no shift."""
    chain = with_grave(problem.chain)
    grave = chain.grave
    n = problem.chain.n_states
    table = tuple([np.array([grave])] * n + [np.array([], dtype=np.intp)])
    neg_g = np.append(-problem.g, 0.0)
    cost = IndexCost(lambda src, dst: neg_g[src])
    f = np.append(problem.f, 0.0)
    return ImpulseProblem(chain=chain, f=f, cost=cost, targets=TableTargets(table))


def integrability_note(problem: StoppingProblem) -> str:
    gmax = float(np.max(np.abs(problem.g)))
    return (f"sup |g| = {gmax:.6g} is finite on the grid, so E_x sup_t e^(-rt) |g(X_t)| <= {gmax:.6g} "
            "and the integrability requirement holds automatically")


def solve_stopping_direct(problem: StoppingProblem, method: str = "value_iteration", **kw) -> np.ndarray:
    """Stopping value straight from the stopping solver (no impulse machinery)."""
    return optimal_stopping(problem.chain, problem.g, problem.f, method=method, **kw).value


def solve_stopping_via_impulse(problem: StoppingProblem, config: SolverConfig = SolverConfig()):
    compiled = compile_stopping(problem)
    sol = solve(compiled, config)
    return sol.v[:problem.chain.n_states], sol


# --- multiple stopping -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class MultiStopProblem:
    """k exercise rights of reward g, separated by at least ``delta`` time units."""

    chain: MarkovChain
    g: np.ndarray
    k: int
    delta: float

    def __post_init__(self):
        g = np.broadcast_to(np.asarray(self.g, dtype=float), (self.chain.n_states,)).copy()
        if self.k < 1:
            raise ValueError("need at least one exercise right")
        if not self.delta > 0:
            raise ValueError("refraction period must be positive")
        if np.any(g < 0) or not np.all(np.isfinite(g)):
            raise ValueError("exercise reward must be finite and nonnegative")
        object.__setattr__(self, "g", g)


def solve_multistop(problem: MultiStopProblem, method: str = POLICY_REGIONS, atol: float = 1e-10) -> list:
    """[v_1, ..., v_k]: v_i is the value with i rights left.

    v_1 stops for g; v_{i+1} stops for g + e^{-r delta} E v_i(X_delta).
    """
    chain = problem.chain
    values = [optimal_stopping(chain, problem.g, method=method).value]
    for _ in range(1, problem.k):
        after = expected_discounted_at_fixed_time(chain, values[-1], problem.delta, atol=atol)
        values.append(optimal_stopping(chain, problem.g + after, method=method).value)
    return values


def multistop_brute_force(problem: MultiStopProblem, dt: float) -> list:
    """Extended-space dynamic programme in discrete time, by policy enumeration.

    State (x, rights, clock). Time runs in steps of ``dt`` with transition
    P = exp(dt A) and discount e^{-r dt}; exercising needs clock 0 and
    restarts the clock at delta / dt steps. For each number of rights every
    subset of states is tried as the stopping set and the pointwise best
    value kept, which is the optimal value of the discrete-time problem.
    Only meant for a handful of states.
    """
    chain = problem.chain
    n = chain.n_states
    if n > 12:
        raise ValueError("brute force enumerates 2^n stopping sets; keep n small")
    steps = int(round(problem.delta / dt))
    if not math.isclose(steps * dt, problem.delta, rel_tol=1e-9):
        raise ValueError("delta must be a whole number of clock steps")
    A = chain.dense()
    P = sla.expm(dt * A)
    beta = math.exp(-chain.rate * dt)
    clock = np.linalg.matrix_power(beta * P, steps)  # discounted clock run-down
    eye = np.eye(n)
    values = []
    prev = np.zeros(n)
    for _ in range(problem.k):
        reward = problem.g + clock @ prev
        best = np.full(n, -np.inf)
        for bits in itertools.product((False, True), repeat=n):
            S = np.array(bits)
            # V = reward on S, V = beta P V off S
            M = np.where(S[:, None], eye, eye - beta * P)
            rhs = np.where(S, reward, 0.0)
            best = np.maximum(best, np.linalg.solve(M, rhs))
        values.append(best)
        prev = best
    return values


# --- switching -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SwitchingProblem:
    """Two regimes on one grid; switching from regime i at x costs k_i(x).

    A cost of +inf forbids the switch (the pair is dropped from A).
    """

    chain0: MarkovChain
    chain1: MarkovChain
    k0: np.ndarray
    k1: np.ndarray
    f0: np.ndarray
    f1: np.ndarray

    def __post_init__(self):
        n = self.chain0.n_states
        if self.chain1.n_states != n or not np.array_equal(self.chain0.states, self.chain1.states):
            raise ValueError("both regimes must live on the same grid")
        if not math.isclose(self.chain0.rate, self.chain1.rate):
            raise ValueError("both regimes must share the discount rate")
        for name in ("k0", "k1", "f0", "f1"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (n,)).copy()
            object.__setattr__(self, name, arr)
        for name in ("k0", "k1"):
            arr = getattr(self, name)
            if np.any(np.isnan(arr)) or np.any(arr == -np.inf):
                raise ValueError(f"{name} must be finite or +inf")
        if not (np.all(np.isfinite(self.f0)) and np.all(np.isfinite(self.f1))):
            raise ValueError("running rewards must be finite")


def compile_switching(problem: SwitchingProblem) -> ImpulseProblem:
    """Product chain with block-diagonal generator; A(i, x) = {(i, x), (1 - i, x)}."""
    c0, c1 = problem.chain0, problem.chain1
    n = c0.n_states
    gen = sp.block_diag([c0.generator, c1.generator], format="csr")
    states = np.concatenate([c0.states, c1.states])
    regime = np.repeat([0, 1], n)
    chain = MarkovChain(grid=c0.grid, generator=gen, rate=c0.rate, boundary=c0.boundary,
                        states=states, regime=regime)
    k = np.concatenate([problem.k0, problem.k1])
    table = []
    for s in range(2 * n):
        partner = s + n if s < n else s - n
        table.append(np.array([partner]) if np.isfinite(k[s]) else np.array([], dtype=np.intp))
    cost = IndexCost(lambda src, dst: k[src])
    f = np.concatenate([problem.f0, problem.f1])
    return ImpulseProblem(chain=chain, f=f, cost=cost, targets=TableTargets(tuple(table)))


def regime_values(problem: SwitchingProblem, solution: ValueSolution):
    n = problem.chain0.n_states
    return solution.v[:n], solution.v[n:]


@dataclass
class SwitchingConsistency:
    passed: bool
    max_error: tuple
    tol: float
    details: list = field(default_factory=list)


def switching_consistency(problem: SwitchingProblem, solution: ValueSolution,
                          tol: float = 1e-6) -> SwitchingConsistency:
    """Each regime's value must be the stopping value for reward v(1 - i) - k_i.

    One independent stopping solve per regime on that regime's own chain.
    """
    v0, v1 = regime_values(problem, solution)
    errs = []
    for chain, f, own, other, k in ((problem.chain0, problem.f0, v0, v1, problem.k0),
                                    (problem.chain1, problem.f1, v1, v0, problem.k1)):
        reward = np.where(np.isfinite(k), other - np.where(np.isfinite(k), k, 0.0), -np.inf)
        stop = optimal_stopping(chain, reward, f).value
        errs.append(float(np.max(np.abs(stop - own))))
    return SwitchingConsistency(passed=max(errs) <= tol, max_error=tuple(errs), tol=tol)
