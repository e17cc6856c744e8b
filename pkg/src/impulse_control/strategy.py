"""Intervention strategies read off a solved value function.

The optimal rule acts on entry to the contact set {v = Mv} and moves the
state to a maximizer of v(y) - K(x, y). On a grid the maximizer is made
unique by taking the smallest state index among ties.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .chain import Grid
from .errors import ExtractionError
from .problem import ImpulseProblem, best_targets
from .solver import ValueSolution

NO_TARGET = -1


@dataclass(frozen=True, eq=False)
class InterventionStrategy:
    """Feedback rule: intervene on ``region``, jump to ``target``.

    ``target`` holds a state index for every region state and ``NO_TARGET``
    elsewhere. ``violations`` lists (x, target(x)) pairs whose target lies
    inside the region again.
    """

    region: np.ndarray
    target: np.ndarray
    activation_tol: float = 0.0
    violations: tuple = field(default_factory=tuple)

    def __post_init__(self):
        region = np.asarray(self.region, dtype=bool)
        target = np.asarray(self.target, dtype=np.intp)
        if region.shape != target.shape:
            raise ValueError("region and target arrays must have the same length")
        if np.any(target[region] < 0):
            raise ValueError("every region state needs a target")
        object.__setattr__(self, "region", region)
        object.__setattr__(self, "target", np.where(region, target, NO_TARGET))

    @property
    def n_states(self) -> int:
        return self.region.size

    @property
    def is_empty(self) -> bool:
        return not self.region.any()

    def pairs(self) -> list:
        idx = np.flatnonzero(self.region)
        return list(zip(idx.tolist(), self.target[idx].tolist()))

    def runs(self) -> list:
        """Maximal index ranges [i, j] of consecutive region states."""
        idx = np.flatnonzero(self.region)
        if idx.size == 0:
            return []
        breaks = np.flatnonzero(np.diff(idx) > 1)
        starts = np.r_[idx[0], idx[breaks + 1]]
        ends = np.r_[idx[breaks], idx[-1]]
        return list(zip(starts.tolist(), ends.tolist()))


@dataclass(frozen=True)
class ConstantBoundaryStrategy:
    """Intervene outside (a, b); move to alpha from below and to beta_t from above."""

    a: float
    alpha: float
    beta_t: float
    b: float

    def __post_init__(self):
        if not (self.a < self.alpha <= self.beta_t < self.b):
            raise ValueError(f"need a < alpha <= beta_t < b, got {self}")

    def intervenes(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x <= self.a) | (x >= self.b)

    def target_of(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.where(x <= self.a, self.alpha, np.where(x >= self.b, self.beta_t, x))


def default_activation_tol(solution: ValueSolution) -> float:
    # the contact set is where v - Mv vanishes to the solver's certification level
    return 10.0 * solution.tol


def extract(solution: ValueSolution, problem: ImpulseProblem,
            activation_tol: Optional[float] = None) -> InterventionStrategy:
    """Region {v - Mv <= activation_tol} with argmax targets.

    Raises ExtractionError when a region state has no nontrivial target,
    which can only happen for an inconsistent solution.
    """
    if activation_tol is None:
        activation_tol = default_activation_tol(solution)
    region = np.asarray(solution.obstacle_residual <= activation_tol)
    has = problem.has_targets()
    if np.any(region & ~has):
        bad = np.flatnonzero(region & ~has)
        raise ExtractionError(f"states {bad[:10].tolist()} are in the region but admit no shift")
    target = np.where(region, best_targets(problem, solution.v), NO_TARGET)
    violations = tuple((int(x), int(target[x])) for x in np.flatnonzero(region) if region[target[x]])
    return InterventionStrategy(region=region, target=target, activation_tol=float(activation_tol),
                                violations=violations)


def threshold_strategy(problem: ImpulseProblem, lower: float = -math.inf, upper: float = math.inf,
                       lower_target: Optional[float] = None, upper_target: Optional[float] = None
                       ) -> InterventionStrategy:
    """Ray-shaped rule on a grid chain: act at x <= lower or x >= upper.

    Targets are snapped to the nearest state. Admissibility is not checked
    here; the simulator enforces it.
    """
    x = problem.chain.states
    span = problem.chain.grid.spacing * 1e-9
    region = np.zeros(problem.n_states, dtype=bool)
    target = np.full(problem.n_states, NO_TARGET, dtype=np.intp)
    with np.errstate(invalid="ignore"):
        low = x <= lower + span
        high = x >= upper - span
    if low.any():
        if lower_target is None:
            raise ValueError("lower_target required when the lower ray is nonempty")
        region |= low
        target[low] = int(np.nanargmin(np.abs(x - lower_target)))
    if high.any():
        if upper_target is None:
            raise ValueError("upper_target required when the upper ray is nonempty")
        region |= high
        target[high] = int(np.nanargmin(np.abs(x - upper_target)))
    violations = tuple((int(i), int(target[i])) for i in np.flatnonzero(region) if region[target[i]])
    return InterventionStrategy(region=region, target=target, violations=violations)


def ray_structure(strategy: InterventionStrategy, n: int):
    """Split the region into a lower ray [0, i] and an upper ray [j, n - 1].

    Returns (lower_end, upper_start), either may be None, or False when the
    region is not a union of such rays.
    """
    runs = strategy.runs()
    lower = upper = None
    for s, e in runs:
        if s == 0 and lower is None:
            lower = e
        elif e == n - 1 and upper is None:
            upper = s
        else:
            return False
    if lower is not None and upper is not None and lower + 1 >= upper:
        # whole grid in the region
        return False
    return lower, upper


def as_constant_boundary(strategy: InterventionStrategy, grid: Grid) -> Optional[ConstantBoundaryStrategy]:
    """The (a, alpha, beta_t, b) form, or None unless both rays exist with one target each."""
    if strategy.n_states != grid.n:
        return None
    shape = ray_structure(strategy, grid.n)
    if not shape or shape[0] is None or shape[1] is None:
        return None
    lo_end, hi_start = shape
    x = grid.points
    lo_targets = np.unique(strategy.target[: lo_end + 1])
    hi_targets = np.unique(strategy.target[hi_start:])
    if lo_targets.size != 1 or hi_targets.size != 1:
        return None
    a, b = x[lo_end], x[hi_start]
    alpha, beta_t = x[lo_targets[0]], x[hi_targets[0]]
    if not (a < alpha <= beta_t < b):
        return None
    return ConstantBoundaryStrategy(a=float(a), alpha=float(alpha), beta_t=float(beta_t), b=float(b))


def state_label(chain, i: int) -> str:
    if chain.grave is not None and i == chain.grave:
        return "grave"
    if chain.regime is not None:
        return f"({int(chain.regime[i])}, {chain.states[i]:.6g})"
    return f"{chain.states[i]:.6g}"


def describe(strategy: InterventionStrategy, chain) -> str:
    """One-paragraph text summary used in run reports."""
    if strategy.is_empty:
        return "never intervene (empty region)"
    parts = []
    for s, e in strategy.runs():
        tgts = np.unique(strategy.target[s:e + 1])
        tgt = ", ".join(state_label(chain, t) for t in tgts[:5]) + (" ..." if tgts.size > 5 else "")
        parts.append(f"[{state_label(chain, s)} .. {state_label(chain, e)}] -> {{{tgt}}}")
    if chain.is_grid_chain:
        shape = ray_structure(strategy, strategy.n_states)
        if shape and (shape[0] is None) != (shape[1] is None):
            parts.append("(one-sided threshold rule)")
    if strategy.violations:
        parts.append(f"{len(strategy.violations)} targets fall back into the region")
    return "; ".join(parts)
