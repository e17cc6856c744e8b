"""Impulse control problems: running reward, shift costs, admissible targets.

The admissible (state, target) pairs are precomputed in CSR layout, so the
maximum operator is one gather plus a segmented max.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .chain import MarkovChain, resolvent

# empty supremum; IEEE -inf absorbs additions, so no sentinel arithmetic leaks
BOTTOM = -np.inf


# --- costs -----------------------------------------------------------------

class CostFn:
    """Cost K(x, y) of shifting from state ``x`` to state ``y``.

    Subclasses evaluate vectorized over index arrays; K(x, x) = 0 is enforced
    by the caller, never stored.
    """

    def __call__(self, chain: MarkovChain, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, chain, src, dst):
        src = np.asarray(src, dtype=np.intp)
        dst = np.asarray(dst, dtype=np.intp)
        out = np.asarray(self(chain, src, dst), dtype=float)
        out = np.broadcast_to(out, np.broadcast(src, dst).shape).copy()
        out[src == dst] = 0.0
        return out


@dataclass(frozen=True)
class AffineCost(CostFn):
    """K(x, y) = proportional * |x - y| + fixed for x != y."""

    proportional: float = 0.0
    fixed: float = 0.0

    def __call__(self, chain, src, dst):
        x = chain.states
        return self.proportional * np.abs(x[src] - x[dst]) + self.fixed


@dataclass(frozen=True)
class TableCost(CostFn):
    matrix: np.ndarray

    def __call__(self, chain, src, dst):
        return np.asarray(self.matrix, dtype=float)[src, dst]


@dataclass(frozen=True)
class PiecewiseCost(CostFn):
    """Cost depending on where the shift starts.

    ``pieces`` is a sequence of (lo, hi, fixed, proportional): for a source
    location x in [lo, hi) the cost is fixed + proportional * |x - y|. The
    comparison snaps to the grid so a boundary that sits on a grid point is
    attributed to the upper piece.
    """

    pieces: tuple

    def __call__(self, chain, src, dst):
        x = chain.states[src]
        y = chain.states[dst]
        snap = 1e-9 * chain.grid.spacing
        out = np.full(np.broadcast(x, y).shape, np.nan)
        for lo, hi, fixed, prop in self.pieces:
            sel = (x >= lo - snap) & (x < hi - snap) & np.isnan(out)
            out = np.where(sel, fixed + prop * np.abs(x - y), out)
        if np.any(np.isnan(out)):
            raise ValueError("piecewise cost does not cover every source state")
        return out


@dataclass(frozen=True)
class ExpressionCost(CostFn):
    """Cost given by a vectorized function of the coordinates (x, y)."""

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    source: str = ""

    def __call__(self, chain, src, dst):
        return self.fn(chain.states[src], chain.states[dst])


@dataclass(frozen=True)
class IndexCost(CostFn):
    """Cost given directly on state indices (used by the problem reductions)."""

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def __call__(self, chain, src, dst):
        return self.fn(src, dst)


# --- admissible targets ----------------------------------------------------

class TargetSets:
    """Rule A(x) of admissible post-impulse states.

    ``x`` itself is always admissible (degenerate shift); ``nontrivial``
    returns the remaining targets as CSR arrays (indptr, indices).
    """

    def rows(self, chain: MarkovChain) -> list:
        raise NotImplementedError

    def nontrivial(self, chain: MarkovChain):
        rows = self.rows(chain)
        indptr = np.zeros(chain.n_states + 1, dtype=np.intp)
        parts = []
        for i, row in enumerate(rows):
            row = np.unique(np.asarray(row, dtype=np.intp))
            row = row[row != i]
            if row.size and (row.min() < 0 or row.max() >= chain.n_states):
                raise ValueError(f"target index out of range for state {i}")
            parts.append(row)
            indptr[i + 1] = indptr[i] + row.size
        indices = np.concatenate(parts) if parts else np.zeros(0, dtype=np.intp)
        return indptr, indices


def _regular_states(chain):
    keep = np.ones(chain.n_states, dtype=bool)
    if chain.grave is not None:
        keep[chain.grave] = False
    return np.flatnonzero(keep)


@dataclass(frozen=True)
class AllTargets(TargetSets):
    def rows(self, chain):
        regular = _regular_states(chain)
        return [regular] * chain.n_states


@dataclass(frozen=True)
class FixedSetTargets(TargetSets):
    """A(x) = {x} ∪ points; each point is snapped to the nearest state."""

    points: tuple

    def indices(self, chain):
        out = []
        for p in self.points:
            d = np.abs(chain.states - p)
            j = int(np.nanargmin(d))
            out.append(j)
        return np.array(out, dtype=np.intp)

    def rows(self, chain):
        idx = self.indices(chain)
        return [idx] * chain.n_states


@dataclass(frozen=True)
class BandTargets(TargetSets):
    """A(x) = {y : |y - x| <= width}."""

    width: float

    def rows(self, chain):
        x = chain.states
        regular = _regular_states(chain)
        eps = 1e-9 * chain.grid.spacing
        return [regular[np.abs(x[regular] - x[i]) <= self.width + eps] for i in range(chain.n_states)]


@dataclass(frozen=True)
class TableTargets(TargetSets):
    """Explicit per-state target lists (indices)."""

    table: tuple

    def rows(self, chain):
        if len(self.table) != chain.n_states:
            raise ValueError("target table must list one row per state")
        return [np.asarray(r, dtype=np.intp) for r in self.table]


# --- the problem -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ImpulseProblem:
    chain: MarkovChain
    f: np.ndarray
    cost: CostFn
    targets: TargetSets = field(default_factory=AllTargets)

    def __post_init__(self):
        f = np.asarray(self.f, dtype=float)
        if f.ndim == 0:
            f = np.full(self.chain.n_states, float(f))
        if f.shape != (self.chain.n_states,):
            raise ValueError(f"running reward has shape {f.shape}, chain has {self.chain.n_states} states")
        if self.chain.grave is not None and f[self.chain.grave] != 0:
            raise ValueError("running reward must vanish at the grave state")
        object.__setattr__(self, "f", f)

    @cached_property
    def pairs(self):
        """(indptr, indices, costs) of every nontrivial admissible shift."""
        indptr, indices = self.targets.nontrivial(self.chain)
        src = np.repeat(np.arange(self.chain.n_states), np.diff(indptr))
        costs = self.cost.evaluate(self.chain, src, indices)
        if not np.all(np.isfinite(costs)):
            raise ValueError("shift costs must be finite; forbid a shift by removing it from the targets")
        return indptr, indices, costs

    @cached_property
    def f_bar(self) -> np.ndarray:
        return resolvent(self.chain, self.f)

    @property
    def n_states(self) -> int:
        return self.chain.n_states

    def has_targets(self) -> np.ndarray:
        return np.diff(self.pairs[0]) > 0

    def cost_of(self, src, dst) -> np.ndarray:
        return self.cost.evaluate(self.chain, src, dst)

    def admissible(self, src: int, dst: int) -> bool:
        if src == dst:
            return True
        indptr, indices, _ = self.pairs
        return bool(np.any(indices[indptr[src]:indptr[src + 1]] == dst))


def apply_M(problem: ImpulseProblem, w: np.ndarray) -> np.ndarray:
    """Mw(x) = max over y in A(x)\\{x} of w(y) - K(x, y); BOTTOM where no shift exists."""
    w = np.asarray(w, dtype=float)
    indptr, indices, costs = problem.pairs
    out = np.full(problem.n_states, BOTTOM)
    nonempty = np.flatnonzero(np.diff(indptr) > 0)
    if nonempty.size:
        gains = w[indices] - costs
        out[nonempty] = np.maximum.reduceat(gains, indptr[nonempty])
    return out


def best_targets(problem: ImpulseProblem, w: np.ndarray) -> np.ndarray:
    """Argmax target per state (smallest index on ties), -1 where no shift exists."""
    w = np.asarray(w, dtype=float)
    indptr, indices, costs = problem.pairs
    gains = w[indices] - costs
    best = np.full(problem.n_states, -1, dtype=np.intp)
    for i in np.flatnonzero(np.diff(indptr) > 0):
        seg = slice(indptr[i], indptr[i + 1])
        g = gains[seg]
        cand = indices[seg][g == g.max()]
        best[i] = cand.min()
    return best


def kbar(problem: ImpulseProblem, x: int, y: int) -> float:
    """Transformed shift reward fbar(y) - fbar(x) - K(x, y)."""
    fb = problem.f_bar
    return float(fb[y] - fb[x] - problem.cost_of(x, y))


@dataclass
class StructureReport:
    triangle_ok: bool
    epsilon_min: float
    trading_ok: bool
    triangle_witnesses: list = field(default_factory=list)
    trading_witnesses: list = field(default_factory=list)
    n_triples: int = 0

    @property
    def witnesses(self) -> list:
        return self.triangle_witnesses + self.trading_witnesses

    def summary(self) -> str:
        eps = "vacuous (no triples)" if self.n_triples == 0 else f"{self.epsilon_min:.6g}"
        return (f"triangle slack epsilon_min = {eps} ({'ok' if self.triangle_ok else 'FAILS'}); "
                f"target composability (trading) {'ok' if self.trading_ok else 'FAILS'}")


def check_structure(problem: ImpulseProblem, max_witnesses: int = 10) -> StructureReport:
    """Scan the cost triangle slack and target composability exhaustively.

    Triangle: for x, y in A(x)\\{x}, z in (A(x) ∩ A(y))\\{y},
    K(x,y) + K(y,z) - K(x,z) >= eps. The z = y triple is left out since it
    has zero slack by K(y,y) = 0 for any cost.
    Trading: A(y) ⊆ A(x) for every y in A(x).
    """
    n = problem.n_states
    indptr, indices, costs = problem.pairs
    src = np.repeat(np.arange(n), np.diff(indptr))
    adj = np.eye(n, dtype=bool)
    adj[src, indices] = True
    K = np.zeros((n, n))
    K[src, indices] = costs
    scale = max(1.0, float(np.abs(costs).max(initial=0.0)))

    # trading: some y in A(x) reaches z outside A(x)
    adj_sp = sp.csr_matrix(adj.astype(np.int64))
    reach = (adj_sp @ adj_sp).toarray() > 0
    bad_x, bad_z = np.nonzero(reach & ~adj)
    trade_wit = []
    for x, z in zip(bad_x[:max_witnesses], bad_z[:max_witnesses]):
        y = int(np.flatnonzero(adj[x] & adj[:, z])[0])
        trade_wit.append(("trading", int(x), y, int(z)))

    min_slack = np.inf
    n_triples = 0
    tri_wit = []
    for x in range(n):
        ys = indices[indptr[x]:indptr[x + 1]]
        if ys.size == 0:
            continue
        valid = adj[ys] & adj[x][None, :]
        valid[np.arange(ys.size), ys] = False
        count = int(valid.sum())
        if count == 0:
            continue
        slack = K[x, ys][:, None] + K[ys] - K[x][None, :]
        slack = np.where(valid, slack, np.inf)
        n_triples += count
        min_slack = min(min_slack, float(slack.min()))
        if len(tri_wit) < max_witnesses:
            for iy, z in zip(*np.nonzero(slack <= 1e-12 * scale)):
                if len(tri_wit) >= max_witnesses:
                    break
                tri_wit.append(("triangle", int(x), int(ys[iy]), int(z), float(slack[iy, z])))
    if n_triples == 0:
        eps = np.inf
    else:
        eps = min_slack if min_slack > 1e-12 * scale else 0.0
    return StructureReport(triangle_ok=bool(eps > 0), epsilon_min=float(eps), trading_ok=bad_x.size == 0,
                           triangle_witnesses=tri_wit, trading_witnesses=trade_wit, n_triples=n_triples)
