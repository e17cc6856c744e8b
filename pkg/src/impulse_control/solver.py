"""Value function of an impulse control problem on a chain, and its certificates.

The value is computed as the limit of iterated optimal stopping,

    w_0 = fbar,    w_{k+1} = StoppingValue(reward = M w_k, running reward f),

which increases monotonically to the least fixed point. ``h = v - fbar`` is
then checked against the defining constraints of the set H: nonnegative,
r-superharmonic ((A - r) h <= 0 on the chain), and h + fbar >= M(h + fbar).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .chain import MarkovChain, fundamental_solutions
from .errors import ConvergenceError, IllPosedError, InvalidModelError
from .problem import BOTTOM, ImpulseProblem, apply_M, check_structure

log = logging.getLogger(__name__)

DIVERGENCE_GUARD = 1e12
VALUE_ITERATION = "value_iteration"
POLICY_REGIONS = "linear_solve_per_region"


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-9
    max_outer_iters: int = 10_000
    stopping_inner: str = POLICY_REGIONS

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be at least 1")
        if self.stopping_inner not in (VALUE_ITERATION, POLICY_REGIONS):
            raise ValueError(f"unknown inner stopping method {self.stopping_inner!r}")


def superharmonic_tolerance(chain: MarkovChain, u: np.ndarray, tol: float) -> float:
    """Admissible positive part of (A - r) u.

    The generator of a fine grid has entries of size 1/dx^2, so evaluating
    (A - r) u loses about ||A|| * ||u|| * eps to rounding; ``tol`` is
    relative to max(1, ||u||).
    """
    unorm = float(np.max(np.abs(u), initial=0.0))
    anorm = float(np.abs(chain.generator.diagonal()).max(initial=0.0)) * 2.0 + chain.rate
    return tol * max(1.0, unorm) + 64.0 * np.finfo(float).eps * anorm * unorm


# --- ordinary optimal stopping --------------------------------------------

@dataclass
class StoppingResult:
    value: np.ndarray
    stop: np.ndarray
    iterations: int


def _policy_value(B: sp.csr_matrix, stop: np.ndarray, reward: np.ndarray, running: np.ndarray) -> np.ndarray:
    """v = reward on ``stop``, (r - A) v = running elsewhere.

    The stopped states are eliminated rather than kept as identity rows: a
    pivoting LU is only accurate relative to the largest rows (of size
    1 / dx^2), and the error it leaves in the identity rows reappears in the
    neighbouring generator rows.
    """
    v = np.where(stop, reward, 0.0)
    cont = np.flatnonzero(~stop)
    if cont.size:
        Bc = B[cont]
        rhs = running[cont] - Bc[:, stop] @ reward[stop]
        sol = spla.spsolve(sp.csc_matrix(Bc[:, cont]), rhs)
        v[cont] = np.atleast_1d(sol)
    return v


def stopping_policy_iteration(chain: MarkovChain, reward: np.ndarray, running: np.ndarray,
                              initial_stop=None, max_iter=None) -> StoppingResult:
    """Solve min((r - A) v - running, v - reward) = 0 by Howard's policy iteration.

    Each sweep fixes a stopping region, solves v = reward there and
    (r - A) v = running elsewhere, then re-selects the branch attaining the
    min (continuation on ties). Terminates in at most n sweeps.
    States with reward = BOTTOM can never stop.
    """
    B = sp.csr_matrix(chain.rate * sp.identity(chain.n_states) - chain.generator)
    reward = np.asarray(reward, dtype=float)
    running = np.asarray(running, dtype=float)
    can_stop = np.isfinite(reward)
    if initial_stop is None:
        cont_value = spla.spsolve(sp.csc_matrix(B), running)
        stop = can_stop & (reward > cont_value)
    else:
        stop = np.asarray(initial_stop, dtype=bool) & can_stop
    limit = max_iter or chain.n_states + 5
    safe_reward = np.where(can_stop, reward, 0.0)
    b_norm = float(abs(B).sum(axis=1).max())
    for it in range(1, limit + 1):
        v = _policy_value(B, stop, safe_reward, running)
        cont_gap = B @ v - running
        with np.errstate(invalid="ignore"):
            stop_gap = np.where(can_stop, v - safe_reward, np.inf)
        # the active branch holds with equality by construction, so a state
        # switches only when the other branch is violated beyond rounding of
        # size eps * ||r - A|| * ||v||; comparing two noisy gaps can cycle
        noise = 64.0 * np.finfo(float).eps * (b_norm * np.max(np.abs(v)) + np.max(np.abs(running), initial=0.0))
        new_stop = np.where(stop, ~(cont_gap < -noise), stop_gap < -noise)
        if np.array_equal(new_stop, stop):
            return StoppingResult(v, stop, it)
        stop = new_stop
    raise ConvergenceError("policy iteration for the stopping problem did not terminate",
                           last_iterate=v, iterations=limit)


def stopping_value_iteration(chain: MarkovChain, reward: np.ndarray, running: np.ndarray,
                             tol: float = 1e-12, max_iter: int = 10_000_000, v0=None) -> StoppingResult:
    """Optimal stopping by value iteration on the uniformized chain.

    With uniformization rate L = max|A_xx| + r the discrete-time operator
    v -> max(reward, (running + L P v) / (r + L)), P = I + A / L, contracts
    by L / (L + r). Iterates until the a-posteriori error bound is below ``tol``.
    """
    L = float(np.abs(chain.generator.diagonal()).max(initial=0.0)) + chain.rate
    r = chain.rate
    P = sp.csr_matrix(sp.identity(chain.n_states) + chain.generator / L)
    rho = L / (L + r)
    reward = np.asarray(reward, dtype=float)
    running = np.asarray(running, dtype=float)
    v = np.maximum(np.where(np.isfinite(reward), reward, 0.0), 0.0) if v0 is None else np.array(v0, float)
    thresh = tol * (1.0 - rho) / rho
    for it in range(1, max_iter + 1):
        cont = (running + L * (P @ v)) / (r + L)
        new = np.maximum(reward, cont)
        diff = np.max(np.abs(new - v))
        v = new
        if diff <= thresh:
            return StoppingResult(v, reward >= cont, it)
    raise ConvergenceError("value iteration for the stopping problem did not converge",
                           last_iterate=v, iterations=max_iter)


def optimal_stopping(chain: MarkovChain, reward, running=None, method: str = POLICY_REGIONS,
                     **kwargs) -> StoppingResult:
    reward = np.broadcast_to(np.asarray(reward, dtype=float), (chain.n_states,))
    running = np.zeros(chain.n_states) if running is None else np.broadcast_to(
        np.asarray(running, dtype=float), (chain.n_states,))
    if method == POLICY_REGIONS:
        return stopping_policy_iteration(chain, reward, running, **kwargs)
    if method == VALUE_ITERATION:
        return stopping_value_iteration(chain, reward, running, **kwargs)
    raise ValueError(f"unknown stopping method {method!r}")


def _hull_stop_guess(chain: MarkovChain, g: np.ndarray):
    """Contact set of the least concave majorant of g/phi in the coordinate psi/phi.

    On a birth-death chain with absorbing ends this is exactly the stopping
    set of the majorant problem; elsewhere it is only a starting guess.
    Returns None when the fundamental solutions are unavailable or overflow.
    """
    try:
        fp = fundamental_solutions(chain)
    except InvalidModelError:
        return None
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        s = fp.psi / fp.phi
        u = g / fp.phi
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(u)) and np.all(np.diff(s) > 0)):
        return None
    hull = [0]
    for i in range(1, s.size):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            # drop b when it lies on or below the chord from a to i
            if (u[b] - u[a]) * (s[i] - s[a]) <= (u[i] - u[a]) * (s[b] - s[a]):
                hull.pop()
            else:
                break
        hull.append(i)
    stop = np.zeros(s.size, dtype=bool)
    stop[hull] = True
    return stop


def superharmonic_majorant(chain: MarkovChain, g: np.ndarray) -> np.ndarray:
    """Smallest r-superharmonic function dominating ``g`` (stopping with no running reward).

    Policy iteration started from the concave-hull contact set when one is
    available; started from "stop everywhere" it would peel a single state
    off each edge of the stopping set per sweep.
    """
    g = np.asarray(g, dtype=float)
    guess = _hull_stop_guess(chain, g) if np.all(np.isfinite(g)) else None
    return optimal_stopping(chain, g, initial_stop=guess).value


# --- the impulse solver ----------------------------------------------------

@dataclass
class ValueSolution:
    f_bar: np.ndarray
    v: np.ndarray
    h: np.ndarray
    Mv: np.ndarray
    dynkin_residual: np.ndarray
    obstacle_residual: np.ndarray
    iterations: int
    converged: bool
    tol: float
    kinks: np.ndarray
    increments: list = field(default_factory=list)

    @property
    def contact(self) -> np.ndarray:
        return self.obstacle_residual <= math.sqrt(self.tol)


def _residuals(problem: ImpulseProblem, v: np.ndarray):
    f_bar = problem.f_bar
    h = v - f_bar
    Mv = apply_M(problem, v)
    dynkin = problem.chain.dynkin(h)
    with np.errstate(invalid="ignore"):
        obstacle = np.where(np.isfinite(Mv), v - Mv, np.inf)
    return h, Mv, dynkin, obstacle


def kink_points(chain: MarkovChain, contact: np.ndarray) -> np.ndarray:
    """Contact states with a generator neighbour outside the contact set."""
    gen = chain.generator.tocoo()
    kinks = np.zeros(chain.n_states, dtype=bool)
    edge = contact[gen.row] & ~contact[gen.col] & (gen.row != gen.col)
    kinks[gen.row[edge]] = True
    return kinks


def _certified(problem, h, Mv, v, tol) -> bool:
    sh_tol = superharmonic_tolerance(problem.chain, h, tol)
    dyn = problem.chain.dynkin(h)
    scale = max(1.0, float(np.max(np.abs(v))))
    with np.errstate(invalid="ignore"):
        obstacle_ok = np.all(~np.isfinite(Mv) | (v - Mv >= -tol * scale))
    return bool(np.all(h >= -tol * scale) and np.all(dyn <= sh_tol) and obstacle_ok)


def solve(problem: ImpulseProblem, config: SolverConfig = SolverConfig()) -> ValueSolution:
    """Least fixed point of iterated optimal stopping.

    Raises
    ------
    ConvergenceError
        If the iteration does not settle within ``config.max_outer_iters``.
    IllPosedError
        If an iterate exceeds the divergence guard (value not finite).
    """
    chain = problem.chain
    report = check_structure(problem) if problem.n_states <= 600 else None
    if report is not None and not report.triangle_ok:
        log.warning("triangle slack is zero (%s); interventions may pile up", report.summary())

    f_bar = problem.f_bar
    w = f_bar.copy()
    stop = None
    increments = []
    tol = config.tol
    for k in range(1, config.max_outer_iters + 1):
        reward = apply_M(problem, w)
        if config.stopping_inner == POLICY_REGIONS:
            res = stopping_policy_iteration(chain, reward, problem.f, initial_stop=stop)
            stop = res.stop
        else:
            res = stopping_value_iteration(chain, reward, problem.f, tol=tol * 1e-2, v0=w)
        new = res.value
        if not np.all(np.isfinite(new)) or np.max(np.abs(new)) > DIVERGENCE_GUARD:
            raise IllPosedError(
                f"iterate exceeded the divergence guard {DIVERGENCE_GUARD:g} after {k} iterations; "
                "the value function is not finite for this problem")
        delta = new - w
        increments.append((float(delta.max()), float(delta.min())))
        w = new
        if np.max(np.abs(delta)) <= tol:
            h, Mv, dyn, obst = _residuals(problem, w)
            if _certified(problem, h, Mv, w, 10 * tol):
                kinks = kink_points(chain, obst <= math.sqrt(tol))
                return ValueSolution(f_bar=f_bar, v=w, h=h, Mv=Mv, dynkin_residual=dyn,
                                     obstacle_residual=obst, iterations=k, converged=True, tol=tol,
                                     kinks=kinks, increments=increments)
    h, Mv, dyn, obst = _residuals(problem, w)
    raise ConvergenceError(
        f"outer iteration did not converge in {config.max_outer_iters} steps "
        f"(last increment {max(abs(increments[-1][0]), abs(increments[-1][1])):.3g})",
        last_iterate=w, residuals={"h": h, "Mv": Mv, "dynkin": dyn, "obstacle": obst},
        iterations=config.max_outer_iters)


# --- certificates ----------------------------------------------------------

@dataclass
class MembershipReport:
    passed: bool
    min_h: float
    max_dynkin: float
    max_M_violation: float
    worst_nonnegativity: int
    worst_dynkin: int
    worst_M: int
    tol_h: float = 0.0
    tol_dynkin: float = 0.0
    tol_M: float = 0.0

    @property
    def failures(self) -> list:
        out = []
        if self.min_h < -self.tol_h:
            out.append("nonnegativity")
        if self.max_dynkin > self.tol_dynkin:
            out.append("superharmonicity")
        if self.max_M_violation > self.tol_M:
            out.append("M-constraint")
        return out


def certify_membership(problem: ImpulseProblem, h: np.ndarray, tol: float = 1e-8) -> MembershipReport:
    """Check h >= 0, (A - r) h <= 0 and h + fbar >= M(h + fbar), each to ``tol``.

    A passing ``h`` makes h + fbar an upper bound for the value function.
    """
    h = np.asarray(h, dtype=float)
    chain = problem.chain
    w = h + problem.f_bar
    scale = max(1.0, float(np.max(np.abs(w))))
    dyn = chain.dynkin(h)
    Mw = apply_M(problem, w)
    with np.errstate(invalid="ignore"):
        viol = np.where(np.isfinite(Mw), Mw - w, -np.inf)
    tol_h = tol * scale
    tol_dyn = superharmonic_tolerance(chain, h, tol)
    tol_M = tol * scale
    return MembershipReport(
        passed=bool(h.min() >= -tol_h and dyn.max() <= tol_dyn and viol.max() <= tol_M),
        min_h=float(h.min()), max_dynkin=float(dyn.max()), max_M_violation=float(viol.max()),
        worst_nonnegativity=int(np.argmin(h)), worst_dynkin=int(np.argmax(dyn)), worst_M=int(np.argmax(viol)),
        tol_h=tol_h, tol_dynkin=tol_dyn, tol_M=tol_M)


@dataclass
class MinimalityReport:
    passed: bool
    trials: int
    certified: int
    discarded: int
    worst_margin: float
    members: list = field(default_factory=list, repr=False)


def _repair(problem, h, tol, max_rounds):
    for _ in range(max_rounds):
        if certify_membership(problem, h, tol).passed:
            return h
        w = h + problem.f_bar
        Mw = apply_M(problem, w)
        g = np.maximum(h, np.where(np.isfinite(Mw), Mw - problem.f_bar, -np.inf))
        h = superharmonic_majorant(problem.chain, np.maximum(g, 0.0))
    return h if certify_membership(problem, h, tol).passed else None


def random_member_candidate(problem: ImpulseProblem, solution: ValueSolution, rng, basis=None) -> np.ndarray:
    """Random nonnegative superharmonic mixture of h, psi, phi and a constant."""
    h = solution.h
    hscale = max(1.0, float(np.max(np.abs(h))))
    cand = rng.uniform(0.0, 1.2) * np.maximum(h, 0.0)
    if basis is not None:
        psi, phi = basis
        for vec in (psi, phi):
            if rng.random() < 0.6:
                cand = cand + rng.uniform(0.0, 0.5) * hscale * vec / np.max(vec)
    if rng.random() < 0.5:
        cand = cand + rng.uniform(0.0, 0.3) * hscale
    return cand


def _basis(chain):
    try:
        fp = fundamental_solutions(chain)
    except InvalidModelError:
        return None
    ok = True
    for vec in (fp.psi, fp.phi):
        ok &= bool(np.all(chain.dynkin(vec) <= superharmonic_tolerance(chain, vec, 1e-9)))
    return (fp.psi, fp.phi) if ok else None


def minimality_probe(problem: ImpulseProblem, solution: ValueSolution, trials: int, seed: int = 0,
                     tol: float = 1e-9, dominance_tol: float = 1e-6, max_rounds: int = 200,
                     keep_members: bool = False) -> MinimalityReport:
    """Random members of H must dominate ``solution.h``.

    Each trial draws a random superharmonic mixture, lifts it towards the
    M-constraint (h <- smallest superharmonic majorant of max(h, M(h+fbar)-fbar))
    until certified, and compares it pointwise with the solved h. Trial ``t``
    uses the random stream seeded by (seed, t).
    """
    if trials <= 0:
        return MinimalityReport(True, 0, 0, 0, math.inf)
    basis = _basis(problem.chain)
    worst = math.inf
    certified = discarded = 0
    members = []
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        cand = random_member_candidate(problem, solution, rng, basis)
        member = _repair(problem, cand, tol, max_rounds)
        if member is None:
            discarded += 1
            continue
        certified += 1
        worst = min(worst, float(np.min(member - solution.h)))
        if keep_members:
            members.append(member)
    return MinimalityReport(passed=worst >= -dominance_tol, trials=trials, certified=certified,
                            discarded=discarded, worst_margin=worst, members=members)


@dataclass
class ComplementarityReport:
    passed: bool
    worst: float
    worst_index: int
    checked: int


def complementarity_scan(problem: ImpulseProblem, solution: ValueSolution, tol: float = 1e-4) -> ComplementarityReport:
    """At interior non-kink states one of -(A-r)h and v - Mv must vanish."""
    mask = problem.chain.interior_mask() & ~solution.kinks
    comp = np.minimum(-solution.dynkin_residual, solution.obstacle_residual)
    vals = np.abs(comp[mask])
    if vals.size == 0:
        return ComplementarityReport(True, 0.0, -1, 0)
    j = int(np.argmax(vals))
    return ComplementarityReport(bool(vals[j] <= tol), float(vals[j]), int(np.flatnonzero(mask)[j]), int(vals.size))


@dataclass
class ConcavityReport:
    passed: bool
    worst_violation: float
    worst_index: int


def concavity_diagnostic(chain: MarkovChain, h: np.ndarray, slack: float = 1e-6) -> ConcavityReport:
    """h / phi must be concave as a function of psi / phi on consecutive triples.

    On a birth-death chain this is equivalent to (A - r) h <= 0 at interior
    states, since psi and phi span the harmonic functions of each row.
    """
    fp = fundamental_solutions(chain)
    s = fp.psi / fp.phi
    u = np.asarray(h, float) / fp.phi
    interior = np.arange(1, chain.n_states - 1)
    interior = interior[chain.interior_mask()[interior]]
    s0, s1, s2 = s[interior - 1], s[interior], s[interior + 1]
    u0, u1, u2 = u[interior - 1], u[interior], u[interior + 1]
    chord = u0 + (s1 - s0) * (u2 - u0) / (s2 - s0)
    scale = np.maximum(1.0, np.maximum(np.abs(u1), np.abs(chord)))
    gap = (chord - u1) / scale
    if gap.size == 0:
        return ConcavityReport(True, 0.0, -1)
    j = int(np.argmax(gap))
    return ConcavityReport(bool(gap[j] <= slack), float(gap[j]), int(interior[j]))
