"""Finite-state Markov chains obtained from one-dimensional diffusions.

The uncontrolled process lives on a uniform grid. Its generator is a sparse
matrix with nonnegative off-diagonals and zero row sums, so everything
downstream (resolvents, superharmonicity, stopping) reduces to linear algebra
on that matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DiscretizationError, InvalidModelError

ABSORBING = "absorbing"
REFLECTING = "reflecting"
BOUNDARY_MODES = (ABSORBING, REFLECTING)

DIFFUSION_KINDS = ("brownian", "geometric_brownian", "ornstein_uhlenbeck", "custom")

# upwind artificial diffusion |mu|*dx/2 may not swamp the physical one by more than this
PECLET_LIMIT = 20.0


@dataclass(frozen=True)
class Grid:
    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 3:
            raise InvalidModelError(f"grid needs n >= 3 points, got {self.n}")
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or self.hi <= self.lo:
            raise InvalidModelError(f"grid needs lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    @property
    def points(self) -> np.ndarray:
        pts = np.linspace(self.lo, self.hi, self.n)
        pts[0], pts[-1] = self.lo, self.hi
        return pts

    def index_of(self, x: float) -> int:
        """Nearest grid index to ``x`` (clamped to the grid)."""
        i = int(round((x - self.lo) / self.spacing))
        return min(max(i, 0), self.n - 1)

    def contains_point(self, x: float, rtol: float = 1e-9) -> bool:
        return abs(self.points[self.index_of(x)] - x) <= rtol * self.spacing


@dataclass(frozen=True)
class DiffusionSpec:
    """Continuous dynamics dX = drift(X) dt + sigma(X) dW behind a chain."""

    kind: str
    drift: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    params: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class MarkovChain:
    """Continuous-time chain with generator matrix and discount rate.

    ``states`` holds the spatial coordinate of every state (NaN for the grave
    state). Product chains built by the switching reduction carry a
    ``regime`` label per state.
    """

    grid: Grid
    generator: sp.csr_matrix
    rate: float
    boundary: tuple = (ABSORBING, ABSORBING)
    grave: Optional[int] = None
    states: Optional[np.ndarray] = None
    regime: Optional[np.ndarray] = None
    process: Optional[DiffusionSpec] = None

    def __post_init__(self):
        if not self.rate > 0:
            raise InvalidModelError(f"discount rate must be positive, got {self.rate}")
        gen = sp.csr_matrix(self.generator, dtype=float)
        off = gen - sp.diags(gen.diagonal())
        if off.nnz and off.data.min() < -1e-12:
            raise InvalidModelError("generator has negative off-diagonal entries")
        off.data = np.clip(off.data, 0.0, None)
        off.eliminate_zeros()
        # rebuild the diagonal so rows sum to zero exactly
        diag = -np.asarray(off.sum(axis=1)).ravel()
        raw_sums = np.asarray(gen.sum(axis=1)).ravel()
        if np.abs(raw_sums).max(initial=0.0) > 1e-10 * max(1.0, np.abs(gen.diagonal()).max(initial=0.0)):
            raise InvalidModelError("generator rows must sum to zero")
        gen = sp.csr_matrix(off + sp.diags(diag))
        gen.sort_indices()
        object.__setattr__(self, "generator", gen)
        n_states = gen.shape[0]
        if gen.shape != (n_states, n_states):
            raise InvalidModelError("generator must be square")
        if self.states is None:
            if n_states != self.grid.n:
                raise InvalidModelError("state coordinates required when the chain is not the bare grid")
            object.__setattr__(self, "states", self.grid.points)
        if len(self.states) != n_states:
            raise InvalidModelError("state coordinate array does not match generator size")
        if self.grave is not None:
            row = gen.getrow(self.grave)
            if row.nnz and np.abs(row.data).max() > 0:
                raise InvalidModelError("grave state must be absorbing")
        for mode in self.boundary:
            if mode not in BOUNDARY_MODES:
                raise InvalidModelError(f"unknown boundary mode {mode!r}")

    @property
    def n_states(self) -> int:
        return self.generator.shape[0]

    @property
    def is_grid_chain(self) -> bool:
        """True when states are exactly the grid points (no grave, no regimes)."""
        return self.n_states == self.grid.n and self.grave is None and self.regime is None

    def dynkin(self, u: np.ndarray) -> np.ndarray:
        """(A - r) u."""
        return self.generator @ u - self.rate * u

    def interior_mask(self) -> np.ndarray:
        """States whose generator row is nonzero (not absorbing, not grave)."""
        gen = self.generator
        return np.diff(gen.indptr) > 0

    def resolvent_matrix(self) -> sp.csc_matrix:
        return sp.csc_matrix(self.rate * sp.identity(self.n_states) - self.generator)

    def dense(self) -> np.ndarray:
        return self.generator.toarray()


def _as_modes(boundary_mode) -> tuple:
    if isinstance(boundary_mode, str):
        return (boundary_mode, boundary_mode)
    modes = tuple(boundary_mode)
    if len(modes) != 2:
        raise InvalidModelError("boundary mode must be one mode or a (lower, upper) pair")
    return modes


def diffusion_spec(kind: str, params: Optional[dict] = None) -> DiffusionSpec:
    params = dict(params or {})
    if kind == "brownian":
        mu = float(params.get("drift", 0.0))
        sig = float(params.get("sigma", 1.0))
        return DiffusionSpec(kind, lambda x: np.full_like(np.asarray(x, float), mu),
                             lambda x: np.full_like(np.asarray(x, float), sig), params)
    if kind == "geometric_brownian":
        mu = float(params.get("drift", 0.0))
        sig = float(params.get("sigma", 1.0))
        return DiffusionSpec(kind, lambda x: mu * np.asarray(x, float),
                             lambda x: sig * np.asarray(x, float), params)
    if kind == "ornstein_uhlenbeck":
        theta = float(params.get("theta", 1.0))
        mean = float(params.get("mean", 0.0))
        sig = float(params.get("sigma", 1.0))
        return DiffusionSpec(kind, lambda x: theta * (mean - np.asarray(x, float)),
                             lambda x: np.full_like(np.asarray(x, float), sig), params)
    if kind == "custom":
        drift, sigma = params.get("drift"), params.get("sigma")
        if not (callable(drift) and callable(sigma)):
            raise InvalidModelError("custom diffusion needs callable 'drift' and 'sigma'")
        return DiffusionSpec(kind, lambda x: np.broadcast_to(drift(np.asarray(x, float)), np.shape(x)).astype(float),
                             lambda x: np.broadcast_to(sigma(np.asarray(x, float)), np.shape(x)).astype(float),
                             params)
    raise InvalidModelError(f"unknown diffusion kind {kind!r}")


def build_diffusion(kind: str, params: Optional[dict], grid: Grid, rate: float,
                    boundary_mode=ABSORBING) -> MarkovChain:
    """Discretize a 1-D diffusion into a birth-death chain on ``grid``.

    The second-order term uses central differences, the drift is upwinded, so
    every off-diagonal rate is nonnegative.

    Raises
    ------
    InvalidModelError
        If sigma^2 is not strictly positive at every grid point.
    DiscretizationError
        If the cell Peclet number |mu| dx / sigma^2 exceeds ``PECLET_LIMIT``.
    """
    spec = diffusion_spec(kind, params)
    modes = _as_modes(boundary_mode)
    x = grid.points
    dx = grid.spacing
    mu = np.asarray(spec.drift(x), float)
    var = np.asarray(spec.sigma(x), float) ** 2
    if not np.all(np.isfinite(var)) or np.any(var <= 0.0):
        bad = x[~(var > 0.0)]
        raise InvalidModelError(f"diffusion coefficient must be positive on the grid; fails at x={bad[:5]}")
    if not np.all(np.isfinite(mu)):
        raise InvalidModelError("drift is not finite on the grid")
    peclet = np.abs(mu) * dx / var
    if peclet.max() > PECLET_LIMIT:
        suggested = float(np.min(PECLET_LIMIT * var / np.maximum(np.abs(mu), 1e-300)))
        raise DiscretizationError(
            f"grid spacing {dx:g} too coarse for the drift (cell Peclet {peclet.max():.3g} > {PECLET_LIMIT}); "
            f"use spacing <= {suggested:.3g}", suggested_spacing=suggested)

    n = grid.n
    up = 0.5 * var / dx**2 + np.maximum(mu, 0.0) / dx
    down = 0.5 * var / dx**2 + np.maximum(-mu, 0.0) / dx
    up[-1] = 0.0
    down[0] = 0.0
    if modes[0] == ABSORBING:
        up[0] = 0.0
    else:
        # outward rate at the lower end folded back onto the inward neighbour
        up[0] += 0.5 * var[0] / dx**2 + max(-mu[0], 0.0) / dx
    if modes[1] == ABSORBING:
        down[-1] = 0.0
    else:
        down[-1] += 0.5 * var[-1] / dx**2 + max(mu[-1], 0.0) / dx
    diag = -(up + down)
    gen = sp.diags([down[1:], diag, up[:-1]], [-1, 0, 1], shape=(n, n), format="csr")
    return MarkovChain(grid=grid, generator=gen, rate=float(rate), boundary=modes, process=spec)


def from_generator(generator, rate: float, grid: Optional[Grid] = None, grave: Optional[int] = None,
                   states: Optional[np.ndarray] = None) -> MarkovChain:
    """Wrap an arbitrary generator matrix; states get nominal coordinates 0..n-1."""
    gen = sp.csr_matrix(generator, dtype=float)
    n = gen.shape[0]
    if grid is None:
        grid = Grid(0.0, float(max(n - 1, 2)), max(n, 3)) if n >= 3 else Grid(0.0, 2.0, 3)
    if states is None:
        states = np.arange(n, dtype=float)
        if grave is not None:
            states[grave] = np.nan
    return MarkovChain(grid=grid, generator=gen, rate=float(rate), grave=grave, states=states)


def with_grave(chain: MarkovChain) -> MarkovChain:
    """Append an absorbing cemetery state as the last index."""
    n = chain.n_states
    gen = sp.bmat([[chain.generator, None], [None, sp.csr_matrix((1, 1))]], format="csr")
    states = np.append(chain.states, np.nan)
    regime = None if chain.regime is None else np.append(chain.regime, -1)
    return MarkovChain(grid=chain.grid, generator=gen, rate=chain.rate, boundary=chain.boundary,
                       grave=n, states=states, regime=regime, process=chain.process)


def resolvent(chain: MarkovChain, f: np.ndarray) -> np.ndarray:
    """Expected discounted running reward: solves (rI - A) fbar = f."""
    f = np.asarray(f, dtype=float)
    if f.shape != (chain.n_states,) or not np.all(np.isfinite(f)):
        raise ValueError("running reward must be a finite array over the chain states")
    return spla.spsolve(chain.resolvent_matrix(), f)


def exit_problem(chain: MarkovChain, target: np.ndarray, running: np.ndarray,
                 terminal: np.ndarray) -> np.ndarray:
    """E_x[ int_0^tau e^{-rs} running ds + e^{-r tau} terminal(X_tau) ], tau = hitting time of ``target``."""
    target = np.asarray(target, dtype=bool)
    B = chain.resolvent_matrix().tocsr()
    keep = sp.diags((~target).astype(float))
    mat = sp.csc_matrix(keep @ B + sp.diags(target.astype(float)))
    rhs = np.where(target, terminal, running).astype(float)
    return spla.spsolve(mat, rhs)


@dataclass(frozen=True)
class FundamentalPair:
    psi: np.ndarray
    phi: np.ndarray


def _tridiagonal_bands(chain: MarkovChain):
    gen = chain.generator
    n = chain.n_states
    if chain.grave is not None or chain.regime is not None:
        raise InvalidModelError("fundamental solutions need a plain grid chain")
    if (sp.triu(gen, 2).nnz + sp.tril(gen, -2).nnz) > 0:
        raise InvalidModelError("fundamental solutions need a birth-death (tridiagonal) generator")
    down = np.zeros(n)
    up = np.zeros(n)
    down[1:] = gen.diagonal(-1)
    up[:-1] = gen.diagonal(1)
    return down, gen.diagonal() - chain.rate, up


def fundamental_solutions(chain: MarkovChain) -> FundamentalPair:
    """Increasing and decreasing positive r-harmonic functions of a diffusion chain.

    Each is generated by the three-term recurrence in its stable direction
    (psi left to right, phi right to left). The single free ratio at the
    starting end is the dominant root of the recurrence with coefficients
    frozen at the first interior row, which imitates a natural boundary.
    Normalized so psi(lo) = phi(hi) = 1.
    """
    a, b, c = _tridiagonal_bands(chain)
    n = chain.n_states
    if np.any(a[1:-1] <= 0) or np.any(c[1:-1] <= 0):
        raise InvalidModelError("interior rows need positive rates to both neighbours")

    psi = np.empty(n)
    i = 1
    rho = (-b[i] + math.sqrt(b[i] ** 2 - 4.0 * a[i] * c[i])) / (2.0 * c[i])
    psi[0], psi[1] = 1.0, rho
    for i in range(1, n - 1):
        psi[i + 1] = -(a[i] * psi[i - 1] + b[i] * psi[i]) / c[i]

    phi = np.empty(n)
    i = n - 2
    sig = (-b[i] + math.sqrt(b[i] ** 2 - 4.0 * a[i] * c[i])) / (2.0 * a[i])
    phi[-1], phi[-2] = 1.0, sig
    for i in range(n - 2, 0, -1):
        phi[i - 1] = -(c[i] * phi[i + 1] + b[i] * phi[i]) / a[i]
    return FundamentalPair(psi=psi, phi=phi)


def expected_discounted_at_fixed_time(chain: MarkovChain, w: np.ndarray, t: float,
                                      atol: float = 1e-8, max_steps: int = 1 << 20) -> np.ndarray:
    """e^{-rt} E_x w(X_t) = e^{-rt} exp(tA) w.

    Implicit Euler with Richardson extrapolation (second order, unconditionally
    positive for the stiff diffusion generator); the step count is doubled until
    two consecutive extrapolated results agree within ``atol``.
    """
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    w = np.asarray(w, dtype=float)
    if t == 0:
        return w.copy()
    gen = sp.csc_matrix(chain.generator)
    eye = sp.identity(chain.n_states, format="csc")

    def implicit_euler(steps):
        lu = spla.splu(sp.csc_matrix(eye - (t / steps) * gen))
        u = w.copy()
        for _ in range(steps):
            u = lu.solve(u)
        return u

    steps = 16
    coarse = implicit_euler(steps)
    fine = implicit_euler(2 * steps)
    previous = 2.0 * fine - coarse
    while True:
        steps *= 2
        if 2 * steps > max_steps:
            raise RuntimeError("time stepping did not reach the requested accuracy")
        coarse, fine = fine, implicit_euler(2 * steps)
        current = 2.0 * fine - coarse
        if np.max(np.abs(current - previous)) <= atol:
            return math.exp(-chain.rate * t) * current
        previous = current
