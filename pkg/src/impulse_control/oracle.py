"""Closed-form references for standard Brownian motion.

* The discontinuous-cost example: f = 0, A(x) = {0, x}, K(x, 0) = -1 for
  x >= 1 and +1 for x < 1. With beta = sqrt(2r) the solution is one-sided
  when e^beta >= 2 and two-sided otherwise.
* Green kernel and Wiener-Hopf factors of Brownian motion killed at rate r.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import integrate

from .errors import RegimeError


def beta_of(r: float) -> float:
    if not r > 0:
        raise ValueError(f"rate must be positive, got {r}")
    return math.sqrt(2.0 * r)


def regime_of(r: float) -> int:
    """1 for the one-sided regime e^beta >= 2, 2 for the two-sided one.

    The boundary r = (ln 2)^2 / 2 counts as regime 1 even when e^beta rounds
    just below 2.
    """
    e = math.exp(beta_of(r))
    return 1 if e >= 2.0 or math.isclose(e, 2.0, rel_tol=1e-14) else 2


@dataclass(frozen=True)
class Case1Solution:
    r: float
    beta: float
    lam: float

    @property
    def h0(self) -> float:
        return self.lam

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x < 1.0, self.lam * np.exp(self.beta * np.minimum(x, 1.0)), self.lam + 1.0)


@dataclass(frozen=True)
class Case2Solution:
    r: float
    beta: float
    h0: float
    lambda1: float
    lambda2: float
    x_star: float
    residual: float
    iterations: int

    def value(self, x):
        x = np.asarray(x, dtype=float)
        mid = self.lambda1 * np.exp(self.beta * x) + self.lambda2 * np.exp(-self.beta * x)
        return np.where(x <= self.x_star, self.h0 - 1.0, np.where(x >= 1.0, self.h0 + 1.0, mid))

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        b = self.beta
        mid = b * self.lambda1 * np.exp(b * x) - b * self.lambda2 * np.exp(-b * x)
        return np.where((x > self.x_star) & (x < 1.0), mid, 0.0)


def solve_case1(r: float) -> Case1Solution:
    """One-sided regime: h = lam e^{beta x} below 1, lam + 1 from 1 on, lam = 1/(e^beta - 1)."""
    beta = beta_of(r)
    if regime_of(r) != 1:
        raise RegimeError(f"e^beta = {math.exp(beta):.6g} < 2 at r = {r}: two-sided regime, use solve_case2")
    return Case1Solution(r=r, beta=beta, lam=1.0 / (math.exp(beta) - 1.0))


def case2_residuals(params, beta: float) -> np.ndarray:
    h0, l1, l2, xs = params
    ep, em = math.exp(beta * xs), math.exp(-beta * xs)
    with np.errstate(over="ignore", invalid="ignore"):
        # far Newton trials may overflow; the line search rejects non-finite residuals
        return np.array([
            l1 + l2 - h0,
            l1 * math.exp(beta) + l2 * math.exp(-beta) - h0 - 1.0,
            l1 * ep + l2 * em - h0 + 1.0,
            beta * l1 * ep - beta * l2 * em,
        ])


def _case2_jacobian(params, beta):
    h0, l1, l2, xs = params
    ep, em = math.exp(beta * xs), math.exp(-beta * xs)
    return np.array([
        [-1.0, 1.0, 1.0, 0.0],
        [-1.0, math.exp(beta), math.exp(-beta), 0.0],
        [-1.0, ep, em, beta * (l1 * ep - l2 * em)],
        [0.0, beta * ep, -beta * em, beta * beta * (l1 * ep + l2 * em)],
    ])


def _damped_newton(z, beta, tol, max_iter):
    res = case2_residuals(z, beta)
    norm = np.max(np.abs(res))
    for it in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(_case2_jacobian(z, beta), -res)
        except np.linalg.LinAlgError:
            raise ArithmeticError(f"singular Jacobian at {z}") from None
        t = 1.0
        while True:
            trial = z + t * step
            try:
                trial_res = case2_residuals(trial, beta)
                trial_norm = np.max(np.abs(trial_res))
            except OverflowError:
                trial_res, trial_norm = None, math.inf
            if trial_norm < norm:
                break
            if t < 1e-12:
                raise ArithmeticError(f"Newton line search stalled; residuals {res}")
            t *= 0.5
        z, res, norm = trial, trial_res, trial_norm
        if norm <= tol * 1e-2:
            return z, res, norm, it
    raise ArithmeticError(f"Newton did not converge in {max_iter} iterations; residuals {res}")


def solve_case2(r: float, tol: float = 1e-10, max_iter: int = 200) -> Case2Solution:
    """Two-sided regime: damped Newton on the four matching conditions.

    Unknowns (h(0), lambda1, lambda2, x*), starting from (1, 0.5, 0.5, -1) and
    halving the step while the residual norm does not decrease. The system
    also has a root with x* > 0 (q = e^{beta x*} > 1 in the reduced
    quadratic); when Newton lands there or stalls it restarts from x* = -k / beta
    for k = 1, 2, 4, 8, 16.
    """
    beta = beta_of(r)
    if regime_of(r) != 2:
        raise RegimeError(f"e^beta = {math.exp(beta):.6g} >= 2 at r = {r}: one-sided regime, use solve_case1")
    failures = []
    for xs0 in (-1.0,) + tuple(-k / beta for k in (1, 2, 4, 8, 16)):
        try:
            z, res, norm, it = _damped_newton(np.array([1.0, 0.5, 0.5, xs0]), beta, tol, max_iter)
        except ArithmeticError as exc:
            failures.append(f"start x* = {xs0:.3g}: {exc}")
            continue
        if z[3] < 0:
            break
        failures.append(f"start x* = {xs0:.3g}: root with x* = {z[3]:.6g} >= 0")
    else:
        raise ArithmeticError("Newton found no root with x* < 0; " + "; ".join(failures))
    h0, l1, l2, xs = (float(c) for c in z)
    return Case2Solution(r=r, beta=beta, h0=h0, lambda1=l1, lambda2=l2, x_star=xs,
                         residual=float(norm), iterations=it)


def discontinuous_cost_solution(r: float):
    """Whichever of the two regimes applies at rate ``r``."""
    return solve_case1(r) if regime_of(r) == 1 else solve_case2(r)


# --- Green kernel and Wiener-Hopf factors ----------------------------------

def green_kernel(r: float, x, y):
    """G_r(x, y) = e^{-beta|x - y|} / beta for generator (1/2) d^2/dx^2.

    The constant follows from the unit jump of -(1/2) G' across x = y.
    """
    beta = beta_of(r)
    return np.exp(-beta * np.abs(np.asarray(x, float) - np.asarray(y, float))) / beta


@dataclass(frozen=True)
class GreenMeasure:
    """Finitely many atoms of a Radon measure, optionally required to avoid (a, b)."""

    atoms: tuple  # of (location, weight)
    a: Optional[float] = None
    b: Optional[float] = None

    def __post_init__(self):
        for y, w in self.atoms:
            if w < 0:
                raise ValueError("atom weights must be nonnegative")
            if self.a is not None and self.b is not None and self.a < y < self.b:
                raise ValueError(f"atom at {y} lies inside ({self.a}, {self.b})")


def green_superharmonic(measure: GreenMeasure, r: float, x):
    """sum_i G_r(x, y_i) sigma_i, an r-excessive function harmonic off the atoms."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for y, w in measure.atoms:
        out = out + w * green_kernel(r, x, y)
    return out


def wiener_hopf_densities_bm(r: float):
    """Densities of the running max M and min I of Brownian motion at an Exp(r) time."""
    beta = beta_of(r)

    def f_M(t):
        t = np.asarray(t, dtype=float)
        return np.where(t >= 0, beta * np.exp(-beta * np.abs(t)), 0.0)

    def f_I(t):
        t = np.asarray(t, dtype=float)
        return np.where(t <= 0, beta * np.exp(-beta * np.abs(t)), 0.0)

    return f_M, f_I


def wiener_hopf_convolution(r: float, z: float) -> float:
    """r G_r(0, z) rebuilt from the factors by quadrature."""
    f_M, f_I = wiener_hopf_densities_bm(r)
    if z < 0:
        val, _ = integrate.quad(lambda t: float(f_I(t) * f_M(z - t)), -np.inf, z, epsabs=1e-13, epsrel=1e-12)
    else:
        val, _ = integrate.quad(lambda t: float(f_M(t) * f_I(z - t)), z, np.inf, epsabs=1e-13, epsrel=1e-12)
    return val


def sample_max_at_exponential_time(r: float, n: int, rng) -> np.ndarray:
    """Exact draws of sup_{t < T} B_t with T ~ Exp(r) independent of B.

    Uses the joint law of (B_T, max) given T: max = (b + sqrt(b^2 - 2T log U)) / 2.
    """
    T = rng.exponential(1.0 / r, size=n)
    b = rng.standard_normal(n) * np.sqrt(T)
    u = rng.random(n)
    return 0.5 * (b + np.sqrt(b * b - 2.0 * T * np.log1p(-u)))
