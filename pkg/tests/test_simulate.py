import math

import numpy as np
import pytest

from conftest import discontinuous_problem, random_generator
from impulse_control.chain import Grid, build_diffusion, from_generator
from impulse_control.errors import ContractViolationError, RunawayStrategyError
from impulse_control.problem import AffineCost, AllTargets, ImpulseProblem, TableCost, TableTargets
from impulse_control.simulate import (SimConfig, path_generator, payoff_decomposition_check, simulate,
                                      write_paths_csv)
from impulse_control.solver import solve
from impulse_control.strategy import NO_TARGET, InterventionStrategy, extract, threshold_strategy


def never(problem):
    n = problem.n_states
    return InterventionStrategy(np.zeros(n, bool), np.full(n, NO_TARGET))


def test_config_validation():
    for bad in ({"paths": 0}, {"dt": 0.0}, {"horizon": -1.0}, {"seed": -1},
                {"max_interventions_per_path": 0}):
        with pytest.raises(ValueError):
            SimConfig(**bad)


def test_constant_reward_without_interventions():
    chain = build_diffusion("brownian", {}, Grid(-5, 5, 201), 0.5)
    p = ImpulseProblem(chain, 1.0, AffineCost(fixed=1.0), AllTargets())
    est = simulate(p, never(p), 0.0, SimConfig(paths=50, horizon=50.0))
    assert est.mean == pytest.approx(2 * (1 - math.exp(-25)), abs=1e-9)
    assert est.std_error == pytest.approx(0.0, abs=1e-12)
    assert est.truncation_discount == pytest.approx(math.exp(-25))
    assert est.mean_interventions == 0
    rep = payoff_decomposition_check(p, never(p), 0.0, SimConfig(paths=50, horizon=50.0))
    assert abs(rep.difference) <= 1e-9


def test_bias_bound():
    chain = build_diffusion("brownian", {}, Grid(-2, 2, 41), 0.5)
    p = ImpulseProblem(chain, np.cos(chain.states), AffineCost(0.5, 0.25), AllTargets())
    est = simulate(p, never(p), 0.0, SimConfig(paths=5, horizon=4.0))
    assert est.bias_bound == pytest.approx(math.exp(-2.0) * (1 / 0.5 + 0.25 + 0.5 * 4))


def test_case1_against_threshold_closed_forms(case1):
    # V_b(0) = 1 / (e^b - 1) for the rule "jump to 0 at x >= b", b >= 1 (cost -1)
    p, sol = case1
    cfg = SimConfig(paths=2000, seed=3)
    for b, ref in ((1.0, 1 / (math.e - 1)), (2.0, 1 / (math.e**2 - 1))):
        est = simulate(p, threshold_strategy(p, upper=b, upper_target=0.0), 0.0, cfg)
        assert abs(est.mean - ref) <= 3 * est.std_error + 2e-3


def test_suboptimal_strategy_clearly_worse(case1):
    p, sol = case1
    v0 = sol.v[p.chain.grid.index_of(0.0)]
    est = simulate(p, threshold_strategy(p, upper=2.0, upper_target=0.0), 0.0, SimConfig(paths=2000, seed=4))
    assert est.mean <= v0 + 3 * est.std_error
    assert est.mean <= v0 - 5 * est.std_error


def test_verification_upper_bound(case1):
    p, sol = case1
    i0 = p.chain.grid.index_of(0.0)
    bound = sol.h[i0] + p.f_bar[i0]
    for b in (0.8, 1.0, 1.2):
        est = simulate(p, threshold_strategy(p, upper=b, upper_target=0.0), 0.0, SimConfig(paths=1000, seed=6))
        assert est.mean <= bound + 3 * est.std_error


def test_x_pre_is_the_crossed_region_state(case1):
    p, sol = case1
    s = extract(sol, p)
    est = simulate(p, s, 0.0, SimConfig(paths=50, seed=1, record_paths=True))
    states = p.chain.states
    region_x = set(states[s.region].tolist())
    n = 0
    for rec in est.records:
        taus = [t for t, _, _, _ in rec.interventions]
        assert all(b > a for a, b in zip(taus, taus[1:]))
        for t, pre, post, cost in rec.interventions:
            assert pre in region_x and post == 0.0
            assert cost == pytest.approx(-math.exp(-0.5 * t))
            n += 1
    assert n > 0
    assert [r.payoff for r in est.records] == est.payoffs.tolist()


def test_decomposition_exact_when_f_is_zero(case1):
    p, sol = case1
    rep = payoff_decomposition_check(p, extract(sol, p), 0.0, SimConfig(paths=200, seed=2))
    assert rep.difference == 0.0 and rep.passed


def test_reproducible_and_order_independent():
    chain = build_diffusion("ornstein_uhlenbeck", {"theta": 1.0, "sigma": 0.7}, Grid(-2, 2, 81), 0.4)
    p = ImpulseProblem(chain, np.exp(-chain.states**2), AffineCost(0.1, 0.2), AllTargets())
    s = extract(solve(p), p)
    a = simulate(p, s, 1.0, SimConfig(paths=40, seed=9, horizon=10.0))
    b = simulate(p, s, 1.0, SimConfig(paths=40, seed=9, horizon=10.0))
    c = simulate(p, s, 1.0, SimConfig(paths=20, seed=9, horizon=10.0))
    assert a.payoffs.tobytes() == b.payoffs.tobytes() and a.mean == b.mean
    assert np.array_equal(a.payoffs[:20], c.payoffs)
    assert not np.array_equal(simulate(p, s, 1.0, SimConfig(paths=20, seed=10, horizon=10.0)).payoffs, c.payoffs)


def test_path_streams_are_distinct():
    a = path_generator(1, 0).random(4)
    assert np.array_equal(a, path_generator(1, 0).random(4))
    assert not np.array_equal(a, path_generator(1, 1).random(4))
    assert not np.array_equal(a, path_generator(2, 0).random(4))


def test_contract_violation_for_inadmissible_target(case1_small):
    p, _ = case1_small
    region = np.zeros(p.n_states, bool)
    region[-1] = True
    target = np.full(p.n_states, NO_TARGET)
    target[-1] = 5  # only 0 is admissible
    with pytest.raises(ContractViolationError):
        simulate(p, InterventionStrategy(region, target), 0.0, SimConfig(paths=2))


def test_runaway_strategy_detected():
    chain = build_diffusion("brownian", {}, Grid(-1, 1, 21), 0.5)
    p = ImpulseProblem(chain, 0.0, AffineCost(fixed=0.0), AllTargets())
    region = np.zeros(21, bool)
    region[[9, 10, 11]] = True
    target = np.full(21, NO_TARGET)
    target[9], target[10], target[11] = 10, 11, 9
    with pytest.raises(RunawayStrategyError):
        simulate(p, InterventionStrategy(region, target), 0.0, SimConfig(paths=2, max_interventions_per_path=50))


def test_jump_chain_matches_solved_value():
    rng = np.random.default_rng(12)
    n = 6
    chain = from_generator(random_generator(rng, n, density=0.8) * 2, 0.5)
    f = rng.uniform(0, 1, n)
    K = rng.uniform(0.05, 0.4, (n, n))
    p = ImpulseProblem(chain, f, TableCost(K), AllTargets())
    sol = solve(p)
    s = extract(sol, p)
    assert not s.is_empty
    x0 = float(np.flatnonzero(~s.region)[0])
    cfg = SimConfig(paths=3000, horizon=30.0, seed=3)
    est = simulate(p, s, x0, cfg)
    assert abs(est.mean - sol.v[int(x0)]) <= 3 * est.std_error + est.bias_bound
    rep = payoff_decomposition_check(p, s, x0, cfg, estimate=est)
    assert rep.passed


def test_paths_csv(tmp_path, case1_small):
    p, sol = case1_small
    est = simulate(p, extract(sol, p), 0.0, SimConfig(paths=20, seed=1, record_paths=True))
    out = tmp_path / "paths.csv"
    write_paths_csv(est, out)
    lines = out.read_text().splitlines()
    assert lines[0] == "path,tau,x_pre,x_post,discounted_cost"
    assert len(lines) - 1 == sum(len(r.interventions) for r in est.records)
    with pytest.raises(ValueError):
        write_paths_csv(simulate(p, extract(sol, p), 0.0, SimConfig(paths=2)), out)
