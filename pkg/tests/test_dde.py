import json
import math
from fractions import Fraction

import numpy as np
import pytest

from conftest import fixture_text
from oracles import expm_taylor, thinning_limit_agent
from flowcheck.dde import (
    S_OUT,
    RegionGenerator,
    TaggedAgentSystem,
    build_region_generator,
    half_grid,
    integrate_Y,
    region_windows,
    satisfaction_probability,
    sliding_products,
    solve_transient,
    transition_rates,
    window_matrices,
)
from flowcheck.dta import parse_dta
from flowcheck.fluid import solve_fluid
from flowcheck.product import ProductState as P
from flowcheck.product import build_product

LABELS = ("inf", "rec", "pass")


@pytest.fixture(scope="module")
def sis_fluid(sis):
    return solve_fluid(sis, 20, Fraction(1, 100))


@pytest.fixture(scope="module")
def sis_solution(sis, sis_product):
    return solve_transient(sis_product, sis)


def constant_generator(G, n, h, region=1):
    return RegionGenerator(region, tuple(range(len(G))), np.broadcast_to(G, (2 * n + 1,) + G.shape).copy(), h)


def random_generator(rng, size):
    G = rng.uniform(0, 1.5, (size, size))
    np.fill_diagonal(G, 0)
    np.fill_diagonal(G, -G.sum(axis=1))
    return G


def test_region_generator_entries(sis, sis_product, sis_fluid):
    gen = build_region_generator(sis_product, sis, 1, sis_fluid)
    idx = {p: n for n, p in enumerate(gen.states)}
    phi = half_grid(sis_fluid)
    j = 300
    G = gen.G[j]
    assert gen.states[-1] == S_OUT
    assert G[idx[P(1, "S", "q1")], idx[P(1, "I", "q2")]] == pytest.approx(1.2 * phi[j, 1])
    assert G[idx[P(1, "I", "q0")], idx[S_OUT]] == pytest.approx(1.0)
    assert G[idx[P(1, "I", "q2")], idx[S_OUT]] == 0.0
    assert np.abs(G.sum(axis=1)).max() < 1e-12
    assert np.all(gen.G[:, -1] == 0)
    assert np.array_equal(gen(1.5), gen.G[300])
    with pytest.raises(ValueError):
        gen(0.0025)


def test_zero_generator_gives_identity():
    w = window_matrices(constant_generator(np.zeros((3, 3)), 50, 0.1), 1)
    assert np.all(w.Y == np.eye(3))


def test_window_rows_are_distributions(sis, sis_product, sis_fluid):
    for w in region_windows(sis_product, sis, sis_fluid):
        assert np.abs(w.Y.sum(axis=2) - 1).max() < 1e-12
        assert w.Y.min() > -1e-14


@pytest.mark.parametrize("seed", range(4))
def test_window_matches_expm_for_constant_generator(seed):
    rng = np.random.default_rng(seed)
    G = random_generator(rng, 4)
    h = 0.01
    w = window_matrices(constant_generator(G, 300, h), 1)
    assert w.at_grid(50) == pytest.approx(expm_taylor(0.5 * G), abs=1e-8)
    for k in (100, 180, 300):
        assert w.at_grid(k) == pytest.approx(expm_taylor(G), abs=1e-8)
    # midpoints come from interpolation and are accurate to O(h^4)
    assert w.Y[301] == pytest.approx(expm_taylor(G), abs=1e-7)


@pytest.mark.parametrize("m", [1, 2, 3, 5, 8, 13])
def test_sliding_products(m):
    rng = np.random.default_rng(m)
    U = rng.uniform(size=(20, 3, 3))
    W = sliding_products(U, m)
    assert len(W) == 20 - m + 1
    for s in (0, len(W) // 2, len(W) - 1):
        ref = np.eye(3)
        for u in U[s:s + m]:
            ref = ref @ u
        assert W[s] == pytest.approx(ref, rel=1e-12)
    assert len(sliding_products(U, 21)) == 0


def test_literal_window_equation_agrees(sis, sis_product, sis_fluid):
    gen = build_region_generator(sis_product, sis, 1, sis_fluid)
    a = window_matrices(gen, 5)
    b = integrate_Y(gen, 5)
    assert np.abs(a.grid[:1000] - b.grid[:1000]).max() < 1e-10
    assert np.abs(a.grid - b.grid).max() < 1e-6


def test_initial_distribution(sis_solution, sis_product):
    assert sis_solution.P[0, sis_product.index[sis_product.initial]] == 1.0
    assert sis_solution.P[0].sum() == 1.0
    assert sis_solution.satisfaction[0] == 0.0


def test_mass_and_monotonicity(sis_solution):
    assert np.abs(sis_solution.P.sum(axis=1) - 1).max() < 1e-9
    assert sis_solution.P.min() >= 0
    assert np.all(np.diff(sis_solution.satisfaction) >= -1e-12)


def test_running_example_value(sis_solution):
    assert satisfaction_probability(sis_solution) == pytest.approx(0.69860725, abs=1e-6)
    assert satisfaction_probability(sis_solution, t=5) < satisfaction_probability(sis_solution, t=10)
    with pytest.raises(ValueError):
        satisfaction_probability(sis_solution, t=0.005)


def test_window_methods_agree(sis, sis_product, sis_solution):
    alt = solve_transient(sis_product, sis, window_method="dde")
    assert np.abs(alt.satisfaction - sis_solution.satisfaction).max() < 1e-8


def test_initially_final_property(sis):
    doc = {"time_horizon": 3, "states": ["q0"], "initial": "q0", "final": ["q0"], "edges": [],
           "implicit_self_loops": True}
    prod = build_product(sis.agent_class, parse_dta(json.dumps(doc), LABELS), "S")
    sol = solve_transient(prod, sis, h=0.01)
    assert np.abs(sol.satisfaction - 1).max() < 1e-14


def test_untimed_property_is_first_passage(expo, expo_dta):
    prod = build_product(expo.agent_class, expo_dta, "S")
    sol = solve_transient(prod, expo, h=0.01)
    assert satisfaction_probability(sol) == pytest.approx(1 - math.exp(-1), abs=1e-4)
    grid = sol.times
    assert sol.satisfaction == pytest.approx(1 - np.exp(-grid), abs=1e-8)


def test_causality(sis):
    """The answer up to t does not depend on the horizon beyond t."""
    doc = json.loads(fixture_text("sis_property.json"))
    out = []
    for T in (10, 20):
        doc["time_horizon"] = T
        prod = build_product(sis.agent_class, parse_dta(json.dumps(doc), LABELS), "S")
        out.append(solve_transient(prod, sis, h=0.01).satisfaction)
    assert out[0] == pytest.approx(out[1][:len(out[0])], abs=1e-13)


def test_pruning_is_sound(sis, sis_dta, sis_solution):
    full = build_product(sis.agent_class, sis_dta, "S", prune=False)
    sol = solve_transient(full, sis)
    kept = set(sis_solution.states)
    dropped = [n for n, s in enumerate(sol.states) if s not in kept]
    assert dropped
    assert np.abs(sol.P[:, dropped]).max() < 1e-12
    assert sol.satisfaction == pytest.approx(sis_solution.satisfaction, abs=1e-12)


def test_reset_inflow_example(sis, sis_product, sis_fluid):
    system = TaggedAgentSystem(sis_product, sis, sis_fluid, region_windows(sis_product, sis, sis_fluid))
    x = np.zeros(len(sis_product.states))
    x[sis_product.index[P(1, "I", "q0")]] = 0.3
    x[sis_product.index[P(2, "I", "q0")]] = 0.2
    x[sis_product.index[P(1, "I", "q2")]] = 0.5
    inflow = system.reset_inflow(x, 10)
    region1 = sis_product.region_states(1)
    expect = np.zeros(len(region1))
    expect[region1.index(P(1, "S", "q1"))] = 1.0 * 0.5
    assert inflow == pytest.approx(expect)


def test_delayed_flux_conserves_mass(sis, sis_product, sis_fluid):
    windows = region_windows(sis_product, sis, sis_fluid)
    system = TaggedAgentSystem(sis_product, sis, sis_fluid, windows)
    x0 = np.zeros(len(sis_product.states))
    x0[sis_product.index[sis_product.initial]] = 1.0
    sol = system.solve(x0)
    seen = 0.0
    for j in range(0, 2000, 97):
        F = system.delayed_flux(j, sol.flux)
        assert np.abs(F.sum(axis=1)).max() < 1e-15
        seen += np.abs(F).sum()
    assert seen > 0


def test_single_jump_moves_initial_cohort(sis_solution):
    ((t, delta),) = sis_solution.jumps
    assert t == pytest.approx(5.0)
    assert abs(delta.sum()) < 1e-15
    k = 500
    assert sis_solution.P[k] - sis_solution.left[k - 1] == pytest.approx(delta, abs=1e-15)


def first_match_step(edges):
    """DTA transition function read straight off a list of (q, label, lo, hi, reset, target)."""
    def step(q, eta, label):
        for src, lab, lo, hi, reset, tgt in edges:
            if src == q and lab == label and lo < eta <= hi or (src == q and lab == label and lo == 0 and eta == 0):
                return tgt, reset
        return q, False
    return step


def limit_agent_frequency(model, edges, final, T, runs, seed):
    fluid = solve_fluid(model, T, Fraction(1, 100))
    label_rates = lambda t: model.label_rates(fluid.interpolate(t))  # noqa: E731
    bound = 1.2 + 1.0 + 1e-9
    return thinning_limit_agent(label_rates, model.agent_class.transitions, "S", first_match_step(edges),
                                "q0", final, T, bound, runs, seed)


@pytest.mark.slow
def test_running_example_against_simulated_limit_agent(sis, sis_solution):
    edges = [("q0", "rec", -1, math.inf, True, "q1"),
             ("q1", "inf", -1, 5, False, "q2"),
             ("q1", "inf", 5, math.inf, False, "q0")]
    runs = 8000
    p = limit_agent_frequency(sis, edges, {"q2"}, 20, runs, seed=3)
    ci = 1.96 * math.sqrt(p * (1 - p) / runs)
    assert abs(p - satisfaction_probability(sis_solution)) < 1.5 * ci


@pytest.mark.slow
def test_two_clock_events_against_simulated_limit_agent(sis):
    doc = json.loads(fixture_text("sis_property.json"))
    doc["time_horizon"] = 10
    doc["edges"] = [
        {"from": "q0", "label": "rec", "guard": "true", "reset": True, "to": "q1"},
        {"from": "q1", "label": "inf", "guard": "c<=2", "to": "q0"},
        {"from": "q1", "label": "inf", "guard": "c>2 & c<=4", "to": "q2"},
        {"from": "q1", "label": "inf", "guard": "c>4", "to": "q0"},
    ]
    prod = build_product(sis.agent_class, parse_dta(json.dumps(doc), LABELS), "S")
    assert prod.k == 2
    sol = solve_transient(prod, sis, h=0.01)
    edges = [("q0", "rec", -1, math.inf, True, "q1"),
             ("q1", "inf", -1, 2, False, "q0"),
             ("q1", "inf", 2, 4, False, "q2"),
             ("q1", "inf", 4, math.inf, False, "q0")]
    runs = 8000
    p = limit_agent_frequency(sis, edges, {"q2"}, 10, runs, seed=5)
    ci = 1.96 * math.sqrt(max(p * (1 - p), 1e-4) / runs)
    assert abs(p - satisfaction_probability(sol)) < 1.5 * ci
    assert np.abs(sol.P.sum(axis=1) - 1).max() < 1e-9
    assert len(sol.jumps) == 2


def test_transition_rates_layout(sis, sis_product, sis_fluid):
    rates = transition_rates(sis_product, sis, half_grid(sis_fluid))
    assert rates.shape == (4001, len(sis_product.transitions))
    assert rates.min() >= 0
