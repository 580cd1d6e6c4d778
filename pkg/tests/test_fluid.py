import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import fixture_text
from oracles import expm_taylor, sis_equilibrium
from flowcheck.fluid import (
    choose_step,
    ictmc_generator,
    project_simplex,
    solve_fluid,
    solve_forward,
    solve_ictmc,
)
from flowcheck.model import parse_population_model


def sis_variant(**changes):
    doc = json.loads(fixture_text("sis.json"))
    for k, v in changes.items():
        if k in doc["parameters"]:
            doc["parameters"][k] = v
        else:
            doc[k] = v
    return parse_population_model(json.dumps(doc))


def test_equilibrium(sis):
    traj = solve_fluid(sis, 200, 0.01)
    assert traj.values[-1] == pytest.approx(sis_equilibrium(1.2, 1.0), abs=1e-4)


def test_disease_free_fixed_point():
    m = sis_variant(initial={"S": 1000, "I": 0})
    traj = solve_fluid(m, 10, 0.01)
    assert np.all(traj.values == [1.0, 0.0])


def test_conservation_and_start(sis):
    traj = solve_fluid(sis, 20, 0.01)
    assert traj.values[0].tolist() == [0.9, 0.1]
    assert np.abs(traj.values.sum(axis=1) - 1).max() < 1e-9
    assert traj.values.min() >= 0


def test_fourth_order_convergence(sis):
    ends = [solve_fluid(sis, 10, h).values[-1] for h in (0.2, 0.1, 0.05)]
    d1 = np.abs(ends[0] - ends[1]).max()
    d2 = np.abs(ends[1] - ends[2]).max()
    assert d1 / d2 == pytest.approx(16, rel=0.25)


def test_dense_output_hits_grid(sis):
    traj = solve_fluid(sis, 2, 0.01)
    assert traj.at(traj.times[5:10]) == pytest.approx(traj.values[5:10].T, abs=1e-15)
    assert traj.interpolate(0.005)[1] == pytest.approx(0.5 * (traj.values[0, 1] + traj.values[1, 1]))


def test_csv_header_and_digits(sis):
    text = solve_fluid(sis, 0.02, 0.01).to_csv().splitlines()
    assert text[0] == "t,S,I"
    assert len(text) == 4
    assert float(text[1].split(",")[1]) == 0.9


def test_generator_entries(sis):
    Q = ictmc_generator(sis, np.array([0.7, 0.3]))
    assert Q[0, 1] == pytest.approx(1.2 * 0.3)
    assert Q[1, 0] == pytest.approx(1.0)
    assert Q.sum(axis=1) == pytest.approx([0, 0], abs=1e-12)
    assert ictmc_generator(sis, np.array([1.0, 0.0]))[0, 1] == 0.0


@given(st.floats(0, 1))
def test_generator_rows_sum_to_zero(s):
    model = parse_population_model(fixture_text("sis.json"))
    Q = ictmc_generator(model, np.array([s, 1 - s]))
    assert np.abs(Q.sum(axis=1)).max() <= 1e-12
    assert (Q - np.diag(np.diag(Q)) >= 0).all()


def test_exponential_chain(expo):
    pi = solve_ictmc(expo, "S", 1, 0.01)
    assert pi[-1, 1] == pytest.approx(1 - math.exp(-1), abs=1e-4)


def test_absorbing_infected_without_recovery():
    m = sis_variant(k_r=0.0)
    pi = solve_ictmc(m, "I", 5, 0.01)
    assert np.all(pi[:, 1] == 1.0)


def test_ictmc_normalization(sis):
    pi = solve_ictmc(sis, "S", 20, 0.01)
    assert np.abs(pi.sum(axis=1) - 1).max() < 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_forward_constant_generator_matches_expm(seed):
    rng = np.random.default_rng(seed)
    Q = rng.uniform(0, 2, (3, 3))
    np.fill_diagonal(Q, 0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    p0 = np.array([1.0, 0.0, 0.0])
    out = solve_forward(lambda t: Q, p0, 2.0, 0.01)
    assert out[-1] == pytest.approx(p0 @ expm_taylor(2.0 * Q), abs=1e-6)


def test_choose_step_divides_everything():
    h = choose_step(20, None, [Fraction(5), Fraction(15)])
    assert h == Fraction(1, 100)
    h = choose_step(Fraction(7), Fraction(3, 100), [Fraction(7, 3)])
    assert h <= Fraction(3, 100)
    assert (Fraction(7) / h).denominator == 1 and (Fraction(7, 3) / h).denominator == 1
    assert choose_step(1, 0.3) == Fraction(1, 4)


def test_project_simplex():
    x = project_simplex(np.array([-1e-14, 0.5, 0.5 + 1e-14]))
    assert x.min() == 0 and x.sum() == pytest.approx(1)
    y = project_simplex(np.array([0.2, 0.9]))
    assert y.sum() == pytest.approx(1.0)
