"""Growth rate, R0 from growth rate, early-phase profiles and closed forms."""
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epilimits.analytics import (
    BracketError,
    Kernel,
    critical_population_size,
    doubling_time,
    early_phase_profile,
    growth_rate,
    laplace,
    markov_equilibria,
    normalized,
    r0_from_rho,
    sis_quasipotential,
)
from epilimits.laws import (
    ConstantInfectivity,
    CovidProfile,
    Deterministic,
    Empirical,
    Exponential,
    Gamma,
    LatentInfectivity,
    ShiftedBeta,
    Uniform,
    basic_reproduction_number,
)
from epilimits.mesh import TimeMesh
from epilimits.volterra import solve_vi_volterra

BUILTIN = [
    ConstantInfectivity(2.0, Exponential(1.0)),
    ConstantInfectivity(0.7, Exponential(1.0)),
    ConstantInfectivity(1.5, Gamma(3.0, 1.0)),
    ConstantInfectivity(0.2, Gamma(2.0, 1.5)),
    ConstantInfectivity(1.0, Deterministic(2.5)),
    ConstantInfectivity(0.8, Uniform(0.5, 1.5)),
    ConstantInfectivity(0.5, ShiftedBeta(3.0, 1.0)),
    ConstantInfectivity(0.9, Empirical((1.0, 2.0, 3.0), (0.3, 0.3, 0.4))),
    LatentInfectivity(0.4, Gamma(3.0, 1.0), Gamma(5.0, 1.0)),
    CovidProfile(0.5, 0.8),
    CovidProfile(0.5, 0.8, peak=0.4),
]
IDS = [f"{type(law).__name__}-{i}" for i, law in enumerate(BUILTIN)]


def test_growth_rate_exponential_benchmark():
    assert growth_rate(ConstantInfectivity(2.0, Exponential(1.0))) == pytest.approx(1.0, abs=1e-8)
    assert growth_rate(ConstantInfectivity(0.5, Exponential(1.0))) == pytest.approx(-0.5, abs=1e-8)


def test_growth_rate_at_threshold_warns_and_returns_zero():
    with pytest.warns(RuntimeWarning):
        assert growth_rate(ConstantInfectivity(1.0, Exponential(1.0))) == 0.0


def test_bracket_expands_then_fails():
    assert growth_rate(ConstantInfectivity(501.0, Exponential(1.0))) == pytest.approx(500.0, rel=1e-8)
    with pytest.raises(BracketError):
        growth_rate(ConstantInfectivity(5001.0, Exponential(1.0)))


@pytest.mark.parametrize("law", BUILTIN, ids=IDS)
def test_r0_round_trip_for_builtin_laws(law):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rho = growth_rate(law)
    r0 = basic_reproduction_number(law)
    assert r0_from_rho(normalized(law), rho) == pytest.approx(r0, abs=1e-6)


@pytest.mark.property
@pytest.mark.parametrize("law", BUILTIN, ids=IDS)
def test_sign_coherence_with_takeoff(law):
    rho = growth_rate(law)
    r0 = basic_reproduction_number(law)
    i0 = 1e-3
    sol = solve_vi_volterra(law, {"S": 1 - i0, "I": i0}, TimeMesh(80.0, 0.1))
    takeoff = bool(np.any(sol["I"] > 2 * i0))
    assert (rho > 0) == (r0 > 1) == takeoff


def test_covid_growth_rate_against_linearized_doubling():
    law = CovidProfile(0.5, 0.8)
    rho = growth_rate(law)
    mesh = TimeMesh(60.0, 0.05)
    sol = solve_vi_volterra(law, {"I": 0.01}, mesh, linear=True)
    td = doubling_time(rho)
    t0 = 40.0
    a, b = mesh.index(t0), int(round((t0 + td) / mesh.step))
    fitted = math.log(sol["F"][b] / sol["F"][a]) / (mesh.times[b] - mesh.times[a])
    assert fitted == pytest.approx(rho, rel=0.01)


def test_r0_from_rho_basic_cases():
    g = normalized(Exponential(1.0))
    assert r0_from_rho(g, 0.0) == pytest.approx(1.0, abs=1e-12)
    # g = gamma e^{-gamma t}, rho = lam - gamma gives the Markov value lam / gamma
    assert r0_from_rho(normalized(Exponential(2.0)), 3.0 - 2.0) == pytest.approx(1.5, rel=1e-10)


def test_r0_from_rho_needs_a_normalized_profile():
    with pytest.raises(ValueError):
        r0_from_rho(Kernel.from_survival(Exponential(0.5)), 0.3)


def test_laplace_closed_tail_for_negative_rates():
    # int e^{-t} e^{0.5 t} dt = 2
    assert laplace(Exponential(1.0), -0.5) == pytest.approx(2.0, rel=1e-10)
    assert laplace(Exponential(1.0), -1.5) == math.inf


def test_early_phase_exponential():
    prof = early_phase_profile(ConstantInfectivity(2.5, Exponential(1.0)))
    assert prof.rho == pytest.approx(1.5, abs=1e-8)
    assert prof.i == pytest.approx(1 - 1 / 2.5, abs=1e-8)
    assert prof.survival(np.array([0.0]))[0] == pytest.approx(1.0, abs=1e-10)


@pytest.mark.property
def test_early_phase_shares_for_random_laws():
    rng = np.random.default_rng(77)
    for _ in range(5):
        law = ConstantInfectivity(rng.uniform(0.5, 3.0), Gamma(rng.uniform(1.0, 4.0), rng.uniform(0.3, 1.5)))
        prof = early_phase_profile(law)
        assert prof.i + prof.r == pytest.approx(1.0, abs=1e-15)
        assert 0 <= prof.i <= 1
        t = np.linspace(0, 15, 61)
        sf = prof.survival(t)
        assert sf[0] == pytest.approx(1.0, abs=1e-8)
        assert np.all(np.diff(sf) <= 1e-12)
        assert np.all(prof.force(t) >= 0)


def test_early_phase_needs_nonzero_rate():
    with pytest.raises(ValueError):
        early_phase_profile(ConstantInfectivity(2.0, Exponential(1.0)), 0.0)


def test_markov_equilibria():
    assert markov_equilibria("markov-sis", {"lam": 2.0, "gamma": 1.0})["I"] == pytest.approx(0.5)
    assert markov_equilibria("markov-sis", {"lam": 0.9, "gamma": 1.0})["I"] == 0.0
    sirs = markov_equilibria("markov-sirs", {"lam": 2.0, "gamma": 1.0, "rho": 0.5})
    assert (sirs["S"], sirs["I"]) == pytest.approx((0.5, 0.5 * 0.5 / 1.5))
    demo = markov_equilibria("markov-sir-demography", {"lam": 3.0, "gamma": 1.0, "mu": 0.5})
    assert demo["R0"] == pytest.approx(2.0)
    assert (demo["S"], demo["I"]) == pytest.approx((0.5, 1 / 6))


def test_markov_equilibria_are_ode_fixed_points():
    from epilimits.volterra import solve_ode

    for fam, p in (("markov-sirs", {"lam": 2.0, "gamma": 1.0, "rho": 0.5}), ("markov-sir-demography", {"lam": 3.0, "gamma": 1.0, "mu": 0.5})):
        eq = markov_equilibria(fam, p)
        sol = solve_ode(fam, p, {"S": eq["S"], "I": eq["I"], "R": eq["R"]}, TimeMesh(5.0, 0.1))
        assert np.abs(sol["I"] - eq["I"]).max() < 1e-12


def test_critical_population_size_measles():
    nc = critical_population_size(15.0, 52.0, 1 / 75)
    eps = (1 / 75) / (52 + 1 / 75)
    assert eps == pytest.approx(2.563e-4, rel=1e-3)
    assert nc == pytest.approx(9 / (eps**2 * (1 - 1 / 15) ** 2 * 15), rel=1e-12)
    assert 0.95e7 <= nc <= 1.05e7


def test_critical_population_size_decreases_in_r0():
    vals = [critical_population_size(r, 52.0, 1 / 75) for r in np.linspace(2.0, 500.0, 200)]
    assert np.all(np.diff(vals) < 0)
    with pytest.raises(ValueError):
        critical_population_size(1.0, 52.0, 1 / 75)


def test_quasipotential_values():
    assert sis_quasipotential(1.0) == 0.0
    assert sis_quasipotential(2.0) == pytest.approx(math.log(2) - 0.5, abs=1e-15)
    assert sis_quasipotential(2.0) == pytest.approx(0.19315, abs=1e-5)


@given(st.floats(1.0001, 50.0), st.floats(1e-3, 10.0))
@settings(max_examples=200, deadline=None)
def test_quasipotential_increasing(r0, dr):
    assert sis_quasipotential(r0 + dr) > sis_quasipotential(r0)


def test_doubling_time_needs_growth():
    assert doubling_time(math.log(2)) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        doubling_time(-0.1)
