"""Deterministic limit solvers: ODEs, Volterra systems and the waning-immunity fixed point."""
import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from epilimits.analytics import early_phase_profile
from epilimits.laws import (
    ConstantInfectivity,
    CovidProfile,
    Deterministic,
    DeterministicWaning,
    Exponential,
    Gamma,
    InitialImmunity,
    LatentInfectivity,
    Path,
    Uniform,
    step_waning,
    ramp_waning,
)
from epilimits.mesh import TimeMesh
from epilimits.volterra import (
    AgeProfile,
    ConvergenceError,
    IndependentPair,
    NegativeStateError,
    PatchNetwork,
    richardson_ode,
    solve_multipatch_volterra,
    solve_ode,
    solve_seir_volterra,
    solve_sir_volterra,
    solve_vi_volterra,
    solve_vivs_fixed_point,
)

SIR = {"lam": 1.5, "gamma": 1.0}
START = {"S": 0.95, "I": 0.05}


# -- ODEs ----------------------------------------------------------------------


def test_ode_without_infection_decays_exponentially():
    sol = solve_ode("markov-sir", {"lam": 0.0, "gamma": 1.0}, {"S": 0.7, "I": 0.3}, TimeMesh(3.0, 0.1))
    np.testing.assert_allclose(sol["S"], 0.7)
    assert sol.at("I", 1.0) == pytest.approx(0.3 / math.e, rel=1e-6)


def test_sis_ode_reaches_endemic_level():
    sol = solve_ode("markov-sis", {"lam": 2.0, "gamma": 1.0}, {"S": 0.99, "I": 0.01}, TimeMesh(60.0, 0.1))
    assert sol["I"][-1] == pytest.approx(0.5, abs=1e-8)


def test_sir_ode_against_golden(golden):
    g = golden["sir_ode_I5"]
    sol = richardson_ode("markov-sir", SIR, START, TimeMesh(10.0, 0.1))
    assert sol.at("I", 5.0) == pytest.approx(g["value"], abs=1e-9)
    plain = solve_ode("markov-sir", SIR, START, TimeMesh(10.0, 0.05))
    assert plain.at("I", 5.0) == pytest.approx(g["value"], abs=1e-7)


def test_ode_negative_excursion_is_signalled():
    with pytest.raises(NegativeStateError):
        solve_ode("markov-sir", {"lam": 60.0, "gamma": 1.0}, {"S": 0.5, "I": 0.5}, TimeMesh(4.0, 1.0))


@pytest.mark.property
def test_ode_rk4_order():
    ref = richardson_ode("markov-sirs", {"lam": 3.0, "gamma": 1.0, "rho": 0.2}, START, TimeMesh(10.0, 0.0125))["I"][::8]
    errs = [
        np.abs(solve_ode("markov-sirs", {"lam": 3.0, "gamma": 1.0, "rho": 0.2}, START, TimeMesh(10.0, h))["I"][:: int(round(0.1 / h))] - ref).max()
        for h in (0.1, 0.05)
    ]
    assert 3.5 <= math.log2(errs[0] / errs[1]) <= 4.5


@pytest.mark.property
@pytest.mark.parametrize(
    "family,params",
    [
        ("markov-sir", SIR),
        ("markov-sis", {"lam": 2.0, "gamma": 1.0}),
        ("markov-sirs", {"lam": 2.0, "gamma": 1.0, "rho": 0.3}),
        ("markov-sir-demography", {"lam": 3.0, "gamma": 1.0, "mu": 0.5}),
    ],
)
def test_ode_mass_conservation(family, params):
    sol = solve_ode(family, params, START, TimeMesh(20.0, 0.05))
    total = sol["S"] + sol["I"] + sol["R"]
    np.testing.assert_allclose(total, 1.0, atol=1e-8)
    for k in ("S", "I", "R"):
        assert sol[k].min() >= -1e-12 and sol[k].max() <= 1 + 1e-12


@pytest.mark.property
def test_peak_at_herd_immunity_threshold():
    mesh = TimeMesh(20.0, 0.01)
    sol = solve_ode("markov-sir", SIR, START, mesh)
    peak = int(np.argmax(sol["I"]))
    cross = int(np.argmax(1.5 * sol["S"] < 1.0))
    assert abs(peak - cross) <= 1


# -- non-Markov SIR -------------------------------------------------------------


def test_sir_volterra_exponential_is_the_ode():
    mesh = TimeMesh(10.0, 0.01)
    v = solve_sir_volterra(Exponential(1.0), 1.5, START, mesh)
    o = solve_ode("markov-sir", SIR, START, mesh)
    for k in ("S", "I", "R"):
        assert np.abs(v[k] - o[k]).max() < 1e-3


def test_sir_volterra_without_infected_is_constant():
    sol = solve_sir_volterra(Gamma(2.0, 1.0), 2.0, {"S": 0.8, "R": 0.2}, TimeMesh(5.0, 0.05))
    np.testing.assert_allclose(sol["S"], 0.8)
    np.testing.assert_allclose(sol["I"], 0.0)


def test_deterministic_period_satisfies_delay_equation():
    eta, lam, h = 2.0, 2.0, 0.01
    mesh = TimeMesh(8.0, h)
    sol = solve_sir_volterra(Deterministic(eta), lam, {"S": 0.98, "I": 0.02}, mesh, F0=Uniform(0.0, eta))
    t, S, I = mesh.times, sol["S"], sol["I"]
    flux = lam * S * I
    lag = int(round(eta / h))
    rhs = flux.copy()
    rhs[t < eta] -= 0.02 / eta
    rhs[lag:] -= flux[:-lag]
    dI = (I[2:] - I[:-2]) / (2 * h)
    res = np.abs(dI - rhs[1:-1])
    away = np.abs(t[1:-1] - eta) > 1.5 * h
    assert res[away].max() < 1e-3


@pytest.mark.property
def test_sir_volterra_monotone_and_balanced():
    mesh = TimeMesh(15.0, 0.02)
    sol = solve_sir_volterra(Gamma(2.0, 0.5), 2.5, START, mesh)
    assert np.all(np.diff(sol["S"]) <= 1e-15)
    assert np.all(np.diff(sol["R"]) >= -1e-15)
    total = sol["S"] + sol["I"] + sol["R"]
    np.testing.assert_allclose(total, 1.0, atol=1e-8)
    d = np.diff(total) / mesh.step
    assert np.abs(d).max() < 1e-6


@pytest.mark.property
def test_sir_volterra_trapezoid_order():
    F = Gamma(2.0, 0.5)
    ref = solve_sir_volterra(F, 2.5, START, TimeMesh(10.0, 0.0125))
    errs = []
    for h in (0.1, 0.05):
        sol = solve_sir_volterra(F, 2.5, START, TimeMesh(10.0, h))
        k = int(round(h / 0.0125))
        errs.append(max(np.abs(sol[c] - ref[c][::k]).max() for c in ("S", "I", "R")))
    assert 1.7 <= math.log2(errs[0] / errs[1]) <= 2.3


def test_age_profile_initial_condition_matches_f0_form():
    # ages uniform on [0, 3] with exponential periods: remaining periods are again exponential
    mesh = TimeMesh(8.0, 0.01)
    dens = AgeProfile.from_function(lambda x: np.full_like(x, 0.05 / 3.0), 3.0, 0.01)
    a = solve_sir_volterra(Exponential(1.0), 1.5, {"S": 0.95, "I": 0.05}, mesh, age_profile=dens)
    b = solve_sir_volterra(Exponential(1.0), 1.5, START, mesh)
    assert np.abs(a["I"] - b["I"]).max() < 1e-6


# -- varying infectivity --------------------------------------------------------


def test_vi_classical_law_matches_sir_volterra():
    mesh = TimeMesh(10.0, 0.02)
    F = Gamma(3.0, 0.4)
    v = solve_vi_volterra(ConstantInfectivity(1.8, F), START, mesh)
    s = solve_sir_volterra(F, 1.8, START, mesh)
    for k in ("S", "I", "R"):
        assert np.abs(v[k] - s[k]).max() < 1e-6
    np.testing.assert_allclose(v["F"], 1.8 * s["I"], atol=1e-6)


def test_vi_without_new_infectivity_is_explicit():
    mesh = TimeMesh(10.0, 0.001)
    law0 = ConstantInfectivity(1.2, Exponential(0.5))
    sol = solve_vi_volterra(ConstantInfectivity(0.0, Exponential(1.0)), START, mesh, initial_infectivity=law0)
    t = mesh.times
    F = 0.05 * 1.2 * np.exp(-0.5 * t)
    np.testing.assert_allclose(sol["F"], F, atol=1e-12)
    S = 0.95 * np.exp(-0.05 * 1.2 * (1 - np.exp(-0.5 * t)) / 0.5)
    np.testing.assert_allclose(sol["S"], S, atol=1e-7)


@pytest.mark.parametrize(
    "law",
    [ConstantInfectivity(2.0, Exponential(1.0)), CovidProfile(0.5, 0.8), ConstantInfectivity(1.5, Gamma(3.0, 1.0))],
    ids=["exp", "covid", "gamma"],
)
def test_linearized_early_phase_grows_exactly(law):
    prof = early_phase_profile(law)
    mesh = TimeMesh(3.0, 0.005)
    sol = solve_vi_volterra(
        law, {"I": prof.i}, mesh, linear=True, initial_mean=prof.force, initial_survival=prof.survival
    )
    expect = prof.rho * np.exp(prof.rho * mesh.times)
    assert np.max(np.abs(sol["F"] / expect - 1.0)) < 1e-3


@pytest.mark.property
def test_vi_covid_conserves_mass_and_stays_in_range():
    sol = solve_vi_volterra(CovidProfile(), {"S": 0.99, "I": 0.01}, TimeMesh(60.0, 0.1))
    total = sol["S"] + sol["I"] + sol["R"]
    np.testing.assert_allclose(total, 1.0, atol=1e-8)
    for k in ("S", "I", "R"):
        assert sol[k].min() >= -1e-10 and sol[k].max() <= 1 + 1e-10
    assert np.all(np.diff(sol["S"]) <= 1e-15)


# -- SEIR ---------------------------------------------------------------------


def _seir_ode(lam, nu, gamma, init, t):
    def rhs(_, y):
        s, e, i, r = y
        return [-lam * s * i, lam * s * i - nu * e, nu * e - gamma * i, gamma * i]

    y0 = [init.get(k, 0.0) for k in "SEIR"]
    return solve_ivp(rhs, (0, t[-1]), y0, t_eval=t, method="DOP853", rtol=1e-12, atol=1e-14).y


def test_seir_exponential_matches_markov_ode():
    mesh = TimeMesh(20.0, 0.01)
    init = {"S": 0.97, "E": 0.02, "I": 0.01}
    sol = solve_seir_volterra(IndependentPair(Exponential(0.5), Exponential(1.0)), 2.0, init, mesh)
    ref = _seir_ode(2.0, 0.5, 1.0, init, mesh.times)
    for j, k in enumerate("SEIR"):
        assert np.abs(sol[k] - ref[j]).max() < 1e-4


def test_seir_without_exposed_or_infected_is_constant():
    sol = solve_seir_volterra(IndependentPair(Gamma(2.0, 1.0), Exponential(1.0)), 2.0, {"S": 0.6, "R": 0.4}, TimeMesh(5.0, 0.1))
    for k, v in (("S", 0.6), ("E", 0.0), ("I", 0.0), ("R", 0.4)):
        np.testing.assert_allclose(sol[k], v)


def test_seir_deterministic_latency_is_a_shifted_kernel():
    # infectivity lam * 1{d <= t < d + eta}: the force of infection must agree
    d, lam = 1.5, 2.0
    F = Gamma(2.0, 0.5)
    mesh = TimeMesh(15.0, 0.01)
    seir = solve_seir_volterra(IndependentPair(Deterministic(d), F), lam, START, mesh)
    shifted = solve_vi_volterra(
        LatentInfectivity(lam, Deterministic(d), F), START, mesh, initial_infectivity=ConstantInfectivity(lam, F)
    )
    assert np.abs(seir["S"] - shifted["S"]).max() < 1e-4
    assert np.abs(lam * seir["I"] - shifted["F"]).max() < 1e-4


# -- multipatch ---------------------------------------------------------------


def test_single_patch_is_sir_volterra():
    mesh = TimeMesh(10.0, 0.02)
    F = Gamma(2.0, 0.5)
    net = PatchNetwork.build([2.0], [[1.0]])
    mp = solve_multipatch_volterra(net, F, {"S": np.array([0.95]), "I": np.array([0.05])}, mesh)
    sv = solve_sir_volterra(F, 2.0, START, mesh)
    for k in ("S", "I", "R"):
        assert np.abs(mp[k][:, 0] - sv[k]).max() < 1e-10


def test_isolated_patches_evolve_independently():
    mesh = TimeMesh(10.0, 0.02)
    F = Exponential(1.0)
    net = PatchNetwork.build([2.0, 1.5], np.eye(2))
    mp = solve_multipatch_volterra(net, F, {"S": np.array([0.38, 0.57]), "I": np.array([0.02, 0.03])}, mesh)
    for j, (lam, s, i) in enumerate(((2.0, 0.38, 0.02), (1.5, 0.57, 0.03))):
        m = s + i
        single = solve_sir_volterra(F, lam, {"S": s / m, "I": i / m}, mesh)
        assert np.abs(mp["I"][:, j] - m * single["I"]).max() < 1e-10


def test_symmetric_patches_stay_identical():
    mesh = TimeMesh(10.0, 0.05)
    mig = [[0, 0.3], [0.3, 0]]
    net = PatchNetwork.build([1.7, 1.7], [[1.0, 0.4], [0.4, 1.0]], mig, mig, mig, exponent=0.5)
    mp = solve_multipatch_volterra(net, Gamma(2.0, 0.5), {"S": np.array([0.47, 0.47]), "I": np.array([0.03, 0.03])}, mesh)
    for k in ("S", "I", "R"):
        np.testing.assert_allclose(mp[k][:, 0], mp[k][:, 1], atol=1e-14)


def test_asymmetric_network_against_ode_golden(golden):
    g = golden["multipatch_exponential"]
    net = PatchNetwork.build(g["lam"], g["kappa"], g["nu_s"], g["nu_i"], g["nu_r"], g["exponent"])
    mesh = TimeMesh(10.0, 0.01)
    init = {"S": np.array(g["s0"]), "I": np.array(g["i0"]), "R": np.array(g["r0"])}
    sol = solve_multipatch_volterra(net, Exponential(g["gamma"]), init, mesh)
    idx = [mesh.index(t) for t in g["t"]]
    assert np.abs(sol["I"][idx] - np.array(g["I"])).max() < 2e-5
    assert np.abs(sol["S"][idx] - np.array(g["S"])).max() < 2e-5


@pytest.mark.property
def test_multipatch_total_mass_is_one():
    mig = [[0, 0.5, 0.1], [0.2, 0, 0.3], [0.0, 0.4, 0]]
    net = PatchNetwork.build([2.0, 1.0, 1.5], np.full((3, 3), 0.5) + np.eye(3), mig, mig, mig, exponent=0.7)
    mesh = TimeMesh(10.0, 0.05)
    sol = solve_multipatch_volterra(net, Gamma(2.0, 0.5), {"S": np.array([0.3, 0.3, 0.35]), "I": np.array([0.05, 0, 0])}, mesh)
    total = (sol["S"] + sol["I"] + sol["R"]).sum(axis=1)
    np.testing.assert_allclose(total, 1.0, atol=1e-9)


def test_multipatch_rejects_bad_networks():
    with pytest.raises(ValueError):
        PatchNetwork.build([1.0, 1.0], [[1.0, -0.1], [0.0, 1.0]])
    with pytest.raises(ValueError):
        PatchNetwork.build([1.0] * 33, np.eye(33))


# -- varying susceptibility ----------------------------------------------------


def _pure_sir(lam=2.0):
    law = ConstantInfectivity(lam, Gamma(2.0, 0.5))
    return DeterministicWaning(law, Path.zero()), InitialImmunity(0.98, 0.02, 0.0, law, Path.zero())


def test_vivs_pure_sir_reduces_to_vi():
    sus, init = _pure_sir()
    mesh = TimeMesh(10.0, 0.05)
    fp = solve_vivs_fixed_point(sus, init, mesh, method="quadrature")
    vi = solve_vi_volterra(sus.infectivity, {"S": 0.98, "I": 0.02}, mesh)
    np.testing.assert_allclose(fp["Sfrak"], 0.98 * np.exp(-np.concatenate([[0], np.cumsum(0.5 * 0.05 * (fp["F"][1:] + fp["F"][:-1]))])), atol=1e-3)
    assert np.abs(fp["F"] - vi["F"]).max() < 0.01
    assert np.abs(fp["Sfrak"] - vi["S"]).max() < 2e-3


def test_vivs_without_force_keeps_initial_susceptibility():
    law = ConstantInfectivity(2.0, Exponential(1.0))
    g = ramp_waning(1.0, 2.0)
    init = InitialImmunity(0.5, 0.0, 0.5, law, g)
    mesh = TimeMesh(6.0, 0.1)
    sol = solve_vivs_fixed_point(DeterministicWaning(law, g), init, mesh, mc_samples=200, method="panel")
    np.testing.assert_allclose(sol["F"], 0.0)
    np.testing.assert_allclose(sol["Sfrak"], 0.5 + 0.5 * g(mesh.times), atol=1e-12)


@pytest.mark.property
def test_vivs_a_priori_bounds():
    law = ConstantInfectivity(2.5, Gamma(2.0, 0.5))
    g = ramp_waning(0.5, 2.0)
    init = InitialImmunity(0.9, 0.05, 0.05, law, g, recovered_age=Exponential(1.0))
    mesh = TimeMesh(12.0, 0.1)
    sol = solve_vivs_fixed_point(DeterministicWaning(law, g), init, mesh, mc_samples=500, method="panel")
    assert np.all(sol["Sfrak"] <= 1 + 1e-12) and np.all(sol["Sfrak"] >= 0)
    assert np.all(sol["F"] <= np.exp(law.bound * mesh.times) + 1e-12)


def test_vivs_picard_independent_of_start():
    law = ConstantInfectivity(2.0, Gamma(2.0, 0.5))
    g = ramp_waning(0.5, 2.0)
    init = InitialImmunity(0.95, 0.05, 0.0, law, g)
    mesh = TimeMesh(10.0, 0.1)
    a = solve_vivs_fixed_point(DeterministicWaning(law, g), init, mesh, mc_samples=300, start="zero")
    b = solve_vivs_fixed_point(DeterministicWaning(law, g), init, mesh, mc_samples=300, start="bound")
    assert np.abs(a["F"] - b["F"]).max() < 1e-6
    assert np.abs(a["Sfrak"] - b["Sfrak"]).max() < 1e-6


def test_vivs_step_waning_plateau(golden):
    g = golden["waning_step_plateau"]
    law = ConstantInfectivity(g["lam"], Exponential(g["gamma"]))
    wane = step_waning(g["w"])
    init = InitialImmunity(0.95, 0.05, 0.0, law, wane)
    errs = []
    for h in (0.1, 0.05):
        sol = solve_vivs_fixed_point(DeterministicWaning(law, wane), init, TimeMesh(40.0, h), max_iter=500)
        errs.append(sol["I"][-1] - g["I"])
        assert sol["Sfrak"][-1] == pytest.approx(g["S"], abs=1e-3)
    # first-order quadrature route: the error halves with the step
    assert abs(errs[1]) < 3e-3
    assert 0.8 <= math.log2(errs[0] / errs[1]) <= 1.2


def test_vivs_nonconvergence_is_signalled():
    law = ConstantInfectivity(2.0, Gamma(2.0, 0.5))
    init = InitialImmunity(0.95, 0.05, 0.0, law, Path.zero())
    with pytest.raises(ConvergenceError):
        solve_vivs_fixed_point(DeterministicWaning(law, Path.zero()), init, TimeMesh(10.0, 0.1), max_iter=3)


@pytest.mark.property
def test_contact_drop_on_a_node_keeps_second_order():
    F = Exponential(1.0)
    drop = lambda t: np.where(np.asarray(t) < 3.0 - 1e-12, 1.0, 0.4)
    init = {"S": 0.99, "I": 0.01}
    errs, smooth = [], []
    for h in (0.1, 0.05):
        mesh = TimeMesh(10.0, h)
        for c, store in ((drop, errs), (None, smooth)):
            ode = solve_ode("markov-sir", {"lam": 2.0, "gamma": 1.0}, init, mesh, contact=c, substeps=4)
            vol = solve_sir_volterra(F, 2.0, init, mesh, contact=c)
            store.append(max(np.abs(vol[k] - ode[k]).max() for k in ("S", "I", "A")))
        vi = solve_vi_volterra(ConstantInfectivity(2.0, F), init, mesh, contact=drop)
        vol = solve_sir_volterra(F, 2.0, init, mesh, contact=drop)
        np.testing.assert_allclose(vi["I"], vol["I"], atol=1e-10)
    # the jump costs nothing beyond the smooth trapezoid error
    assert errs[0] <= 1.2 * smooth[0]
    assert errs[0] / errs[1] > 3.5
