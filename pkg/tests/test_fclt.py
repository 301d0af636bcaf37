"""Gaussian drivers, the linear fluctuation system and the Poisson CLT harness."""
import numpy as np
import pytest
from scipy.integrate import solve_ivp

from epilimits.fclt import (
    FactorizationError,
    GaussianDriverSpec,
    driver_covariances,
    poisson_clt_check,
    sample_fluctuations,
    solve_linear_system,
)
from epilimits.laws import ConstantInfectivity, CovidProfile, Deterministic, Exponential, Gamma, LatentInfectivity
from epilimits.mesh import TimeMesh
from epilimits.volterra import LimitSolution, solve_ode, solve_sir_volterra, solve_vi_volterra

LAM, GAM = 1.5, 1.0
INIT = {"S": 0.95, "I": 0.05}


def markov_setup(horizon=5.0, step=0.05):
    mesh = TimeMesh(horizon, step)
    sol = solve_ode("markov-sir", {"lam": LAM, "gamma": GAM}, INIT, mesh)
    return mesh, sol, driver_covariances("markov-sir", sol, {"lam": LAM, "gamma": GAM})


def all_specs():
    mesh = TimeMesh(4.0, 0.1)
    out = []
    _, sol, spec = markov_setup(4.0, 0.1)
    out.append((spec, sol))
    F = Gamma(2.0, 0.5)
    sol = solve_sir_volterra(F, 2.0, INIT, mesh)
    out.append((driver_covariances("nonmarkov-sir", sol, {"lam": 2.0, "F": F, "F0": Deterministic(1.5)}), sol))
    for law in (CovidProfile(), LatentInfectivity(0.6, Gamma(2.0, 0.5), Gamma(3.0, 1.0))):
        sol = solve_vi_volterra(law, INIT, mesh)
        out.append((driver_covariances("varying-infectivity", sol, {"infectivity": law, "panel": 4000, "seed": 3}), sol))
    return out


SPECS = all_specs()
SPEC_IDS = ["markov-sir", "nonmarkov-sir", "vi-covid", "vi-latent"]


def lna_variance(t_eval):
    """Linear noise approximation of the Markov SIR with fixed initial counts."""

    def rhs(t, y):
        S, I = y[:2]
        Sig = y[2:].reshape(2, 2)
        J = np.array([[-LAM * I, -LAM * S], [LAM * I, LAM * S - GAM]])
        G = LAM * S * I * np.array([[1.0, -1.0], [-1.0, 1.0]]) + GAM * I * np.array([[0.0, 0.0], [0.0, 1.0]])
        dS = -LAM * S * I
        return np.concatenate([[dS, -dS - GAM * I], (J @ Sig + Sig @ J.T + G).ravel()])

    y0 = np.concatenate([[INIT["S"], INIT["I"]], np.zeros(4)])
    sol = solve_ivp(rhs, (0.0, t_eval[-1]), y0, t_eval=t_eval, method="DOP853", rtol=1e-11, atol=1e-13)
    return sol.y[2], sol.y[5]


# -- driver covariances ----------------------------------------------------------


def test_martingale_driver_is_brownian_for_constant_intensity():
    mesh = TimeMesh(3.0, 0.1)
    n = mesh.size + 1
    S, I = np.full(n, 0.5), np.full(n, 0.2)
    sol = LimitSolution(mesh, {"S": S, "I": I, "R": 1 - S - I, "F": LAM * I})
    spec = driver_covariances("markov-sir", sol, {"lam": LAM, "gamma": GAM})
    t = mesh.times
    np.testing.assert_allclose(spec.covariance("MA", "MA"), LAM * 0.1 * np.minimum.outer(t, t), atol=1e-14)


def test_classical_law_reduces_to_rate_scaled_kernel():
    mesh = TimeMesh(4.0, 0.05)
    F = Gamma(2.0, 0.6)
    sol = solve_sir_volterra(F, LAM, INIT, mesh)
    spec = driver_covariances("varying-infectivity", sol, {"infectivity": ConstantInfectivity(LAM, F), "panel": 500})
    h, n, t = mesh.step, mesh.size, mesh.times
    s = (np.arange(n) + 0.5) * h
    w = LAM * sol["S"] * sol["I"]
    w = 0.5 * (w[1:] + w[:-1])
    ref = np.zeros((n + 1, n + 1))
    ma = np.zeros((n + 1, n + 1))
    for c in range(n):
        k = LAM * F.sf(t[c + 1:] - s[c])
        ref[c + 1:, c + 1:] += h * w[c] * np.outer(k, k)
        ma[c + 1:, c + 1:] += h * w[c]
    np.testing.assert_allclose(spec.covariance("F2", "F2"), ref, rtol=0, atol=1e-8)
    np.testing.assert_allclose(spec.covariance("MA", "MA"), ma, rtol=0, atol=1e-8)
    sir = driver_covariances("nonmarkov-sir", sol, {"lam": LAM, "F": F})
    np.testing.assert_allclose(spec.covariance("MA", "MA"), sir.covariance("MA", "MA"), atol=1e-12)


def test_initially_infected_driver_vanishes_before_deterministic_period():
    mesh = TimeMesh(4.0, 0.1)
    F = Gamma(2.0, 0.5)
    sol = solve_sir_volterra(F, 2.0, INIT, mesh, F0=Deterministic(2.5))
    spec = driver_covariances("nonmarkov-sir", sol, {"lam": 2.0, "F": F, "F0": Deterministic(2.5)})
    early = mesh.times < 2.5
    c = spec.covariance("I0", "I0")
    # F0c(t v t') - F0c(t) F0c(t') = 1 - 1 before the recovery time
    assert np.all(c[np.ix_(early, early)] == 0.0)
    # a deterministic period leaves no randomness at all
    assert not c.any()
    assert not spec.covariance("I0", "R0").any()


def test_markov_initial_driver_variance():
    mesh, sol, spec = markov_setup()
    t = mesh.times
    sf = np.exp(-GAM * t)
    np.testing.assert_allclose(np.diag(spec.covariance("I0", "I0")), INIT["I"] * sf * (1 - sf), atol=1e-15)
    np.testing.assert_allclose(spec.covariance("I0", "R0"), -spec.covariance("I0", "I0"), atol=0)


@pytest.mark.property
@pytest.mark.parametrize("spec,sol", SPECS, ids=SPEC_IDS)
def test_driver_blocks_are_psd_and_symmetric(spec, sol):
    for b in spec.blocks:
        m = spec.joint(b)
        np.testing.assert_allclose(m, m.T, atol=1e-13)
        assert spec.min_eigenvalue(b) >= -1e-8
        spec.factor(b)


@pytest.mark.property
@pytest.mark.parametrize("spec,sol", SPECS, ids=SPEC_IDS)
def test_cross_block_covariances_are_exact_zeros(spec, sol):
    a, b = spec.blocks
    for x in a:
        for y in b:
            assert not spec.covariance(x, y).any()
            assert (x, y) not in spec.cov and (y, x) not in spec.cov


@pytest.mark.property
def test_cross_block_empirical_correlation():
    mesh, sol, spec = markov_setup(4.0, 0.1)
    n = 10_000
    dr = spec.sample(n, 11)
    j = mesh.index(2.0)
    for x, y in (("I0", "MA"), ("R0", "I1"), ("I0", "R1")):
        r = np.corrcoef(dr[x][:, j], dr[y][:, j])[0, 1]
        assert abs(r) <= 3 / np.sqrt(n)


def test_sampled_drivers_reproduce_their_covariance():
    mesh, sol, spec = markov_setup(4.0, 0.1)
    n = 20_000
    dr = spec.sample(n, 5)
    j, k = mesh.index(1.0), mesh.index(3.0)
    for x, y in (("MA", "MA"), ("MA", "I1"), ("I1", "R1"), ("I0", "R0")):
        target = spec.covariance(x, y)[j, k]
        prod = dr[x][:, j] * dr[y][:, k]
        assert abs(prod.mean() - target) <= 4 * prod.std() / np.sqrt(n)


def test_martingale_force_cross_covariance_two_routes():
    law = CovidProfile()
    mesh = TimeMesh(5.0, 0.05)
    sol = solve_vi_volterra(law, INIT, mesh)
    spec = driver_covariances("varying-infectivity", sol, {"infectivity": law, "panel": 2000})
    t, h, n = mesh.times, mesh.step, mesh.size
    s = (np.arange(n) + 0.5) * h
    dvar = np.diff(np.diag(spec.covariance("MA", "MA")))
    w = sol["S"] * sol["F"]
    w = 0.5 * (w[1:] + w[:-1])
    closed = spec.covariance("MA", "F2")
    for j in range(0, n + 1, 10):
        for k in range(0, n + 1, 10):
            cells = np.arange(min(j, k))
            via_var = np.sum(law.mean(t[k] - s[cells]) * dvar[cells])
            via_rate = h * np.sum(law.mean(t[k] - s[cells]) * w[cells])
            assert closed[j, k] == pytest.approx(via_var, abs=1e-6)
            assert closed[j, k] == pytest.approx(via_rate, abs=1e-6)


def test_factorization_error_reports_eigenvalue():
    mesh = TimeMesh(1.0, 0.5)
    bad = {("A", "A"): np.eye(3), ("B", "B"): np.eye(3), ("A", "B"): 2.0 * np.eye(3)}
    spec = GaussianDriverSpec(mesh, "markov-sir", (("A", "B"),), bad)
    with pytest.raises(FactorizationError) as info:
        spec.check()
    assert info.value.eigenvalue == pytest.approx(-1.0)
    with pytest.raises(FactorizationError):
        spec.factor(("A", "B"))


def test_limit_must_live_on_the_mesh():
    mesh, sol, _ = markov_setup()
    with pytest.raises(ValueError):
        driver_covariances("markov-sir", sol, {"lam": LAM, "gamma": GAM}, TimeMesh(5.0, 0.1))
    with pytest.raises(ValueError):
        driver_covariances("markov-sis", sol, {"lam": LAM, "gamma": GAM})


# -- linear system -----------------------------------------------------------------


@pytest.mark.parametrize("spec,sol", SPECS, ids=SPEC_IDS)
def test_zero_drivers_give_zero_fluctuations(spec, sol):
    n = spec.mesh.size + 1
    zero = {k: np.zeros((3, n)) for k in spec.names}
    out = solve_linear_system(spec, sol, zero)
    for k in "SIRF":
        assert not out[k].any()


@pytest.mark.property
@pytest.mark.parametrize("spec,sol", SPECS, ids=SPEC_IDS)
def test_linearity_in_the_drivers(spec, sol):
    dr = spec.sample(8, 2)
    one = solve_linear_system(spec, sol, dr)
    two = solve_linear_system(spec, sol, {k: 2.0 * v for k, v in dr.items()})
    for k in "SIRF":
        np.testing.assert_allclose(two[k], 2.0 * one[k], rtol=1e-12, atol=1e-14)


def test_fluctuation_mean_is_zero():
    mesh, sol, spec = markov_setup(5.0, 0.1)
    ens = sample_fluctuations(spec, sol, 10_000, 8)
    for k in "SIR":
        assert np.all(np.abs(ens.mean[k]) <= 3 * ens.stderr(k) + 1e-15)


def test_sampling_is_reproducible():
    mesh, sol, spec = markov_setup(2.0, 0.1)
    a = sample_fluctuations(spec, sol, 50, 4)
    b = sample_fluctuations(spec, sol, 50, 4)
    np.testing.assert_array_equal(a.paths["I"], b.paths["I"])
    with pytest.raises(ValueError):
        sample_fluctuations(spec, sol, 0, 4)


def test_markov_variance_matches_linear_noise_approximation():
    mesh, sol, spec = markov_setup(5.0, 0.05)
    n = 40_000
    ens = sample_fluctuations(spec, sol, n, 21)
    idx = [mesh.index(t) for t in (1.0, 2.0, 3.0, 4.0, 5.0)]
    vs, vi = lna_variance(mesh.times[idx])
    for name, ref in (("S", vs), ("I", vi)):
        got = ens.var[name][idx]
        assert np.all(np.abs(got - ref) <= 4 * ref * np.sqrt(2.0 / (n - 1)) + 1e-4 * ref.max())


def test_initial_fluctuation_propagates_deterministically():
    mesh, sol, spec = markov_setup(3.0, 0.05)
    n = spec.mesh.size + 1
    zero = {k: np.zeros((1, n)) for k in spec.names}
    out = solve_linear_system(spec, sol, zero, initial={"S": -0.3, "I": 0.3})
    # small perturbation of the ODE initial condition along the same direction
    eps = 1e-6
    bumped = solve_ode("markov-sir", {"lam": LAM, "gamma": GAM}, {"S": 0.95 - 0.3 * eps, "I": 0.05 + 0.3 * eps}, mesh)
    for k in "SI":
        np.testing.assert_allclose(out[k][0], (bumped[k] - sol[k]) / eps, atol=2e-3)
    np.testing.assert_allclose(out["S"][0] + out["I"][0] + out["R"][0], 0.0, atol=1e-12)


# -- Poisson functional CLT --------------------------------------------------------


def test_poisson_variance_at_one():
    chk = poisson_clt_check(1e4, 2.0, 10_000, 1, step=0.5)
    v = chk.variance
    assert v[0] == 0.0
    j = int(np.argmin(np.abs(chk.t - 1.0)))
    assert v[j] == pytest.approx(1.0, rel=0.05)


def test_poisson_increments_uncorrelated():
    n = 10_000
    chk = poisson_clt_check(1e4, 2.0, n, 2, step=1.0)
    a = chk.paths[:, 1] - chk.paths[:, 0]
    b = chk.paths[:, 2] - chk.paths[:, 1]
    assert abs(np.corrcoef(a, b)[0, 1]) <= 3 / np.sqrt(n)


def test_poisson_harness_validates_input():
    with pytest.raises(ValueError):
        poisson_clt_check(0, 1.0, 10, 0)
    with pytest.raises(ValueError):
        poisson_clt_check(10, 1.0, 1, 0)
