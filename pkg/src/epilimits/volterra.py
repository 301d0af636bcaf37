"""Deterministic large-population limits.

ODEs are integrated with classical RK4.  Volterra systems are marched on a
uniform mesh: convolutions use the trapezoid rule, and at each new node the
instantaneous infection flux is resolved by damped fixed-point iteration.

Kernels with jumps (deterministic periods, atoms) are handled with one-sided
values: on a cell [s_k, s_{k+1}] the kernel K(t - s) is evaluated as the left
limit K((t - s_k)-) at the left end and K(t - s_{k+1}) at the right end, which
is exact for a jump sitting on a node.  Contact multipliers with a jump on a
node are treated the same way: the flux carries a left and a right value there.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.linalg import expm

from .laws import (
    DurationLaw,
    InfectivityLaw,
    InitialImmunity,
    SusceptibilityLaw,
    DeterministicWaning,
    SumLaw,
)
from .mesh import TimeMesh

__all__ = [
    "TimeMesh",
    "LimitSolution",
    "AgeProfile",
    "IndependentPair",
    "JointTable",
    "PatchNetwork",
    "ConvergenceError",
    "NegativeStateError",
    "solve_ode",
    "solve_sir_volterra",
    "solve_vi_volterra",
    "solve_seir_volterra",
    "solve_multipatch_volterra",
    "solve_vivs_fixed_point",
    "richardson_ode",
]

FP_TOL = 1e-12
FP_DAMPING = 0.5
FP_MAX_ITER = 100
NEG_TOL = 1e-8
# relative offset used to read one-sided values of contact multipliers at nodes
JUMP_EPS = 1e-9


class ConvergenceError(RuntimeError):
    """An iterative scheme failed to converge."""


class NegativeStateError(RuntimeError):
    """A compartment went negative beyond tolerance."""


@dataclass
class LimitSolution:
    """Grid values of deterministic limit curves.

    Scalar families store 1-d arrays; multipatch solutions store arrays of
    shape (nodes, patches).
    """

    mesh: TimeMesh
    curves: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.curves[name]

    def __contains__(self, name: str) -> bool:
        return name in self.curves

    @property
    def t(self) -> np.ndarray:
        return self.mesh.times

    def at(self, name: str, t: float):
        return self.curves[name][self.mesh.index(t)]


ContactFn = Callable[[np.ndarray], np.ndarray]


def _contact(contact: ContactFn | None, t: np.ndarray) -> np.ndarray:
    return np.ones_like(t) if contact is None else np.asarray(contact(t), dtype=float) * np.ones_like(t)


def _contact_sides(contact: ContactFn | None, t: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Left limits and values of the contact multiplier at the nodes."""
    right = _contact(contact, t)
    if contact is None:
        return right, right
    left = _contact(contact, t - JUMP_EPS * h)
    left[0] = right[0]
    return left, right


# ---------------------------------------------------------------------------
# ODEs

_ODE_STATES = {
    "markov-sir": ("S", "I", "R"),
    "markov-sis": ("S", "I"),
    "markov-sirs": ("S", "I", "R"),
    "markov-sir-demography": ("S", "I", "R"),
    "markov-seir": ("S", "E", "I", "R"),
}
_ODE_PARAMS = {
    "markov-sir": ("lam", "gamma"),
    "markov-sis": ("lam", "gamma"),
    "markov-sirs": ("lam", "gamma", "rho"),
    "markov-sir-demography": ("lam", "gamma", "mu"),
    "markov-seir": ("lam", "gamma", "nu"),
}


def _ode_rhs(family: str, p: Mapping[str, float]) -> Callable[[np.ndarray, float], np.ndarray]:
    lam, gam = p["lam"], p["gamma"]

    if family == "markov-sir":
        def f(y, c):
            inf = c * lam * y[0] * y[1]
            return np.array([-inf, inf - gam * y[1], gam * y[1], inf])
    elif family == "markov-sis":
        def f(y, c):
            inf = c * lam * y[0] * y[1]
            return np.array([-inf + gam * y[1], inf - gam * y[1], inf])
    elif family == "markov-sirs":
        rho = p["rho"]

        def f(y, c):
            inf = c * lam * y[0] * y[1]
            return np.array([-inf + rho * y[2], inf - gam * y[1], gam * y[1] - rho * y[2], inf])
    elif family == "markov-sir-demography":
        mu = p["mu"]

        def f(y, c):
            inf = c * lam * y[0] * y[1]
            return np.array([mu - inf - mu * y[0], inf - (gam + mu) * y[1], gam * y[1] - mu * y[2], inf])
    elif family == "markov-seir":
        nu = p["nu"]

        def f(y, c):
            inf = c * lam * y[0] * y[2]
            return np.array([-inf, inf - nu * y[1], nu * y[1] - gam * y[2], gam * y[2], inf])
    else:
        raise ValueError(f"no ODE for family {family!r}")
    return f


def solve_ode(
    family: str,
    params: Mapping[str, float],
    init: Mapping[str, float],
    mesh: TimeMesh,
    contact: ContactFn | None = None,
    substeps: int = 1,
) -> LimitSolution:
    """RK4 integration of the Markov mean-field ODEs.

    `contact`, if given, multiplies the infection rate at time t.  The
    cumulative infection flux is integrated alongside as the curve ``A``.
    """
    if family not in _ODE_STATES:
        raise ValueError(f"no ODE for family {family!r}")
    missing = [k for k in _ODE_PARAMS[family] if k not in params]
    if missing:
        raise ValueError(f"missing ODE parameters {missing}")
    if any(params[k] < 0 for k in _ODE_PARAMS[family]):
        raise ValueError("ODE rates must be nonnegative")
    names = _ODE_STATES[family]
    y0 = np.array([float(init.get(k, 0.0)) for k in names] + [0.0])
    if family != "markov-sir-demography" and abs(y0[:-1].sum() - 1.0) > 1e-9:
        raise ValueError("initial proportions must sum to 1")
    f = _ode_rhs(family, params)
    t = mesh.times
    h = mesh.step / substeps
    out = np.empty((t.size, y0.size))
    out[0] = y = y0
    now = 0.0
    c = (lambda s: 1.0) if contact is None else (lambda s: float(contact(np.array(s))))
    for n in range(1, t.size):
        for _ in range(substeps):
            # stage times nudged inside the step so node jumps act one-sidedly
            k1 = f(y, c(now + JUMP_EPS * h))
            k2 = f(y + 0.5 * h * k1, c(now + 0.5 * h))
            k3 = f(y + 0.5 * h * k2, c(now + 0.5 * h))
            k4 = f(y + h * k3, c(now + (1.0 - JUMP_EPS) * h))
            y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            now += h
        now = t[n]
        if y[:-1].min() < -NEG_TOL:
            raise NegativeStateError(f"negative state {y[:-1].min():.3g} at t={now:g}; reduce the step")
        out[n] = y
    curves = {k: out[:, i] for i, k in enumerate(names)}
    curves["A"] = out[:, -1]
    for k in ("S", "E", "I", "R"):
        curves.setdefault(k, np.zeros(t.size))
    ct = _contact(contact, t)
    curves["F"] = params["lam"] * ct * curves["I"]
    return LimitSolution(mesh, curves, {"family": family, "method": "rk4"})


def richardson_ode(family: str, params, init, mesh: TimeMesh) -> LimitSolution:
    """RK4 at h/2 and h/4 combined by Richardson extrapolation (order 4)."""
    half = solve_ode(family, params, init, mesh, substeps=2)
    quarter = solve_ode(family, params, init, mesh, substeps=4)
    curves = {k: (16.0 * quarter[k] - half[k]) / 15.0 for k in quarter.curves}
    return LimitSolution(mesh, curves, {"family": family, "method": "rk4-richardson"})


# ---------------------------------------------------------------------------
# Volterra machinery


def _kernel(fn: Callable, fn_left: Callable | None, mesh: TimeMesh, extra: int = 0) -> tuple[np.ndarray, np.ndarray]:
    ages = np.arange(mesh.size + 1 + extra) * mesh.step
    kp = np.asarray(fn(ages), dtype=float)
    km = kp if fn_left is None else np.asarray(fn_left(ages), dtype=float)
    return kp, km


def _conv(kp: np.ndarray, km: np.ndarray, y: np.ndarray, h: float, y_left: np.ndarray | None = None) -> np.ndarray:
    """Trapezoid values of int_0^{t_n} K(t_n - s) y(s) ds at every node.

    `y` is 1-d; `y_left` optionally gives its left limits at the nodes.
    """
    n = y.shape[-1]
    yl = y if y_left is None else y_left
    a = np.convolve(y, km[:n])[:n] - km[0] * y
    b = np.convolve(yl, kp[:n])[:n] - kp[:n] * yl[0]
    out = 0.5 * h * (a + b)
    out[0] = 0.0
    return out


def _fixed_point(g: Callable[[float], float], guess: float, tol: float = FP_TOL, max_iter: int = FP_MAX_ITER) -> float:
    y = guess
    for _ in range(max_iter):
        new = (1.0 - FP_DAMPING) * y + FP_DAMPING * g(y)
        if abs(new - y) <= tol:
            return new
        y = new
    raise ConvergenceError(f"fixed-point iteration did not converge in {max_iter} iterations")


def _march(
    h: float,
    base: np.ndarray,
    kp: np.ndarray,
    km: np.ndarray,
    rate: float,
    s0: float,
    contact,
    linear: bool = False,
    clamp: list | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """March S(t) = s0 - int Y, X = base + K * Y, Y = rate c S X.

    `contact` is an array of node values or a pair (left limits, values).
    Returns (S, X, Y, Y_left).  With `linear`, S is frozen at s0.  If `clamp`
    is a list, S is replaced by its positive part and the indices where that
    mattered are appended to it; otherwise a negative S is an error.
    """
    c_left, c_right = contact if isinstance(contact, tuple) else (contact, contact)
    n = base.size - 1
    S = np.empty(n + 1)
    X = np.empty(n + 1)
    Y = np.empty(n + 1)
    YL = np.empty(n + 1)
    S[0], X[0] = s0, base[0]
    Y[0] = YL[0] = rate * c_right[0] * s0 * base[0]
    half = 0.5 * h
    a = half * kp[0]
    for m in range(1, n + 1):
        known = base[m] + half * (km[m:0:-1] @ Y[:m] + kp[m - 1:0:-1] @ YL[1:m])
        c = rate * c_left[m]
        s_prev, y_prev = S[m - 1], Y[m - 1]
        if linear:
            def g(y):
                return c * s0 * (known + a * y)
        elif clamp is not None:
            def g(y):
                return c * max(s_prev - half * (y_prev + y), 0.0) * (known + a * y)
        else:
            def g(y):
                return c * (s_prev - half * (y_prev + y)) * (known + a * y)
        guess = YL[m - 1] if m < 2 else max(2.0 * YL[m - 1] - YL[m - 2], 0.0)
        y = _fixed_point(g, guess, tol=FP_TOL * max(1.0, abs(guess)))
        YL[m] = y
        S[m] = s0 if linear else s_prev - half * (y_prev + y)
        X[m] = known + a * y
        if S[m] < 0:
            if clamp is None:
                if S[m] < -NEG_TOL:
                    raise NegativeStateError(f"susceptible fraction {S[m]:.3g} at step {m}")
            else:
                clamp.append(m)
            S[m] = 0.0
        Y[m] = y if c_right[m] == c_left[m] else rate * c_right[m] * S[m] * X[m]
    return S, X, Y, YL


@dataclass(frozen=True)
class AgeProfile:
    """Density of infection ages of the initially infected on a uniform grid.

    ``values[j]`` is the density at age ``j * step``; its integral is the
    initially infected fraction.
    """

    values: tuple[float, ...]
    step: float

    def __post_init__(self):
        if any(v < 0 for v in self.values) or not self.values:
            raise ValueError("age density must be nonnegative and nonempty")

    @classmethod
    def from_function(cls, fn: Callable, upper: float, step: float) -> AgeProfile:
        x = np.arange(int(round(upper / step)) + 1) * step
        return cls(tuple(float(v) for v in np.asarray(fn(x), dtype=float)), step)

    @property
    def ages(self) -> np.ndarray:
        return np.arange(len(self.values)) * self.step

    @property
    def density(self) -> np.ndarray:
        return np.asarray(self.values)

    @property
    def upper(self) -> float:
        return (len(self.values) - 1) * self.step

    @property
    def weights(self) -> np.ndarray:
        w = np.full(len(self.values), self.step)
        w[0] = w[-1] = 0.5 * self.step
        if len(w) == 1:
            w[0] = 0.0
        return w

    @property
    def total(self) -> float:
        return float(self.weights @ self.density)

    def transported(self, fn: Callable, survival: Callable, t: np.ndarray) -> np.ndarray:
        """int fn(t + y) / F^c(y) i(0, y) dy at each t (fn is a survival or mean curve)."""
        y = self.ages
        fc = np.asarray(survival(y), dtype=float)
        if np.any((self.density > 0) & (fc <= 0)):
            raise ValueError("age profile puts mass where nobody is still infected")
        coef = self.weights * self.density / np.where(fc > 0, fc, 1.0)
        out = np.empty(t.size)
        for i in range(0, t.size, 512):
            blk = t[i:i + 512, None] + y[None, :]
            out[i:i + 512] = np.asarray(fn(blk), dtype=float) @ coef
        return out

    def to_config(self) -> dict:
        return {"values": list(self.values), "step": self.step}


def _init_fractions(init: Mapping[str, float], keys=("S", "I", "R")) -> dict[str, float]:
    out = {k: float(init.get(k, 0.0)) for k in ("S", "E", "I", "R")}
    if any(v < 0 for v in out.values()):
        raise ValueError("initial fractions must be nonnegative")
    if abs(sum(out.values()) - 1.0) > 1e-9:
        raise ValueError("initial fractions must sum to 1")
    return out


def solve_sir_volterra(
    F: DurationLaw,
    lam: float,
    init: Mapping[str, float],
    mesh: TimeMesh,
    F0: DurationLaw | None = None,
    age_profile: AgeProfile | None = None,
    contact: ContactFn | None = None,
) -> LimitSolution:
    """Non-Markov SIR limit with general infectious-period law F.

    Initially infected individuals either have remaining periods drawn from
    F0 (default F) or infection ages given by `age_profile`.
    """
    if not lam > 0:
        raise ValueError("infection rate must be positive")
    x = _init_fractions(init)
    t = mesh.times
    h = mesh.step
    if age_profile is not None:
        if abs(age_profile.total - x["I"]) > 1e-6:
            raise ValueError("age profile mass differs from the initial infected fraction")
        i_init = age_profile.transported(F.sf, F.sf, t)
    else:
        i_init = x["I"] * (F0 or F).sf(t)
    kp, km = _kernel(F.sf, F.sf_left, mesh)
    c = _contact_sides(contact, t, h)
    S, I, Y, YL = _march(h, i_init, kp, km, lam, x["S"], c)
    R = 1.0 - S - I
    A = np.concatenate([[0.0], np.cumsum(0.5 * h * (YL[1:] + Y[:-1]))])
    curves = {"S": S, "I": I, "R": R, "E": np.zeros_like(S), "F": lam * c[1] * I, "A": A, "Y": Y}
    return LimitSolution(mesh, curves, {"family": "nonmarkov-sir"})


def solve_vi_volterra(
    infectivity: InfectivityLaw,
    init: Mapping[str, float],
    mesh: TimeMesh,
    initial_infectivity: InfectivityLaw | None = None,
    age_profile: AgeProfile | None = None,
    contact: ContactFn | None = None,
    linear: bool = False,
    mean: Callable | None = None,
    initial_mean: Callable | None = None,
    initial_survival: Callable | None = None,
) -> LimitSolution:
    """Varying-infectivity limit: march (S, F), then I and R by quadrature.

    The infectious-period laws are the period laws of the infectivity laws.
    `mean`, `initial_mean` and `initial_survival` override the curves taken
    from the laws (e.g. Monte Carlo means or early-phase profiles).
    With `linear`, S is frozen at 1 and init["I"] is a free amplitude
    (early-phase linearization).
    """
    if linear:
        x = {"S": 1.0, "E": 0.0, "I": float(init.get("I", 0.0)), "R": float(init.get("R", 0.0))}
    else:
        x = _init_fractions(init)
    t = mesh.times
    h = mesh.step
    law0 = initial_infectivity or infectivity
    F = infectivity.period_law
    if mean is None:
        kp, km = _kernel(infectivity.mean, lambda a: infectivity.mean(a, left=True), mesh)
    else:
        kp, km = _kernel(mean, None, mesh)
    if age_profile is not None:
        if abs(age_profile.total - x["I"]) > 1e-6:
            raise ValueError("age profile mass differs from the initial infected fraction")
        base = age_profile.transported(law0.mean, law0.period_law.sf, t)
        i_init = age_profile.transported(law0.period_law.sf, law0.period_law.sf, t)
    else:
        lbar0 = law0.mean(t) if initial_mean is None else np.asarray(initial_mean(t), dtype=float)
        base = x["I"] * lbar0
        sf0 = law0.period_law.sf if initial_survival is None else initial_survival
        i_init = x["I"] * np.asarray(sf0(t), dtype=float)
    c = _contact_sides(contact, t, h)
    S, Fc, Y, YL = _march(h, base, kp, km, 1.0, x["S"], c, linear=linear)
    fp, fm = _kernel(F.sf, F.sf_left, mesh)
    I = i_init + _conv(fp, fm, Y, h, YL)
    A = np.concatenate([[0.0], np.cumsum(0.5 * h * (YL[1:] + Y[:-1]))])
    R = x["R"] + x["I"] + A - I
    curves = {"S": S, "I": I, "R": R, "E": np.zeros_like(S), "F": Fc, "A": A, "Y": Y}
    return LimitSolution(mesh, curves, {"family": "varying-infectivity", "linear": linear})


# ---------------------------------------------------------------------------
# SEIR


@dataclass(frozen=True)
class IndependentPair:
    """Exposed period xi ~ latent and infectious period eta ~ period, independent."""

    latent: DurationLaw
    period: DurationLaw

    @property
    def total(self) -> SumLaw:
        return SumLaw(self.latent, self.period)

    def latent_sf(self, t, left=False):
        return self.latent.sf_left(t) if left else self.latent.sf(t)

    def psi(self, t, left=False):
        """P(xi <= t < xi + eta), or P(xi < t <= xi + eta) for left limits."""
        if left:
            return self.latent.cdf_left(t) - self.total.cdf_left(t)
        return self.latent.cdf(t) - self.total.cdf(t)

    def phi(self, t, left=False):
        return self.total.cdf_left(t) if left else self.total.cdf(t)

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        return self.latent.sample(rng, n), self.period.sample(rng, n)

    def to_config(self) -> dict:
        return {"kind": "independent", "latent": self.latent.to_config(), "period": self.period.to_config()}


@dataclass(frozen=True)
class JointTable:
    """Bivariate empirical law of (xi, eta)."""

    xi: tuple[float, ...]
    eta: tuple[float, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        p = np.asarray(self.probs)
        if not (len(self.xi) == len(self.eta) == len(self.probs)) or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
            raise ValueError("joint table needs matching columns and probabilities summing to 1")

    def _cols(self):
        return np.asarray(self.xi)[None, :], np.asarray(self.eta)[None, :], np.asarray(self.probs)

    def latent_sf(self, t, left=False):
        xi, _, p = self._cols()
        t = np.asarray(t, float)[..., None]
        return ((xi >= t) if left else (xi > t)) @ p

    def psi(self, t, left=False):
        xi, eta, p = self._cols()
        t = np.asarray(t, float)[..., None]
        inside = ((xi < t) & (t <= xi + eta)) if left else ((xi <= t) & (t < xi + eta))
        return inside @ p

    def phi(self, t, left=False):
        xi, eta, p = self._cols()
        t = np.asarray(t, float)[..., None]
        return ((xi + eta < t) if left else (xi + eta <= t)) @ p

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        k = rng.choice(len(self.probs), size=n, p=self.probs)
        return np.asarray(self.xi)[k], np.asarray(self.eta)[k]

    def to_config(self) -> dict:
        return {"kind": "table", "xi": list(self.xi), "eta": list(self.eta), "probs": list(self.probs)}


def solve_seir_volterra(
    joint: IndependentPair | JointTable,
    lam: float,
    init: Mapping[str, float],
    mesh: TimeMesh,
    initial_exposed: IndependentPair | None = None,
    F0: DurationLaw | None = None,
) -> LimitSolution:
    """Non-Markov SEIR limit.

    Initially exposed individuals have (xi0, eta) from `initial_exposed`
    (default: same as `joint`, independent case); initially infectious ones
    have remaining periods from F0.
    """
    x = _init_fractions(init)
    t = mesh.times
    h = mesh.step
    if initial_exposed is None:
        if not isinstance(joint, IndependentPair):
            raise ValueError("a joint table needs an explicit initial_exposed law")
        initial_exposed = joint
    if F0 is None:
        if not isinstance(joint, IndependentPair):
            raise ValueError("a joint table needs an explicit F0")
        F0 = joint.period
    base = x["I"] * F0.sf(t) + x["E"] * initial_exposed.psi(t)
    kp, km = _kernel(joint.psi, lambda a: joint.psi(a, left=True), mesh)
    S, I, Y, _ = _march(h, base, kp, km, lam, x["S"], np.ones_like(t))
    gp, gm = _kernel(joint.latent_sf, lambda a: joint.latent_sf(a, left=True), mesh)
    E = x["E"] * initial_exposed.latent_sf(t) + _conv(gp, gm, Y, h)
    pp, pm = _kernel(joint.phi, lambda a: joint.phi(a, left=True), mesh)
    R = x["R"] + x["I"] * F0.cdf(t) + x["E"] * initial_exposed.phi(t) + _conv(pp, pm, Y, h)
    A = np.concatenate([[0.0], np.cumsum(0.5 * h * (Y[1:] + Y[:-1]))])
    curves = {"S": S, "E": E, "I": I, "R": R, "F": lam * I, "A": A, "Y": Y}
    return LimitSolution(mesh, curves, {"family": "nonmarkov-seir"})


# ---------------------------------------------------------------------------
# multipatch


@dataclass(frozen=True)
class PatchNetwork:
    """Patch-structured SIR parameters.

    Rates ``nu_*[i][j]`` are migration rates from patch i to patch j
    (diagonals ignored); ``kappa[i][j]`` weights infectives of patch j acting
    in patch i; ``exponent`` is the density-dependence power in [0, 1].
    """

    lam: tuple[float, ...]
    kappa: tuple[tuple[float, ...], ...]
    nu_S: tuple[tuple[float, ...], ...]
    nu_I: tuple[tuple[float, ...], ...]
    nu_R: tuple[tuple[float, ...], ...]
    exponent: float = 1.0

    def __post_init__(self):
        L = len(self.lam)
        if L < 1 or L > 32:
            raise ValueError("between 1 and 32 patches are supported")
        for name in ("kappa", "nu_S", "nu_I", "nu_R"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != (L, L):
                raise ValueError(f"{name} must be {L}x{L}")
            if np.any(m < 0):
                raise ValueError(f"{name} entries must be nonnegative")
        if any(v < 0 for v in self.lam) or not 0 <= self.exponent <= 1:
            raise ValueError("invalid infection rates or exponent")

    @classmethod
    def build(cls, lam, kappa, nu_S=None, nu_I=None, nu_R=None, exponent=1.0) -> PatchNetwork:
        L = len(lam)
        z = np.zeros((L, L))

        def tup(m):
            return tuple(tuple(float(v) for v in row) for row in np.asarray(z if m is None else m, dtype=float))

        return cls(tuple(float(v) for v in lam), tup(kappa), tup(nu_S), tup(nu_I), tup(nu_R), float(exponent))

    @property
    def size(self) -> int:
        return len(self.lam)

    @staticmethod
    def generator(rates) -> np.ndarray:
        q = np.array(rates, dtype=float)
        np.fill_diagonal(q, 0.0)
        np.fill_diagonal(q, -q.sum(axis=1))
        return q

    def to_config(self) -> dict:
        return {
            "lam": list(self.lam),
            "kappa": [list(r) for r in self.kappa],
            "nu_S": [list(r) for r in self.nu_S],
            "nu_I": [list(r) for r in self.nu_I],
            "nu_R": [list(r) for r in self.nu_R],
            "exponent": self.exponent,
        }


def solve_multipatch_volterra(
    network: PatchNetwork,
    F: DurationLaw,
    init: Mapping[str, np.ndarray],
    mesh: TimeMesh,
    F0: DurationLaw | None = None,
) -> LimitSolution:
    """Multipatch SIR limit with infected migration tracked through p_{l,i}(t).

    I_i sums, over origin patches, the probability of still being infected
    times the probability of sitting in patch i.  R_i follows from the
    balance R_i = R_i(0) + I_i(0) + A_i - I_i + net migration of I and R,
    which keeps the total mass exactly one.
    """
    F0 = F0 or F
    L = network.size
    S0, I0, R0 = (np.asarray(init.get(k, np.zeros(L)), dtype=float).reshape(L) for k in ("S", "I", "R"))
    if np.any(S0 < 0) or np.any(I0 < 0) or np.any(R0 < 0):
        raise ValueError("initial patch masses must be nonnegative")
    if abs(S0.sum() + I0.sum() + R0.sum() - 1.0) > 1e-9:
        raise ValueError("initial patch masses must sum to 1")
    t = mesh.times
    h = mesh.step
    n = mesh.size
    GI = network.generator(network.nu_I)
    GS = network.generator(network.nu_S)
    GR = network.generator(network.nu_R)
    step = expm(GI * h)
    P = np.empty((n + 1, L, L))
    P[0] = np.eye(L)
    for m in range(1, n + 1):
        P[m] = P[m - 1] @ step
    Fp = F.sf(t)[:, None, None] * P
    Fm = F.sf_left(t)[:, None, None] * P
    I_init = F0.sf(t)[:, None] * np.einsum("l,nli->ni", I0, P)
    lam = np.asarray(network.lam)
    kappa = np.asarray(network.kappa)
    gexp = network.exponent

    def force(s, i, r):
        num = lam * s * (kappa @ i)
        den = (s + i + r) ** gexp
        # 0/0 = 0 when a patch is empty
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)

    S = np.empty((n + 1, L))
    I = np.empty((n + 1, L))
    R = np.empty((n + 1, L))
    Y = np.empty((n + 1, L))
    A = np.zeros((n + 1, L))
    S[0], I[0], R[0] = S0, I_init[0], R0
    Y[0] = force(S0, I[0], R0)
    half = 0.5 * h
    mig_s = np.zeros(L)
    mig_ir = np.zeros(L)
    for m in range(1, n + 1):
        hist = half * (np.einsum("kl,kli->i", Y[:m], Fm[m:0:-1]) + np.einsum("kl,kli->i", Y[1:m], Fp[m - 1:0:-1]))
        known_i = I_init[m] + hist
        a_prev = A[m - 1] + half * Y[m - 1]
        ms = mig_s + half * (S[m - 1] @ GS)
        mir = mig_ir + half * (I[m - 1] @ GI + R[m - 1] @ GR)
        y = Y[m - 1].copy()
        s, r = S[m - 1].copy(), R[m - 1].copy()
        for _ in range(FP_MAX_ITER):
            i = known_i + half * (y @ Fp[0])
            s_new = S0 - a_prev - half * y + ms + half * (s @ GS)
            r_new = R0 + I0 + a_prev + half * y - i + mir + half * (i @ GI + r @ GR)
            y_new = force(s_new, i, r_new)
            old = np.concatenate([y, s, r])
            y = (1 - FP_DAMPING) * y + FP_DAMPING * y_new
            s = (1 - FP_DAMPING) * s + FP_DAMPING * s_new
            r = (1 - FP_DAMPING) * r + FP_DAMPING * r_new
            if np.max(np.abs(np.concatenate([y, s, r]) - old)) <= FP_TOL:
                break
        else:
            raise ConvergenceError("multipatch fixed-point iteration did not converge")
        Y[m] = y
        A[m] = a_prev + half * y
        I[m] = known_i + half * (y @ Fp[0])
        S[m] = S0 - A[m] + ms + half * (s @ GS)
        R[m] = R0 + I0 + A[m] - I[m] + mir + half * (I[m] @ GI + r @ GR)
        mig_s = ms + half * (S[m] @ GS)
        mig_ir = mir + half * (I[m] @ GI + R[m] @ GR)
        low = min(S[m].min(), I[m].min(), R[m].min())
        if low < -NEG_TOL:
            raise NegativeStateError(f"patch mass {low:.3g} at t={t[m]:g}")
    curves = {"S": S, "I": I, "R": R, "E": np.zeros_like(S), "F": lam * (I @ kappa.T), "A": A, "Y": Y, "P": P}
    return LimitSolution(mesh, curves, {"family": "multipatch", "patches": L})


# ---------------------------------------------------------------------------
# varying infectivity and susceptibility


def _cumtrapz_rows(v: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros_like(v)
    out[..., 1:] = np.cumsum(0.5 * h * (v[..., 1:] + v[..., :-1]), axis=-1)
    return out


@dataclass
class _VivsPanel:
    """Pre-drawn susceptibility trajectories on the mesh (common random numbers)."""

    new: np.ndarray  # gamma of newly infected, by age, shape (M, n+1)
    infected0: np.ndarray  # gamma0 of initially infected, by time
    recovered0: np.ndarray  # gamma0 of initially recovered, by time


def _draw_panel(sus: SusceptibilityLaw, initial: InitialImmunity, mesh: TimeMesh, m: int, seed: int) -> _VivsPanel:
    rng_new, rng_inf, rng_rec = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    t = mesh.times
    new = sus.evaluate(rng_new, m, t)
    inf0 = np.stack([initial.infected_pair(rng_inf)[1](t) for _ in range(m)])
    rec0 = np.stack([initial.recovered_susceptibility(rng_rec)(t) for _ in range(m)])
    return _VivsPanel(new, inf0, rec0)


def _panel_expectation(panel: _VivsPanel, initial: InitialImmunity, x: np.ndarray, y: np.ndarray, h: float):
    """Right-hand side of the susceptibility equation and its Monte Carlo standard error."""
    n = y.size - 1
    C = _cumtrapz_rows(y, h)
    parts = [initial.susceptible * np.exp(-C)]
    var = np.zeros(n + 1)
    for frac, g0 in ((initial.infected, panel.infected0), (initial.recovered, panel.recovered0)):
        if frac > 0:
            vals = g0 * np.exp(-_cumtrapz_rows(g0 * y[None, :], h))
            parts.append(frac * vals.mean(axis=0))
            var += frac ** 2 * vals.var(axis=0) / vals.shape[0]
    G = panel.new
    M = G.shape[0]
    flux = x * y
    w = np.full(n + 1, h)
    w[0] = w[-1] = 0.5 * h
    # int_0^t E[...](t, s) x(s) y(s) ds; the s = t node contributes gamma(0) = 0
    total = np.zeros(n + 1)
    sq = np.zeros((M, n + 1))
    acc = np.zeros((M, n + 1))
    for k in range(n):
        if flux[k] == 0.0:
            continue
        ages = n + 1 - k
        g = G[:, :ages]
        H = _cumtrapz_rows(g * y[None, k:], h)
        contrib = g * np.exp(-H)
        # trapezoid weight of node k inside [0, t]: h/2 at the ends, h inside
        wk = np.where(np.arange(k, n + 1) == k, 0.5 * h, h) if k > 0 else np.full(ages, 0.5 * h)
        acc[:, k:] += contrib * (wk * flux[k])[None, :]
    total = acc.mean(axis=0)
    var += acc.var(axis=0) / M
    return sum(parts) + total, np.sqrt(var)


def _quadrature_expectation(waning: DeterministicWaning, initial: InitialImmunity, x, y, mesh: TimeMesh):
    """Same right-hand side when gamma(t) = g(t - eta), by quadrature over the period laws."""
    h = mesh.step
    t = mesh.times
    n = mesh.size
    g = waning.waning
    F = waning.infectivity.period_law
    F0 = initial.infectivity.period_law
    C = _cumtrapz_rows(y, h)
    out = initial.susceptible * np.exp(-C)

    def cell_masses(law: DurationLaw) -> np.ndarray:
        edges = np.concatenate([[0.0], (np.arange(n + 1) + 0.5) * h])
        cdf = law.cdf_left(edges)
        cdf[0] = 0.0
        return np.diff(cdf)

    def after_recovery(rec: np.ndarray) -> np.ndarray:
        # sum_k rec[k] g(t - v_k) exp(-int_{v_k}^t g(r - v_k) y(r) dr)
        res = np.zeros(n + 1)
        gv = g(np.arange(n + 1) * h)
        for k in np.nonzero(rec)[0]:
            ages = n + 1 - k
            H = _cumtrapz_rows(gv[:ages] * y[k:], h)
            res[k:] += rec[k] * gv[:ages] * np.exp(-H)
        return res

    if initial.infected > 0:
        out = out + initial.infected * after_recovery(cell_masses(F0))
    if initial.recovered > 0:
        if initial.recovered_age is None:
            xi, wx = np.zeros(1), np.ones(1)
        else:
            xi, wx = initial.recovered_age.quadrature_nodes()
        vals = g(t[None, :] + xi[:, None])
        H = _cumtrapz_rows(vals * y[None, :], h)
        out = out + initial.recovered * (wx @ (vals * np.exp(-H)))
    flux = x * y
    w = np.full(n + 1, h)
    w[0] = w[-1] = 0.5 * h
    masses = cell_masses(F)
    rec = np.convolve(flux * w, masses)[: n + 1]
    # the trapezoid end weight depends on t; correct the diagonal term to h/2 at s = t
    out = out + after_recovery(rec)
    return out, np.zeros(n + 1)


def solve_vivs_fixed_point(
    susceptibility: SusceptibilityLaw,
    initial: InitialImmunity,
    mesh: TimeMesh,
    mc_samples: int = 1000,
    seed: int = 0,
    method: str = "auto",
    start: str | np.ndarray = "zero",
    tol: float = 1e-8,
    max_iter: int = 200,
) -> LimitSolution:
    """Picard iteration for the pair (susceptibility, force of infection).

    method: "panel" averages over a fixed panel of `mc_samples` drawn
    susceptibility trajectories; "quadrature" uses the deterministic-waning
    closed form; "auto" picks quadrature when available.
    start: "zero", "bound" (lambda* everywhere) or an explicit force curve.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be positive")
    if method == "auto":
        method = "quadrature" if isinstance(susceptibility, DeterministicWaning) else "panel"
    if method == "quadrature" and not isinstance(susceptibility, DeterministicWaning):
        raise ValueError("quadrature needs a deterministic waning law")
    t = mesh.times
    h = mesh.step
    lam_law = susceptibility.infectivity
    kp, km = _kernel(lam_law.mean, lambda a: lam_law.mean(a, left=True), mesh)
    base = initial.infected * initial.infectivity.mean(t)
    bound = max(lam_law.bound, initial.infectivity.bound)
    if isinstance(start, str):
        y = {"zero": np.zeros(t.size), "bound": np.full(t.size, bound)}[start]
    else:
        y = np.asarray(start, dtype=float).copy()
    x = np.ones(t.size)
    panel = _draw_panel(susceptibility, initial, mesh, mc_samples, seed) if method == "panel" else None
    se = np.zeros(t.size)
    for it in range(1, max_iter + 1):
        if panel is not None:
            x_new, se = _panel_expectation(panel, initial, x, y, h)
        else:
            x_new, se = _quadrature_expectation(susceptibility, initial, x, y, mesh)
        y_new = base + _conv(kp, km, x * y, h)
        change = max(np.max(np.abs(x_new - x)), np.max(np.abs(y_new - y)))
        x, y = x_new, y_new
        if change < tol:
            break
    else:
        raise ConvergenceError(f"Picard iteration did not converge in {max_iter} iterations")
    if x.min() < -1e-6 or x.max() > 1 + 1e-6:
        raise NegativeStateError(f"susceptibility left [0, 1]: range [{x.min():.3g}, {x.max():.3g}]")
    F = lam_law.period_law
    F0 = initial.infectivity.period_law
    fp, fm = _kernel(F.sf, F.sf_left, mesh)
    Y = x * y
    I = initial.infected * F0.sf(t) + _conv(fp, fm, Y, h)
    A = _cumtrapz_rows(Y, h)
    curves = {"Sfrak": x, "F": y, "I": I, "S": 1.0 - I, "A": A, "Y": Y, "se": se}
    return LimitSolution(mesh, curves, {"family": "varying-susceptibility", "iterations": it, "method": method})
