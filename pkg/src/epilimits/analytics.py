"""Closed-form and root-finding quantities: R0, growth rate, early-phase profile, equilibria."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Mapping

import numpy as np
from scipy import stats

from .laws import (
    TAIL_CAP,
    TAIL_TOL,
    ConstantInfectivity,
    DurationLaw,
    Exponential,
    Gamma,
    InfectivityLaw,
    gauss_legendre_panels,
    truncation_horizon,
)

__all__ = [
    "Kernel",
    "EarlyPhaseProfile",
    "BracketError",
    "laplace",
    "growth_rate",
    "r0_from_rho",
    "normalized",
    "early_phase_profile",
    "markov_equilibria",
    "critical_population_size",
    "sis_quasipotential",
    "doubling_time",
]

BRACKET = 10.0
BRACKET_CAP = 1e3
PANELS = 4000
ORDER = 8


class BracketError(RuntimeError):
    """The growth-rate equation could not be bracketed."""


def _sf_tail(law: DurationLaw) -> Callable[[float, float], float] | None:
    """Closed form of int_H^inf F^c(t) e^{-rho t} dt, when one is available."""
    if isinstance(law, Exponential):
        g = law.rate

        def tail(H, rho):
            if g + rho <= 0:
                return math.inf
            return math.exp(-(g + rho) * H) / (g + rho)

        return tail
    if isinstance(law, Gamma):
        k, th = law.shape, law.scale

        def tail(H, rho):
            if 1.0 + rho * th <= 0:
                return math.inf
            if rho == 0:
                return k * th * stats.gamma.sf(H, k + 1, scale=th) - H * stats.gamma.sf(H, k, scale=th)
            # integrate by parts, then shift the gamma scale
            shifted = (1.0 + rho * th) ** (-k) * stats.gamma.sf(H, k, scale=th / (1.0 + rho * th))
            return (stats.gamma.sf(H, k, scale=th) * math.exp(-rho * H) - shifted) / rho

        return tail
    return None


@dataclass(frozen=True, eq=False)
class Kernel:
    """A nonnegative curve on [0, inf) prepared for Laplace-type integrals.

    support: hard end of the support (inf if none); cutoff: where the curve
    drops below the truncation tolerance; tail: closed form of
    int_H^inf fn(t) e^{-rho t} dt as a function of (H, rho), if known.
    """

    fn: Callable
    support: float
    cutoff: float
    kinks: tuple[float, ...] = ()
    tail: Callable[[float, float], float] | None = None
    scale: float = 1.0

    @classmethod
    def from_infectivity(cls, law: InfectivityLaw) -> Kernel:
        F = law.period_law
        tail = None
        if isinstance(law, ConstantInfectivity):
            base = _sf_tail(F)
            if base is not None:
                rate = law.rate

                def tail(H, rho):
                    return rate * base(H, rho)

        return cls(law.mean, F.upper, min(F.upper, law.horizon()), tuple(law.kinks()), tail)

    @classmethod
    def from_survival(cls, law: DurationLaw) -> Kernel:
        return cls(law.sf, law.upper, min(law.upper, law.horizon()), tuple(law.kinks()), _sf_tail(law))

    def __call__(self, t) -> np.ndarray:
        return self.scale * np.asarray(self.fn(np.asarray(t, dtype=float)), dtype=float)

    def scaled(self, factor: float) -> Kernel:
        return Kernel(self.fn, self.support, self.cutoff, self.kinks, self.tail, self.scale * factor)

    def tail_value(self, H: float, rho: float) -> float:
        return 0.0 if H >= self.support else self.scale * self.tail(H, rho)

    @cached_property
    def _tables(self) -> dict:
        return {}

    def table(self, upper: float):
        """(edges, nodes, weights, values) of the quadrature on [0, upper], cached."""
        if upper not in self._tables:
            edges, nodes, weights = gauss_legendre_panels(upper, self.kinks, PANELS, ORDER)
            vals = self(nodes.reshape(-1)).reshape(nodes.shape)
            self._tables[upper] = (edges, nodes, weights, vals)
        return self._tables[upper]

    def upper_for(self, rho: float) -> float:
        """Truncation point for the weight e^{-rho t}; inf if the integral diverges."""
        if rho >= 0 or self.support < math.inf or self.tail is not None:
            return self.cutoff if self.support == math.inf else self.support
        with np.errstate(over="ignore", invalid="ignore"):
            H = truncation_horizon(lambda t: _weighted(self(t), t, rho), tol=TAIL_TOL)
        return math.inf if H >= TAIL_CAP else H


def _as_kernel(obj) -> Kernel:
    if isinstance(obj, Kernel):
        return obj
    if isinstance(obj, InfectivityLaw):
        return Kernel.from_infectivity(obj)
    if isinstance(obj, DurationLaw):
        return Kernel.from_survival(obj)
    raise TypeError(f"cannot build a kernel from {type(obj).__name__}")


def _weighted(vals: np.ndarray, x: np.ndarray, rho: float) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        return np.where(vals > 0, vals * np.exp(-rho * x), 0.0)


def laplace(kernel, rho: float) -> float:
    """int_0^inf k(t) e^{-rho t} dt (inf when it diverges)."""
    k = _as_kernel(kernel)
    H = k.upper_for(rho)
    if H == math.inf:
        return math.inf
    _, nodes, weights, vals = k.table(H)
    body = float(np.sum(weights * _weighted(vals, nodes, rho)))
    if H < k.support and k.tail is not None:
        body += k.tail_value(H, rho)
    return body


def growth_rate(law) -> float:
    """Malthusian parameter: the root rho of int lambda_bar(t) e^{-rho t} dt = 1.

    Found by bisection on a bracket grown from [-10, 10] by doubling.  When
    R0 = 1 to within 1e-12 a warning is issued and 0 is returned.
    """
    k = _as_kernel(law)
    r0 = laplace(k, 0.0)
    if not math.isfinite(r0):
        raise ValueError("R0 is infinite")
    if r0 <= 0:
        raise ValueError("mean infectivity vanishes identically")
    if abs(r0 - 1.0) <= 1e-12:
        warnings.warn("R0 = 1: growth rate is zero", RuntimeWarning, stacklevel=2)
        return 0.0

    def f(r):
        return laplace(k, r) - 1.0

    lo, hi = -BRACKET, BRACKET
    while f(lo) <= 0:
        lo *= 2
        if -lo > BRACKET_CAP:
            raise BracketError("no sign change below the growth-rate bracket")
    while f(hi) >= 0:
        hi *= 2
        if hi > BRACKET_CAP:
            raise BracketError("no sign change above the growth-rate bracket")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = f(mid)
        if val == 0.0:
            return mid
        if val > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def normalized(law) -> Kernel:
    """The profile g = lambda_bar / R0, with unit integral."""
    k = _as_kernel(law)
    return k.scaled(1.0 / laplace(k, 0.0))


def r0_from_rho(g, rho: float) -> float:
    """R0 = (int g(t) e^{-rho t} dt)^{-1} for a normalized profile g."""
    k = _as_kernel(g)
    mass = laplace(k, 0.0)
    if abs(mass - 1.0) > 1e-8:
        raise ValueError(f"profile integrates to {mass:.10g}, not 1")
    return 1.0 / laplace(k, rho)


def doubling_time(rho: float) -> float:
    if rho <= 0:
        raise ValueError("doubling time needs a positive growth rate")
    return math.log(2.0) / rho


def _shifted_transform(k: Kernel, rho: float, t) -> np.ndarray:
    """int_0^inf k(t + s) e^{-rho s} ds at each t."""
    t = np.asarray(t, dtype=float)
    H = k.upper_for(rho)
    if H == math.inf:
        raise ValueError("transform diverges for this growth rate")
    edges, nodes, weights, vals = k.table(H)
    # per-panel integrals relative to the panel's left edge, accumulated backward
    P = np.sum(weights * _weighted(vals, nodes - edges[:-1, None], rho), axis=1)
    n = P.size
    T = np.zeros(n + 1)
    closed = H < k.support and k.tail is not None
    if closed:
        with np.errstate(over="ignore"):
            T[n] = k.tail_value(H, rho) * math.exp(rho * H)
    step = np.exp(-rho * np.diff(edges))
    for j in range(n - 1, -1, -1):
        T[j] = P[j] + step[j] * T[j + 1]
    x, w = np.polynomial.legendre.leggauss(ORDER)
    out = np.empty(t.size)
    flat = t.reshape(-1)
    for idx, tt in enumerate(flat):
        if tt >= H:
            out[idx] = k.tail_value(tt, rho) * math.exp(rho * tt) if closed else 0.0
            continue
        J = min(int(np.searchsorted(edges, tt, side="right")) - 1, n - 1)
        b = edges[J + 1]
        u = 0.5 * (b - tt) * x + 0.5 * (b + tt)
        part = 0.5 * (b - tt) * float(w @ _weighted(k(u), u - tt, rho))
        out[idx] = part + math.exp(-rho * (b - tt)) * T[J + 1]
    return out.reshape(t.shape)


@dataclass(frozen=True, eq=False)
class EarlyPhaseProfile:
    """Exponential-growth solution of the linearized system.

    With initial infectivity curve `force` and initial survival `survival`,
    and I(0) = i (resp. -i when rho < 0), the linearized force of infection is
    rho e^{rho t} (resp. -rho e^{rho t}).
    """

    rho: float
    i: float
    r: float
    _force: Kernel
    _survival: Kernel
    _norm: float

    def force(self, t) -> np.ndarray:
        """lambda_bar_rho(t)."""
        return _shifted_transform(self._force, self.rho, t) / self._norm

    def survival(self, t) -> np.ndarray:
        """F_rho^c(t)."""
        return _shifted_transform(self._survival, self.rho, t) / self._norm

    @property
    def initial_infected(self) -> float:
        return self.i if self.rho > 0 else -self.i


def early_phase_profile(law: InfectivityLaw, rho: float | None = None) -> EarlyPhaseProfile:
    """Profiles lambda_bar_rho, F_rho^c and the shares i, r = 1 - i."""
    if rho is None:
        rho = growth_rate(law)
    if rho == 0:
        raise ValueError("the early-phase profile needs rho != 0")
    fk = Kernel.from_infectivity(law)
    sk = Kernel.from_survival(law.period_law)
    norm = laplace(sk, rho)
    if not math.isfinite(norm):
        raise ValueError("E[exp(-rho eta)] is infinite")
    i = rho * norm
    return EarlyPhaseProfile(rho, i, 1.0 - i, fk, sk, norm)


# ---------------------------------------------------------------------------
# Markov models


def markov_equilibria(family: str, params: Mapping[str, float]) -> dict[str, float]:
    """Endemic (or disease-free) equilibrium of the Markov mean-field ODEs."""
    lam, gam = float(params["lam"]), float(params["gamma"])
    if lam <= 0 or gam <= 0:
        raise ValueError("rates must be positive")
    if family == "markov-sis":
        r0 = lam / gam
        i = 1.0 - gam / lam if r0 > 1 else 0.0
        return {"S": 1.0 - i, "I": i, "R0": r0}
    if family == "markov-sirs":
        rho = float(params["rho"])
        r0 = lam / gam
        if r0 <= 1:
            return {"S": 1.0, "I": 0.0, "R": 0.0, "R0": r0}
        s = gam / lam
        i = (1.0 - 1.0 / r0) * rho / (gam + rho)
        return {"S": s, "I": i, "R": 1.0 - s - i, "R0": r0}
    if family == "markov-sir-demography":
        mu = float(params["mu"])
        r0 = lam / (gam + mu)
        if r0 <= 1:
            return {"S": 1.0, "I": 0.0, "R": 0.0, "R0": r0}
        s = (gam + mu) / lam
        i = (1.0 - 1.0 / r0) * mu / (gam + mu)
        return {"S": s, "I": i, "R": 1.0 - s - i, "R0": r0}
    if family == "markov-sir":
        return {"S": 1.0, "I": 0.0, "R0": lam / gam}
    raise ValueError(f"no equilibrium formula for {family!r}")


def critical_population_size(r0: float, gamma: float, mu: float) -> float:
    """N_c = 9 / (eps^2 (1 - 1/R0)^2 R0) with eps = mu / (gamma + mu)."""
    if r0 == 1:
        raise ValueError("critical population size is undefined at R0 = 1")
    if r0 <= 0 or gamma <= 0 or mu <= 0:
        raise ValueError("R0, gamma and mu must be positive")
    eps = mu / (gamma + mu)
    return 9.0 / (eps ** 2 * (1.0 - 1.0 / r0) ** 2 * r0)


def sis_quasipotential(r0: float) -> float:
    """V = log R0 - 1 + 1/R0, the cost of reaching extinction from the SIS equilibrium."""
    if r0 <= 0:
        raise ValueError("R0 must be positive")
    return math.log(r0) - 1.0 + 1.0 / r0
