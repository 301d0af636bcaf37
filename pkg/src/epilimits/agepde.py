"""Infection-age density: boundary Volterra equation plus exact transport.

The (t, x) grid uses one step for both axes, so characteristics run through
grid nodes and the density is filled exactly from

    i(t, x) = F^c(x) / F^c(x - t) * i(0, x - t)    for x >= t,
    i(t, x) = F^c(x) * i(t - x, 0)                 for x < t.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .laws import DurationLaw, InfectivityLaw, basic_reproduction_number, integrate
from .mesh import TimeMesh
from .volterra import (
    FP_TOL,
    AgeProfile,
    NegativeStateError,
    _fixed_point,
    _kernel,
    _march,
)

__all__ = [
    "AgeDensityField",
    "solve_age_density",
    "solve_sis_age_density",
    "sis_endemic_equilibrium",
    "hazard_on_grid",
]

log = logging.getLogger(__name__)


def _on_mesh(profile: AgeProfile, h: float) -> np.ndarray:
    """Initial density sampled at ages 0, h, 2h, ... up to its last age."""
    if abs(profile.step - h) <= 1e-12 * h:
        return profile.density.copy()
    log.info("resampling the initial age density from step %g to %g", profile.step, h)
    ages = np.arange(int(np.floor(profile.upper / h + 1e-9)) + 1) * h
    return np.interp(ages, profile.ages, profile.density)


def _trapz_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    if n == 1:
        return np.zeros(1)
    w[0] = w[-1] = 0.5 * h
    return w


def hazard_on_grid(F: DurationLaw, x: np.ndarray, h: float) -> np.ndarray:
    """gamma(x) = f(x) / F^c(x); a centered difference of F over 4h when F has no density."""
    if F.has_density:
        return F.hazard(x)
    log.info("hazard of %s estimated by finite differences (bandwidth %g)", type(F).__name__, 4 * h)
    dens = (F.cdf(x + 2 * h) - F.cdf(np.maximum(x - 2 * h, 0.0))) / (np.minimum(x, 2 * h) + 2 * h)
    sf = F.sf(x)
    return np.where(sf > 0, dens / np.where(sf > 0, sf, 1.0), np.inf)


@dataclass
class AgeDensityField:
    """Density i(t, x) on a diagonal-aligned grid.

    values[n, j] is the density at time n*h and infection age j*h.  On the
    diagonal x = t the value from the initial cohort is stored; the limit from
    the newly infected side is F^c(t) * boundary[0].
    """

    mesh: TimeMesh
    values: np.ndarray
    boundary: np.ndarray
    initial: np.ndarray
    survival: np.ndarray
    S: np.ndarray
    F: np.ndarray
    clamped: tuple[int, ...] = ()

    @property
    def step(self) -> float:
        return self.mesh.step

    @property
    def t(self) -> np.ndarray:
        return self.mesh.times

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.values.shape[1]) * self.step

    def total(self) -> np.ndarray:
        """int i(t, x) dx at each time, by the trapezoid rule on each side of x = t."""
        h = self.step
        out = np.empty(self.values.shape[0])
        for n in range(out.size):
            row = self.values[n]
            new = row[: n + 1].copy()
            if n > 0:
                new[n] = self.survival[n] * self.boundary[0]
                left = _trapz_weights(n + 1, h) @ new
            else:
                left = 0.0
            old = row[n : n + self.initial.size]
            out[n] = left + _trapz_weights(old.size, h) @ old
        return out

    def residual(self, hazard: np.ndarray) -> np.ndarray:
        """Centered-difference residual of d_t i + d_x i + gamma(x) i at interior nodes.

        Nodes within one cell of the diagonal are set to NaN.
        """
        v = self.values
        h = self.step
        res = np.full(v.shape, np.nan)
        dt = (v[2:, 1:-1] - v[:-2, 1:-1]) / (2 * h)
        dx = (v[1:-1, 2:] - v[1:-1, :-2]) / (2 * h)
        res[1:-1, 1:-1] = dt + dx + hazard[None, 1:-1] * v[1:-1, 1:-1]
        n_idx, j_idx = np.indices(v.shape)
        res[np.abs(n_idx - j_idx) <= 1] = np.nan
        return res

    def rows(self):
        """Long-form (t, x, i) rows."""
        for n, tn in enumerate(self.t):
            for j, xj in enumerate(self.x):
                yield tn, xj, self.values[n, j]


def _fill(mesh: TimeMesh, F: DurationLaw, i0: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = mesh.size
    h = mesh.step
    J = n + i0.size - 1
    x = np.arange(J + 1) * h
    sf = F.sf(x)
    field = np.zeros((n + 1, J + 1))
    for k in range(n + 1):
        # initial cohort: x = k h + y
        cols = np.arange(k, k + i0.size)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(sf[: i0.size] > 0, sf[cols] / np.where(sf[: i0.size] > 0, sf[: i0.size], 1.0), 0.0)
        field[k, cols] = ratio * i0
        if k > 0:
            field[k, :k] = sf[:k] * b[k:0:-1]
    return field, sf


def _initial_terms(law: InfectivityLaw, i0: np.ndarray, h: float, t: np.ndarray):
    profile = AgeProfile(tuple(float(v) for v in i0), h)
    F = law.period_law
    return (
        profile,
        profile.transported(law.mean, F.sf, t),
        profile.transported(F.sf, F.sf, t),
    )


def solve_age_density(
    law: InfectivityLaw,
    initial: AgeProfile,
    mesh: TimeMesh,
    S0: float | None = None,
) -> AgeDensityField:
    """SIR infection-age density with infectivity law `law`.

    The boundary trace i(t, 0) = S(t) F(t) is marched jointly with
    S(t) = S(0) - int_0^t i(s, 0) ds; S is clamped at zero if the scheme
    would push it below.
    """
    h = mesh.step
    t = mesh.times
    i0 = _on_mesh(initial, h)
    if np.any(i0 < 0):
        raise ValueError("initial age density must be nonnegative")
    profile, base, _ = _initial_terms(law, i0, h, t)
    s0 = 1.0 - profile.total if S0 is None else float(S0)
    if s0 < 0 or s0 + profile.total > 1 + 1e-9:
        raise ValueError("S(0) + I(0) must not exceed 1")
    kp, km = _kernel(law.mean, lambda a: law.mean(a, left=True), mesh)
    events: list[int] = []
    S, Fc, b, _ = _march(h, base, kp, km, 1.0, s0, np.ones_like(t), clamp=events)
    if events:
        log.warning("susceptible fraction clamped at zero from t=%g on", t[events[0]])
    field, sf = _fill(mesh, law.period_law, i0, b)
    return AgeDensityField(mesh, field, b, i0, sf, S, Fc, tuple(events))


def solve_sis_age_density(law: InfectivityLaw, initial: AgeProfile, mesh: TimeMesh) -> AgeDensityField:
    """SIS variant: S(t) = 1 - I(t), with I(t) from the age density."""
    h = mesh.step
    t = mesh.times
    n = mesh.size
    i0 = _on_mesh(initial, h)
    if np.any(i0 < 0):
        raise ValueError("initial age density must be nonnegative")
    profile, base, i_init = _initial_terms(law, i0, h, t)
    if profile.total > 1 + 1e-9:
        raise ValueError("initial infected mass exceeds 1")
    F = law.period_law
    lp, lm = _kernel(law.mean, lambda a: law.mean(a, left=True), mesh)
    fp, fm = _kernel(F.sf, F.sf_left, mesh)
    half = 0.5 * h
    b = np.empty(n + 1)
    I = np.empty(n + 1)
    Fc = np.empty(n + 1)
    I[0], Fc[0] = i_init[0], base[0]
    b[0] = (1.0 - I[0]) * Fc[0]
    for m in range(1, n + 1):
        kf = base[m] + half * (lm[m:0:-1] @ b[:m] + lp[m - 1:0:-1] @ b[1:m])
        ki = i_init[m] + half * (fm[m:0:-1] @ b[:m] + fp[m - 1:0:-1] @ b[1:m])
        af, ai = half * lp[0], half * fp[0]

        def g(y):
            return (kf + af * y) * (1.0 - ki - ai * y)

        y = _fixed_point(g, b[m - 1], tol=FP_TOL * max(1.0, b[m - 1]))
        b[m] = y
        Fc[m] = kf + af * y
        I[m] = ki + ai * y
        if I[m] > 1 + 1e-8 or y < -1e-12:
            raise NegativeStateError(f"SIS boundary left the admissible range at t={t[m]:g}")
    field, sf = _fill(mesh, F, i0, b)
    return AgeDensityField(mesh, field, b, i0, sf, 1.0 - I, Fc)


def sis_endemic_equilibrium(law: InfectivityLaw) -> tuple[float, Callable[[np.ndarray], np.ndarray]]:
    """I* = max(0, 1 - 1/R0) and the equilibrium age density I* mu F^c(x)."""
    r0 = basic_reproduction_number(law)
    F = law.period_law
    i_star = max(0.0, 1.0 - 1.0 / r0) if r0 > 0 else 0.0
    mean = F.mean
    if not np.isfinite(mean) or mean <= 0:
        mean = integrate(F.sf, F.horizon(), F.kinks())

    def density(x):
        return i_star / mean * F.sf(np.asarray(x, dtype=float))

    return i_star, density
