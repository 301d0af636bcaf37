"""Gaussian fluctuation limits: driver covariances and sampled fluctuation paths.

Driver registry
---------------
SIR-type models (markov-sir, nonmarkov-sir):
    MA  martingale part of the cumulative infections
    I0  fluctuation of the initially infected still infected
    R0  fluctuation of the initially infected already recovered
    I1  fluctuation of the newly infected still infected
    R1  fluctuation of the newly infected already recovered
varying infectivity adds
    F0  infectivity fluctuation of the initially infected
    F1  infectivity fluctuation of the newly infected, given infection times
    F2  force fluctuation carried by the martingale MA

Independence blocks are ("I0", "R0") and ("MA", "I1", "R1") for SIR-type
models, and ("F0", "I0", "R0") and ("MA", "F1", "F2", "I1", "R1") for varying
infectivity.  Inside a block, covariances are integrals over infection times
s of second moments of a per-individual feature vector.  They are evaluated
cell by cell with the midpoint rule, which keeps every assembled matrix exactly
positive semidefinite.

The Gaussian limit for varying infectivity needs infectivity curves that are
Hölder continuous between finitely many jumps.  This is not checked for user
laws.  Among the built-in laws, CovidProfile is Lipschitz, constant rates jump
only at the end of the infectious period, and LatentInfectivity jumps at the
two period boundaries, so all of them qualify.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .laws import ConstantInfectivity, DurationLaw, Exponential, InfectivityLaw
from .mesh import TimeMesh
from .volterra import LimitSolution, _kernel

__all__ = [
    "GaussianDriverSpec",
    "FluctuationEnsemble",
    "PoissonCheck",
    "FactorizationError",
    "driver_covariances",
    "sample_fluctuations",
    "poisson_clt_check",
    "PANEL_SIZE",
]

PANEL_SIZE = 10_000
PSD_TOL = 1e-8
JITTERS = (0.0, 1e-12, 1e-10, 1e-8)


class FactorizationError(np.linalg.LinAlgError):
    """Covariance could not be factorized within the jitter budget."""

    def __init__(self, block, eigenvalue: float):
        super().__init__(f"block {block} is not PSD: minimum eigenvalue {eigenvalue:.3e}")
        self.block = block
        self.eigenvalue = eigenvalue


@dataclass
class GaussianDriverSpec:
    """Named centered Gaussian drivers on a mesh.

    `cov[(a, b)][j, k]` is Cov(a(t_j), b(t_k)); only pairs inside a block are
    stored, every cross-block covariance is zero.
    """

    mesh: TimeMesh
    model: str
    blocks: tuple[tuple[str, ...], ...]
    cov: dict[tuple[str, str], np.ndarray]
    kernels: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for b in self.blocks for n in b)

    def block_of(self, name: str) -> tuple[str, ...]:
        for b in self.blocks:
            if name in b:
                return b
        raise KeyError(name)

    def covariance(self, a: str, b: str) -> np.ndarray:
        if (a, b) in self.cov:
            return self.cov[(a, b)]
        if (b, a) in self.cov:
            return self.cov[(b, a)].T
        self.block_of(a), self.block_of(b)
        return np.zeros((self.mesh.size + 1,) * 2)

    def joint(self, block: tuple[str, ...]) -> np.ndarray:
        return np.block([[self.covariance(a, b) for b in block] for a in block])

    def min_eigenvalue(self, block: tuple[str, ...]) -> float:
        m = self.joint(block)
        return float(np.linalg.eigvalsh(0.5 * (m + m.T)).min())

    def check(self) -> None:
        """Raise FactorizationError when a block is not PSD within tolerance."""
        for b in self.blocks:
            lo = self.min_eigenvalue(b)
            if lo < -PSD_TOL:
                raise FactorizationError(b, lo)

    def factor(self, block: tuple[str, ...]) -> tuple[np.ndarray, np.ndarray]:
        """Lower factor of the block covariance restricted to nonzero-variance entries."""
        m = self.joint(block)
        m = 0.5 * (m + m.T)
        keep = np.flatnonzero(np.diag(m) > 0)
        sub = m[np.ix_(keep, keep)]
        scale = max(float(np.abs(sub).max()), 1.0) if sub.size else 1.0
        for jit in JITTERS:
            try:
                return keep, np.linalg.cholesky(sub + jit * scale * np.eye(keep.size))
            except np.linalg.LinAlgError:
                continue
        raise FactorizationError(block, float(np.linalg.eigvalsh(sub).min()))

    def sample(self, n_paths: int, seed: int) -> dict[str, np.ndarray]:
        """Joint driver paths, one independent stream per block."""
        n = self.mesh.size + 1
        out = {}
        for b, rng in zip(self.blocks, _block_streams(seed, len(self.blocks))):
            keep, L = self.factor(b)
            z = rng.standard_normal((n_paths, keep.size))
            flat = np.zeros((n_paths, len(b) * n))
            flat[:, keep] = z @ L.T
            for i, name in enumerate(b):
                out[name] = flat[:, i * n:(i + 1) * n]
        return out

    def to_csv(self, path) -> None:
        """Long-form rows name_a, name_b, t, t', covariance."""
        t = self.mesh.times
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["a", "b", "t", "t_prime", "cov"])
            for (a, b), m in self.cov.items():
                for j, tj in enumerate(t):
                    for k, tk in enumerate(t):
                        w.writerow([a, b, f"{tj:.10g}", f"{tk:.10g}", repr(float(m[j, k]))])


def _block_streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(n)]


# ---------------------------------------------------------------------------
# covariance assembly


def _cell_integral(features: np.ndarray, w_mid: np.ndarray, h: float, d: int) -> np.ndarray:
    """sum over cells c of h w_c E[X(t_j - s_c) X(t_k - s_c)^T] for j, k > c.

    `features` holds second moments on the half-grid ages, shape (d, n, d, n).
    Returns the (d, n+1, d, n+1) covariance array.
    """
    n = w_mid.size
    out = np.zeros((d, n + 1, d, n + 1))
    for c in range(n):
        m = n - c
        out[:, c + 1:, :, c + 1:] += h * w_mid[c] * features[:, :m, :, :m]
    return out


def _second_moments(cols: list[np.ndarray]) -> np.ndarray:
    """E[X X^T] for the stacked feature columns, each of shape (paths, n)."""
    X = np.concatenate(cols, axis=1)
    M = X.T @ X / X.shape[0]
    d = len(cols)
    n = cols[0].shape[1]
    return M.reshape(d, n, d, n)


def _exact_sir_moments(F: DurationLaw, ages: np.ndarray) -> np.ndarray:
    """Second moments of (1, 1{eta > a}, 1{eta <= a'}) for eta ~ F."""
    n = ages.size
    sf = F.sf(ages)
    cdf = 1.0 - sf
    big = np.maximum.outer(ages, ages)
    small = np.minimum.outer(ages, ages)
    one = np.ones((n, n))
    mom = np.empty((3, n, 3, n))
    mom[0, :, 0, :] = one
    mom[0, :, 1, :] = one * sf[None, :]
    mom[0, :, 2, :] = one * cdf[None, :]
    mom[1, :, 1, :] = F.sf(big)
    mom[2, :, 2, :] = 1.0 - F.sf(small)
    # P(a < eta <= a')
    mom[1, :, 2, :] = np.maximum(sf[:, None] - sf[None, :], 0.0)
    for i in range(3):
        for j in range(i):
            mom[i, :, j, :] = mom[j, :, i, :].T
    return mom


def _split(arr: np.ndarray, names: tuple[str, ...]) -> dict[tuple[str, str], np.ndarray]:
    out = {}
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            if j >= i:
                out[(a, b)] = arr[i, :, j, :]
    return out


def _initial_block(sf0: np.ndarray, i0: float, lam0: np.ndarray | None = None, ind0: np.ndarray | None = None):
    """Covariances of the initially infected drivers at the nodes."""
    big = np.maximum.outer(np.arange(sf0.size), np.arange(sf0.size))
    cI = i0 * (sf0[big] - np.outer(sf0, sf0))
    cov = {("I0", "I0"): cI, ("R0", "R0"): cI.copy(), ("I0", "R0"): -cI}
    if lam0 is not None:
        lc = lam0 - lam0.mean(axis=0)
        ic = ind0 - ind0.mean(axis=0)
        m = lam0.shape[0]
        cov[("F0", "F0")] = i0 * lc.T @ lc / m
        cov[("F0", "I0")] = i0 * lc.T @ ic / m
        cov[("F0", "R0")] = -cov[("F0", "I0")]
        # I0/R0 from the same panel so the block stays PSD
        cI = i0 * ic.T @ ic / m
        cov[("I0", "I0")], cov[("R0", "R0")], cov[("I0", "R0")] = cI, cI.copy(), -cI
    return cov


def _panel(law: InfectivityLaw, ages: np.ndarray, size: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Values lambda(a) and indicators 1{eta > a} for `size` fresh trajectories."""
    if isinstance(law, ConstantInfectivity):
        eta = law.period.sample(rng, size)
        alive = (ages[None, :] < eta[:, None]).astype(float)
        return law.rate * alive, alive
    paths = law.sample_many(rng, size)
    vals = np.stack([p(ages) for p in paths])
    eta = np.array([p.period for p in paths])
    return vals, (ages[None, :] < eta[:, None]).astype(float)


def driver_covariances(model: str, limit: LimitSolution, laws: Mapping, mesh: TimeMesh | None = None) -> GaussianDriverSpec:
    """Driver covariances for one of markov-sir, nonmarkov-sir, varying-infectivity.

    `laws` holds ``lam`` and ``gamma`` (markov-sir); ``lam``, ``F`` and
    optionally ``F0`` (nonmarkov-sir); ``infectivity`` and optionally
    ``initial_infectivity``, ``panel`` and ``seed`` (varying-infectivity).
    """
    mesh = mesh or limit.mesh
    if mesh.size != limit.mesh.size or abs(mesh.step - limit.mesh.step) > 1e-12:
        raise ValueError("the limit solution must live on the driver mesh")
    h = mesh.step
    n = mesh.size
    t = mesh.times
    half = (np.arange(n) + 0.5) * h
    S, I = limit["S"], limit["I"]
    i0 = float(I[0])
    if model in ("markov-sir", "nonmarkov-sir"):
        if model == "markov-sir":
            lam = float(laws["lam"])
            F = F0 = Exponential(float(laws["gamma"]))
        else:
            lam = float(laws["lam"])
            F = laws["F"]
            F0 = laws.get("F0") or F
        w = lam * S * I
        w_mid = 0.5 * (w[1:] + w[:-1])
        mom = _exact_sir_moments(F, half)
        names = ("MA", "I1", "R1")
        cov = _split(_cell_integral(mom, w_mid, h, 3), names)
        cov.update(_initial_block(F0.sf(t), i0))
        kp, km = _kernel(lambda a: lam * F.sf(a), lambda a: lam * F.sf_left(a), mesh)
        ip, im = _kernel(F.sf, F.sf_left, mesh)
        kernels = {
            "force_p": kp,
            "force_m": km,
            "sf_p": ip,
            "sf_m": im,
            "force0": lam * F0.sf(t),
            "sf0": F0.sf(t),
            "force_scale": np.full(n + 1, lam),
        }
        spec = GaussianDriverSpec(mesh, model, (("I0", "R0"), names), cov, kernels)
    elif model == "varying-infectivity":
        law: InfectivityLaw = laws["infectivity"]
        law0: InfectivityLaw = laws.get("initial_infectivity") or law
        size = int(laws.get("panel", PANEL_SIZE))
        rng_new, rng_init = _block_streams(int(laws.get("seed", 0)), 2)
        Fbar = limit["F"]
        w = S * Fbar
        w_mid = 0.5 * (w[1:] + w[:-1])
        vals, alive = _panel(law, half, size, rng_new)
        lbar = law.mean(half)
        cols = [
            np.ones_like(vals),
            vals - vals.mean(axis=0),
            np.broadcast_to(lbar, vals.shape),
            alive,
            1.0 - alive,
        ]
        names = ("MA", "F1", "F2", "I1", "R1")
        cov = _split(_cell_integral(_second_moments(cols), w_mid, h, 5), names)
        for pair in (("MA", "F1"), ("F1", "F2")):
            cov.pop(pair)
        vals0, alive0 = _panel(law0, t, size, rng_init)
        cov.update(_initial_block(alive0.mean(axis=0), i0, vals0, alive0))
        Fl = law.period_law
        kp, km = _kernel(law.mean, lambda a: law.mean(a, left=True), mesh)
        ip, im = _kernel(Fl.sf, Fl.sf_left, mesh)
        kernels = {
            "force_p": kp,
            "force_m": km,
            "sf_p": ip,
            "sf_m": im,
            "force0": law0.mean(t),
            "sf0": law0.period_law.sf(t),
        }
        spec = GaussianDriverSpec(mesh, model, (("F0", "I0", "R0"), names), cov, kernels)
    else:
        raise ValueError(f"no fluctuation limit for family {model!r}")
    spec.check()
    return spec


# ---------------------------------------------------------------------------
# sampling the linear system


@dataclass
class FluctuationEnsemble:
    """Sampled fluctuation paths with pointwise ensemble mean and variance."""

    mesh: TimeMesh
    paths: dict[str, np.ndarray]

    @property
    def n_paths(self) -> int:
        return next(iter(self.paths.values())).shape[0]

    @property
    def mean(self) -> dict[str, np.ndarray]:
        return {k: v.mean(axis=0) for k, v in self.paths.items()}

    @property
    def var(self) -> dict[str, np.ndarray]:
        return {k: v.var(axis=0, ddof=1) if v.shape[0] > 1 else np.zeros(v.shape[1]) for k, v in self.paths.items()}

    def stderr(self, name: str) -> np.ndarray:
        return np.sqrt(self.var[name] / self.n_paths)


def _hist(kp: np.ndarray, km: np.ndarray, y: np.ndarray, m: int, h: float) -> np.ndarray:
    """Trapezoid history int_0^{t_m} K(t_m - s) y(s) ds without the y_m term."""
    return 0.5 * h * (y[:, :m] @ km[m:0:-1] + y[:, 1:m] @ kp[m - 1:0:-1])


def solve_linear_system(spec: GaussianDriverSpec, limit: LimitSolution, drivers: Mapping[str, np.ndarray], initial=None) -> dict[str, np.ndarray]:
    """Solve for (S, F, I, R) fluctuations path by path given driver paths.

    With Y = S_hat * Fbar + Sbar * F_hat:
        S_hat = S_hat(0) - MA - int_0^t Y
        F_hat = I_hat(0) lambda0(t) + force drivers + int_0^t lambda(t - s) Y(s) ds
        I_hat = I_hat(0) F0c(t) + I0 + I1 + int_0^t Fc(t - s) Y(s) ds
        R_hat = S_hat(0) + I_hat(0) + R_hat(0) - S_hat - I_hat
    """
    k = spec.kernels
    h = spec.mesh.step
    n = spec.mesh.size
    initial = dict(initial or {})
    s0, i0, r0 = (float(initial.get(c, 0.0)) for c in ("S", "I", "R"))
    MA = drivers["MA"]
    paths = MA.shape[0]
    Sb, Fb = limit["S"], limit["F"]
    if spec.model == "varying-infectivity":
        dF = drivers["F0"] + drivers["F1"] + drivers["F2"]
    else:
        dF = k["force_scale"] * (drivers["I0"] + drivers["I1"])
    dI = drivers["I0"] + drivers["I1"]
    Sh = np.zeros((paths, n + 1))
    Fh = np.zeros((paths, n + 1))
    Y = np.zeros((paths, n + 1))
    Sh[:, 0] = s0 - MA[:, 0]
    Fh[:, 0] = i0 * k["force0"][0] + dF[:, 0]
    Y[:, 0] = Sh[:, 0] * Fb[0] + Sb[0] * Fh[:, 0]
    cumY = np.zeros(paths)
    kp, km = k["force_p"], k["force_m"]
    for m in range(1, n + 1):
        a_s = s0 - MA[:, m] - cumY - 0.5 * h * Y[:, m - 1]
        a_f = i0 * k["force0"][m] + dF[:, m] + _hist(kp, km, Y, m, h)
        c1, c2 = Fb[m], Sb[m]
        y = (c1 * a_s + c2 * a_f) / (1.0 + 0.5 * h * (c1 - c2 * kp[0]))
        Y[:, m] = y
        Sh[:, m] = a_s - 0.5 * h * y
        Fh[:, m] = a_f + 0.5 * h * kp[0] * y
        cumY += 0.5 * h * (Y[:, m - 1] + y)
    Ih = i0 * k["sf0"][None, :] + dI + _conv_rows(k["sf_p"], k["sf_m"], Y, h)
    Rh = s0 + i0 + r0 - Sh - Ih
    return {"S": Sh, "F": Fh, "I": Ih, "R": Rh, "Y": Y}


def _conv_rows(kp: np.ndarray, km: np.ndarray, y: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros_like(y)
    for m in range(1, y.shape[1]):
        out[:, m] = _hist(kp, km, y, m, h) + 0.5 * h * kp[0] * y[:, m]
    return out


def sample_fluctuations(spec: GaussianDriverSpec, limit: LimitSolution, n_paths: int, seed: int, initial=None) -> FluctuationEnsemble:
    """Draw driver paths and solve the linear fluctuation system for each.

    `initial` optionally gives deterministic initial fluctuations S, I, R.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    drivers = spec.sample(n_paths, seed)
    return FluctuationEnsemble(spec.mesh, solve_linear_system(spec, limit, drivers, initial))


# ---------------------------------------------------------------------------
# Poisson functional CLT harness


@dataclass
class PoissonCheck:
    """Paths of N^{-1/2} (P(N t) - N t) on a uniform grid."""

    t: np.ndarray
    paths: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        return self.paths.var(axis=0, ddof=1)


def poisson_clt_check(N: float, horizon: float, n_paths: int, seed: int, step: float | None = None) -> PoissonCheck:
    """Centered, scaled unit-rate Poisson paths; the variance at t should approach t."""
    if N <= 0 or horizon <= 0 or n_paths < 2:
        raise ValueError("need N > 0, horizon > 0 and at least two paths")
    mesh = TimeMesh(horizon, step or horizon / 100)
    rng = np.random.default_rng(seed)
    inc = rng.poisson(N * mesh.step, size=(n_paths, mesh.size))
    counts = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(inc, axis=1)], axis=1)
    return PoissonCheck(mesh.times, (counts - N * mesh.times[None, :]) / np.sqrt(N))
