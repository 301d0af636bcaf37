"""Duration laws and random infectivity / susceptibility trajectories.

Every law is an immutable dataclass, so laws can be shared between threads,
used as cache keys and written back to a scenario file.  Sampling always
takes an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Iterator, Sequence

import numpy as np
from scipy import stats

from .mesh import TimeMesh

TAIL_TOL = 1e-12
TAIL_CAP = 1e4
QUANTILE_NODES = 2048


def _arr(t) -> np.ndarray:
    return np.asarray(t, dtype=float)


def _midpoints(m: int) -> np.ndarray:
    return (np.arange(m) + 0.5) / m


def beta22_ppf(u) -> np.ndarray:
    """Inverse of the Beta(2,2) cdf 3x^2 - 2x^3 (trigonometric root of the cubic)."""
    u = np.clip(_arr(u), 0.0, 1.0)
    return 0.5 + np.cos((np.arccos(1.0 - 2.0 * u) - 2.0 * np.pi) / 3.0)


# ---------------------------------------------------------------------------
# duration laws


class DurationLaw(ABC):
    """Law of a nonnegative duration (infectious period, latent period, ...)."""

    @abstractmethod
    def cdf(self, t) -> np.ndarray: ...

    @abstractmethod
    def ppf(self, u) -> np.ndarray: ...

    @property
    @abstractmethod
    def mean(self) -> float: ...

    @abstractmethod
    def to_config(self) -> dict: ...

    def sf(self, t) -> np.ndarray:
        return 1.0 - self.cdf(t)

    def sf_left(self, t) -> np.ndarray:
        """P(X >= t), the left limit of the survival function."""
        t = _arr(t)
        out = self.sf(t)
        for value, prob in self.atoms():
            out = out + prob * (t == value)
        return out

    def cdf_left(self, t) -> np.ndarray:
        return 1.0 - self.sf_left(t)

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        return self.ppf(rng.random(size))

    @property
    def upper(self) -> float:
        return math.inf

    def atoms(self) -> tuple[tuple[float, float], ...]:
        return ()

    def kinks(self) -> tuple[float, ...]:
        """Points where the cdf fails to be smooth."""
        return ()

    @property
    def has_density(self) -> bool:
        return not self.atoms()

    def pdf(self, t) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no density")

    def hazard(self, t) -> np.ndarray:
        t = _arr(t)
        s = self.sf(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(s > 0, self.pdf(t) / np.where(s > 0, s, 1.0), np.inf)

    def quadrature_nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """Nodes and weights approximating expectations under the law."""
        atoms = self.atoms()
        if atoms and abs(sum(p for _, p in atoms) - 1.0) < 1e-12:
            vals, probs = zip(*atoms)
            return np.array(vals), np.array(probs)
        m = QUANTILE_NODES
        return self.ppf(_midpoints(m)), np.full(m, 1.0 / m)

    def horizon(self, tol: float = TAIL_TOL) -> float:
        """Smallest T (up to bisection accuracy) with F^c(T) < tol, capped."""
        return truncation_horizon(self.sf, tol=tol)


@dataclass(frozen=True)
class Exponential(DurationLaw):
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("exponential rate must be positive")

    def cdf(self, t):
        t = _arr(t)
        return np.where(t >= 0, -np.expm1(-self.rate * np.maximum(t, 0.0)), 0.0)

    def sf(self, t):
        return np.exp(-self.rate * np.maximum(_arr(t), 0.0))

    def pdf(self, t):
        t = _arr(t)
        return np.where(t >= 0, self.rate * np.exp(-self.rate * np.maximum(t, 0.0)), 0.0)

    def hazard(self, t):
        return np.full_like(_arr(t), self.rate)

    def ppf(self, u):
        return -np.log1p(-_arr(u)) / self.rate

    @property
    def mean(self):
        return 1.0 / self.rate

    def to_config(self):
        return {"kind": "exponential", "rate": self.rate}


@dataclass(frozen=True)
class Deterministic(DurationLaw):
    value: float

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError("deterministic duration must be nonnegative")

    def cdf(self, t):
        return (_arr(t) >= self.value).astype(float)

    def sf_left(self, t):
        return (_arr(t) <= self.value).astype(float)

    def ppf(self, u):
        return np.full_like(_arr(u), self.value)

    @property
    def mean(self):
        return self.value

    @property
    def upper(self):
        return self.value

    def atoms(self):
        return ((self.value, 1.0),)

    def kinks(self):
        return (self.value,)

    def to_config(self):
        return {"kind": "deterministic", "value": self.value}


@dataclass(frozen=True)
class Gamma(DurationLaw):
    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError("gamma shape and scale must be positive")

    @cached_property
    def _dist(self):
        return stats.gamma(self.shape, scale=self.scale)

    def cdf(self, t):
        return self._dist.cdf(_arr(t))

    def sf(self, t):
        return self._dist.sf(_arr(t))

    def pdf(self, t):
        return self._dist.pdf(_arr(t))

    def ppf(self, u):
        return self._dist.ppf(_arr(u))

    @property
    def mean(self):
        return self.shape * self.scale

    def to_config(self):
        return {"kind": "gamma", "shape": self.shape, "scale": self.scale}


@dataclass(frozen=True)
class Uniform(DurationLaw):
    low: float
    high: float

    def __post_init__(self):
        if not 0 <= self.low < self.high:
            raise ValueError("uniform law needs 0 <= low < high")

    def cdf(self, t):
        return np.clip((_arr(t) - self.low) / (self.high - self.low), 0.0, 1.0)

    def pdf(self, t):
        t = _arr(t)
        return np.where((t >= self.low) & (t < self.high), 1.0 / (self.high - self.low), 0.0)

    def ppf(self, u):
        return self.low + (self.high - self.low) * _arr(u)

    @property
    def mean(self):
        return 0.5 * (self.low + self.high)

    @property
    def upper(self):
        return self.high

    def kinks(self):
        return (self.low, self.high)

    def to_config(self):
        return {"kind": "uniform", "low": self.low, "high": self.high}


@dataclass(frozen=True)
class ShiftedBeta(DurationLaw):
    """base + span * Beta(a, b)."""

    base: float
    span: float
    a: float = 2.0
    b: float = 2.0

    def __post_init__(self):
        if not (self.base >= 0 and self.span > 0 and self.a > 0 and self.b > 0):
            raise ValueError("invalid shifted beta parameters")

    @cached_property
    def _dist(self):
        return stats.beta(self.a, self.b, loc=self.base, scale=self.span)

    def _is_22(self) -> bool:
        return self.a == 2.0 and self.b == 2.0

    def cdf(self, t):
        if self._is_22():
            x = np.clip((_arr(t) - self.base) / self.span, 0.0, 1.0)
            return x * x * (3.0 - 2.0 * x)
        return self._dist.cdf(_arr(t))

    def pdf(self, t):
        if self._is_22():
            x = (_arr(t) - self.base) / self.span
            return np.where((x >= 0) & (x <= 1), 6.0 * x * (1.0 - x), 0.0) / self.span
        return self._dist.pdf(_arr(t))

    def ppf(self, u):
        if self._is_22():
            return self.base + self.span * beta22_ppf(u)
        return self._dist.ppf(_arr(u))

    @property
    def mean(self):
        return self.base + self.span * self.a / (self.a + self.b)

    @property
    def upper(self):
        return self.base + self.span

    def kinks(self):
        return (self.base, self.base + self.span)

    def to_config(self):
        return {"kind": "beta-shifted", "base": self.base, "span": self.span, "a": self.a, "b": self.b}


@dataclass(frozen=True)
class Empirical(DurationLaw):
    """Finite table of (value, probability)."""

    values: tuple[float, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        v, p = np.array(self.values, float), np.array(self.probs, float)
        if v.shape != p.shape or v.size == 0:
            raise ValueError("empirical law needs matching nonempty value/probability lists")
        if np.any(v < 0) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("empirical law needs nonnegative values and probabilities summing to 1")
        if np.any(np.diff(v) <= 0):
            raise ValueError("empirical values must be strictly increasing")

    def cdf(self, t):
        t = _arr(t)
        cum = np.cumsum(self.probs)
        k = np.searchsorted(np.array(self.values), t, side="right")
        return np.where(k > 0, cum[np.maximum(k - 1, 0)], 0.0)

    def sf_left(self, t):
        t = _arr(t)
        k = np.searchsorted(np.array(self.values), t, side="left")
        tail = np.concatenate([np.cumsum(self.probs[::-1])[::-1], [0.0]])
        return tail[k]

    def ppf(self, u):
        cum = np.cumsum(self.probs)
        k = np.searchsorted(cum, _arr(u), side="right")
        return np.array(self.values)[np.minimum(k, len(self.values) - 1)]

    @property
    def mean(self):
        return float(np.dot(self.values, self.probs))

    @property
    def upper(self):
        return self.values[-1]

    def atoms(self):
        return tuple((v, p) for v, p in zip(self.values, self.probs) if p > 0)

    def kinks(self):
        return tuple(self.values)

    def to_config(self):
        return {"kind": "empirical", "values": list(self.values), "probs": list(self.probs)}


def _invert(law: DurationLaw, u, iters: int = 80) -> np.ndarray:
    """Vectorized bisection for the generalized inverse of law.cdf."""
    u = _arr(u)
    hi_val = law.upper if math.isfinite(law.upper) else law.horizon(1e-15)
    lo = np.zeros_like(u)
    hi = np.full_like(u, hi_val)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = law.cdf(mid) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return hi


@dataclass(frozen=True)
class SumLaw(DurationLaw):
    """Law of A + B with A, B independent."""

    first: DurationLaw
    second: DurationLaw

    @cached_property
    def _nodes(self):
        return self.first.quadrature_nodes()

    @cached_property
    def _closed(self):
        """Survival function in closed form for gamma pairs sharing a scale and exponential pairs."""
        def as_gamma(law):
            if isinstance(law, Exponential):
                return 1.0, 1.0 / law.rate
            if isinstance(law, Gamma):
                return law.shape, law.scale
            return None

        a, b = as_gamma(self.first), as_gamma(self.second)
        if a is None or b is None:
            return None
        if abs(a[1] - b[1]) <= 1e-14 * a[1]:
            return Gamma(a[0] + b[0], a[1]).sf
        if a[0] == 1.0 and b[0] == 1.0:
            r1, r2 = 1.0 / a[1], 1.0 / b[1]

            def sf(t):
                t = np.maximum(_arr(t), 0.0)
                return (r2 * np.exp(-r1 * t) - r1 * np.exp(-r2 * t)) / (r2 - r1)

            return sf
        return None

    def _expect(self, fn, t) -> np.ndarray:
        t = _arr(t)
        if self._closed is not None and fn in (self.second.cdf, self.second.sf, self.second.sf_left):
            sf = self._closed(t)
            return np.where(t < 0, 1.0, sf) if fn != self.second.cdf else np.where(t < 0, 0.0, 1.0 - sf)
        x, w = self._nodes
        flat = t.reshape(-1)
        out = np.empty(flat.shape)
        chunk = max(1, 2_000_000 // x.size)
        for i in range(0, flat.size, chunk):
            out[i:i + chunk] = fn(flat[i:i + chunk, None] - x[None, :]) @ w
        return out.reshape(t.shape)

    def cdf(self, t):
        return self._expect(self.second.cdf, t)

    def sf(self, t):
        return self._expect(self.second.sf, t)

    def sf_left(self, t):
        return self._expect(self.second.sf_left, t)

    def pdf(self, t):
        if self.second.has_density:
            return self._expect(self.second.pdf, t)
        if self.first.has_density:
            return SumLaw(self.second, self.first).pdf(t)
        return super().pdf(t)

    @property
    def has_density(self):
        return self.first.has_density or self.second.has_density

    def atoms(self):
        if self.has_density:
            return ()
        acc: dict[float, float] = {}
        for a, p in self.first.atoms():
            for b, q in self.second.atoms():
                acc[a + b] = acc.get(a + b, 0.0) + p * q
        return tuple(sorted(acc.items()))

    def ppf(self, u):
        return _invert(self, u)

    def sample(self, rng, size=None):
        return self.first.sample(rng, size) + self.second.sample(rng, size)

    @property
    def mean(self):
        return self.first.mean + self.second.mean

    @property
    def upper(self):
        return self.first.upper + self.second.upper

    def kinks(self):
        ka = self.first.kinks() or (0.0,)
        kb = self.second.kinks() or (0.0,)
        return tuple(sorted({a + b for a in ka for b in kb}))

    def to_config(self):
        return {"kind": "sum", "first": self.first.to_config(), "second": self.second.to_config()}


@dataclass(frozen=True)
class Mixture(DurationLaw):
    components: tuple[DurationLaw, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.components) != len(self.weights) or not self.components:
            raise ValueError("mixture needs matching components and weights")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError("mixture weights must be nonnegative and sum to 1")

    def _mix(self, name: str, t):
        return sum(w * getattr(c, name)(t) for c, w in zip(self.components, self.weights))

    def cdf(self, t):
        return self._mix("cdf", t)

    def sf(self, t):
        return self._mix("sf", t)

    def sf_left(self, t):
        return self._mix("sf_left", t)

    def pdf(self, t):
        return self._mix("pdf", t)

    @property
    def has_density(self):
        return all(c.has_density for c in self.components)

    def atoms(self):
        acc: dict[float, float] = {}
        for c, w in zip(self.components, self.weights):
            for v, p in c.atoms():
                acc[v] = acc.get(v, 0.0) + w * p
        return tuple(sorted(acc.items()))

    def ppf(self, u):
        return _invert(self, u)

    def sample(self, rng, size=None):
        pick = rng.choice(len(self.components), size=size, p=self.weights)
        out = np.empty(np.shape(pick))
        for k, c in enumerate(self.components):
            mask = pick == k
            out[mask] = c.sample(rng, int(mask.sum()))
        return out

    @property
    def mean(self):
        return sum(w * c.mean for c, w in zip(self.components, self.weights))

    @property
    def upper(self):
        return max(c.upper for c, w in zip(self.components, self.weights) if w > 0)

    def kinks(self):
        return tuple(sorted({k for c in self.components for k in c.kinks()}))

    def to_config(self):
        return {
            "kind": "mixture",
            "components": [c.to_config() for c in self.components],
            "weights": list(self.weights),
        }


def truncation_horizon(*curves, tol: float = TAIL_TOL, cap: float = TAIL_CAP) -> float:
    """Smallest T at which every curve is below tol, capped at `cap`.

    Curves are assumed eventually decreasing; the answer is located by
    doubling followed by bisection.
    """

    def small(t: float) -> bool:
        return all(float(np.max(np.abs(c(np.array([t]))))) < tol for c in curves)

    t = 1.0
    while not small(t):
        if t >= cap:
            return cap
        t = min(2 * t, cap)
    lo = 0.0 if t == 1.0 else t / 2
    if small(lo):
        return lo
    for _ in range(50):
        mid = 0.5 * (lo + t)
        if small(mid):
            t = mid
        else:
            lo = mid
    return t


def law_from_config(cfg: dict) -> DurationLaw:
    """Build a duration law from its scenario-file table."""
    cfg = dict(cfg)
    kind = cfg.pop("kind", None)
    builders = {
        "exponential": lambda c: Exponential(float(c.pop("rate"))),
        "deterministic": lambda c: Deterministic(float(c.pop("value"))),
        "gamma": lambda c: Gamma(float(c.pop("shape")), float(c.pop("scale"))),
        "uniform": lambda c: Uniform(float(c.pop("low")), float(c.pop("high"))),
        "beta-shifted": lambda c: ShiftedBeta(
            float(c.pop("base")), float(c.pop("span")), float(c.pop("a", 2.0)), float(c.pop("b", 2.0))
        ),
        "empirical": lambda c: Empirical(
            tuple(float(v) for v in c.pop("values")), tuple(float(p) for p in c.pop("probs"))
        ),
        "sum": lambda c: SumLaw(law_from_config(c.pop("first")), law_from_config(c.pop("second"))),
        "mixture": lambda c: Mixture(
            tuple(law_from_config(x) for x in c.pop("components")),
            tuple(float(w) for w in c.pop("weights")),
        ),
    }
    if kind not in builders:
        raise ValueError(f"unknown duration law kind {kind!r}")
    try:
        law = builders[kind](cfg)
    except KeyError as exc:
        raise ValueError(f"duration law {kind!r} is missing field {exc.args[0]!r}") from None
    if cfg:
        raise ValueError(f"unknown keys for {kind!r} law: {sorted(cfg)}")
    return law


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class Path:
    """Piecewise-linear function of age, stored as knots.

    On ``[breaks[k], breaks[k+1])`` the value runs linearly from ``starts[k]``
    to ``ends[k]``; past the last break it equals ``tail``; it is 0 for
    negative ages.  Jumps are allowed between segments.
    """

    breaks: tuple[float, ...]
    starts: tuple[float, ...]
    ends: tuple[float, ...]
    tail: float = 0.0

    def __post_init__(self):
        if len(self.breaks) != len(self.starts) + 1 or len(self.starts) != len(self.ends):
            raise ValueError("path needs len(breaks) == len(starts) + 1 == len(ends) + 1")
        if self.breaks[0] != 0.0 or any(b > a for a, b in zip(self.breaks[1:], self.breaks)):
            raise ValueError("path breaks must start at 0 and be nondecreasing")

    @classmethod
    def constant(cls, value: float, length: float) -> Path:
        return cls((0.0, float(length)), (float(value),), (float(value),))

    @classmethod
    def zero(cls) -> Path:
        return cls((0.0,), (), ())

    def _eval(self, t, side: str) -> np.ndarray:
        t = _arr(t)
        b = np.asarray(self.breaks)
        nseg = len(self.starts)
        out = np.full(t.shape, float(self.tail))
        if nseg:
            k = np.searchsorted(b, t, side=side) - 1
            inside = (k >= 0) & (k < nseg)
            kk = np.clip(k, 0, nseg - 1)
            s0, e0 = np.asarray(self.starts)[kk], np.asarray(self.ends)[kk]
            width = b[kk + 1] - b[kk]
            frac = np.where(width > 0, (t - b[kk]) / np.where(width > 0, width, 1.0), 0.0)
            out = np.where(inside, s0 + (e0 - s0) * frac, out)
        zero = t < 0 if side == "right" else t <= 0
        return np.where(zero, 0.0, out)

    def __call__(self, t) -> np.ndarray:
        return self._eval(t, "right")

    def left(self, t) -> np.ndarray:
        """Left limits p(t-)."""
        return self._eval(t, "left")

    def segments(self) -> Iterator[tuple[float, float, float, float]]:
        for k in range(len(self.starts)):
            yield self.breaks[k], self.breaks[k + 1], self.starts[k], self.ends[k]

    @property
    def peak(self) -> float:
        return max([self.tail, *self.starts, *self.ends, 0.0])

    @property
    def period(self) -> float:
        """sup{t : p(t) > 0}."""
        if self.tail > 0:
            return math.inf
        for t0, t1, v0, v1 in reversed(list(self.segments())):
            if t1 > t0 and max(v0, v1) > 0:
                return t1
        return 0.0

    @property
    def onset(self) -> float:
        """inf{t : p(t) > 0}."""
        for t0, t1, v0, v1 in self.segments():
            if t1 > t0 and max(v0, v1) > 0:
                return t0
        return self.breaks[-1] if self.tail > 0 else math.inf

    def delayed(self, d: float) -> Path:
        """Age shift to the right: q(t) = p(t - d)."""
        if d <= 0:
            return self
        return Path(
            (0.0,) + tuple(d + b for b in self.breaks),
            (0.0,) + self.starts,
            (0.0,) + self.ends,
            self.tail,
        )

    def advanced(self, s: float) -> Path:
        """Age shift to the left: q(t) = p(t + s)."""
        if s <= 0:
            return self
        breaks, starts, ends = [0.0], [], []
        for t0, t1, v0, v1 in self.segments():
            if t1 <= s:
                continue
            lo = max(t0, s)
            frac = (lo - t0) / (t1 - t0) if t1 > t0 else 0.0
            starts.append(v0 + (v1 - v0) * frac)
            ends.append(v1)
            breaks.append(t1 - s)
        return Path(tuple(breaks), tuple(starts), tuple(ends), self.tail)

    def integral(self) -> float:
        if self.tail > 0:
            return math.inf
        return sum(0.5 * (v0 + v1) * (t1 - t0) for t0, t1, v0, v1 in self.segments())

    def to_config(self) -> dict:
        return {"breaks": list(self.breaks), "starts": list(self.starts), "ends": list(self.ends), "tail": self.tail}


def step_waning(delay: float) -> Path:
    """g(t) = 1{t >= delay}: full susceptibility returns after a fixed delay."""
    return Path((0.0, float(delay)), (0.0,), (0.0,), tail=1.0)


def ramp_waning(delay: float, width: float) -> Path:
    """g rises linearly from 0 at `delay` to 1 at `delay + width`."""
    return Path((0.0, float(delay), float(delay + width)), (0.0, 0.0), (0.0, 1.0), tail=1.0)


# ---------------------------------------------------------------------------
# infectivity laws


class InfectivityLaw(ABC):
    """Generator of random infectivity trajectories lambda(.) in [0, bound]."""

    @property
    @abstractmethod
    def bound(self) -> float: ...

    @abstractmethod
    def sample(self, rng: np.random.Generator) -> Path: ...

    @abstractmethod
    def mean(self, t, left: bool = False) -> np.ndarray:
        """Exact (or quadrature) mean curve; `left` gives left limits."""

    @property
    @abstractmethod
    def period_law(self) -> DurationLaw:
        """Law of eta = sup{t : lambda(t) > 0}."""

    @abstractmethod
    def to_config(self) -> dict: ...

    def sample_many(self, rng: np.random.Generator, n: int) -> list[Path]:
        return [self.sample(rng) for _ in range(n)]

    def evaluate(self, rng: np.random.Generator, n: int, t) -> np.ndarray:
        """Values of n fresh trajectories on the ages t, shape (n, len(t))."""
        t = _arr(t)
        return np.stack([p(t) for p in self.sample_many(rng, n)]) if n else np.zeros((0, t.size))

    def sample_alive(self, rng: np.random.Generator, age: float, max_tries: int = 100_000) -> Path:
        """Trajectory conditioned on eta > age, seen from that age on."""
        for _ in range(max_tries):
            p = self.sample(rng)
            if p.period > age:
                return p.advanced(age)
        raise RuntimeError(f"could not draw a trajectory alive at age {age}")

    def kinks(self) -> tuple[float, ...]:
        return self.period_law.kinks()

    def horizon(self) -> float:
        return truncation_horizon(self.mean, self.period_law.sf)


@dataclass(frozen=True)
class ConstantInfectivity(InfectivityLaw):
    """The classical case lambda(t) = rate * 1{t < eta}."""

    rate: float
    period: DurationLaw

    def __post_init__(self):
        if not self.rate >= 0:
            raise ValueError("infection rate must be nonnegative")

    @property
    def bound(self):
        return self.rate

    def sample(self, rng):
        return Path.constant(self.rate, float(self.period.sample(rng)))

    def sample_many(self, rng, n):
        return [Path.constant(self.rate, eta) for eta in self.period.sample(rng, n)]

    def evaluate(self, rng, n, t):
        eta = self.period.sample(rng, n)
        return self.rate * (_arr(t)[None, :] < eta[:, None])

    def sample_alive(self, rng, age, max_tries=0):
        lo = float(self.period.cdf(age))
        eta = float(self.period.ppf(lo + (1.0 - lo) * rng.random()))
        return Path.constant(self.rate, max(eta - age, 0.0))

    def mean(self, t, left=False):
        return self.rate * (self.period.sf_left(t) if left else self.period.sf(t))

    @property
    def period_law(self):
        return self.period

    def to_config(self):
        return {"kind": "constant", "rate": self.rate, "period": self.period.to_config()}


@dataclass(frozen=True)
class LatentInfectivity(InfectivityLaw):
    """lambda(t) = rate * 1{xi <= t < xi + eta}: an exposed phase then an infectious one."""

    rate: float
    latent: DurationLaw
    period: DurationLaw

    @property
    def bound(self):
        return self.rate

    @cached_property
    def _total(self) -> SumLaw:
        return SumLaw(self.latent, self.period)

    def sample(self, rng):
        xi = float(self.latent.sample(rng))
        eta = float(self.period.sample(rng))
        return Path((0.0, xi, xi + eta), (0.0, self.rate), (0.0, self.rate))

    def evaluate(self, rng, n, t):
        xi = self.latent.sample(rng, n)[:, None]
        eta = self.period.sample(rng, n)[:, None]
        t = _arr(t)[None, :]
        return self.rate * ((t >= xi) & (t < xi + eta))

    def mean(self, t, left=False):
        if left:
            return self.rate * (self.latent.cdf_left(t) - self._total.cdf_left(t))
        return self.rate * (self.latent.cdf(t) - self._total.cdf(t))

    @property
    def period_law(self):
        return self._total

    def to_config(self):
        return {
            "kind": "latent",
            "rate": self.rate,
            "latent": self.latent.to_config(),
            "period": self.period.to_config(),
        }


@dataclass(frozen=True)
class CovidProfile(InfectivityLaw):
    """Piecewise-linear profile: silent until zeta, linear rise over eta/5, linear decay to 0 at zeta + eta.

    zeta = 2 + 2 X1; eta = 3 + X2 for reported cases (peak `peak`) and
    8 + 4 X2 for unreported ones (peak `alpha * peak`); X1, X2 ~ Beta(2,2).
    """

    alpha: float = 0.5
    p_rep: float = 0.8
    peak: float = 1.0
    rise: float = 0.2

    def __post_init__(self):
        if not (0 < self.alpha <= 1 and 0 <= self.p_rep <= 1 and self.peak > 0 and 0 < self.rise < 1):
            raise ValueError("invalid CovidProfile parameters")

    onset_law = ShiftedBeta(2.0, 2.0)
    reported_law = ShiftedBeta(3.0, 1.0)
    unreported_law = ShiftedBeta(8.0, 4.0)

    @property
    def bound(self):
        return self.peak

    def _draw(self, rng, n):
        u = rng.random((n, 3))
        reported = u[:, 0] < self.p_rep
        zeta = self.onset_law.ppf(u[:, 1])
        eta = np.where(reported, self.reported_law.ppf(u[:, 2]), self.unreported_law.ppf(u[:, 2]))
        top = np.where(reported, self.peak, self.alpha * self.peak)
        return zeta, eta, top

    def _path(self, zeta, eta, top) -> Path:
        zeta, eta, top = float(zeta), float(eta), float(top)
        return Path(
            (0.0, zeta, zeta + self.rise * eta, zeta + eta),
            (0.0, 0.0, top),
            (0.0, top, 0.0),
        )

    def sample(self, rng):
        return self._path(*(x[0] for x in self._draw(rng, 1)))

    def sample_many(self, rng, n):
        return [self._path(*args) for args in zip(*self._draw(rng, n))]

    def evaluate(self, rng, n, t):
        zeta, eta, top = (x[:, None] for x in self._draw(rng, n))
        return self._profile(_arr(t)[None, :] - zeta, eta, top)

    def _profile(self, age, eta, top):
        up = age / (self.rise * eta)
        down = (eta - age) / ((1.0 - self.rise) * eta)
        return np.where((age >= 0) & (age < eta), top * np.minimum(up, down), 0.0)

    @cached_property
    def _age_tables(self):
        # E over eta of the profile measured from onset, per case type
        grid = np.linspace(0.0, self.unreported_law.upper, 6001)
        nodes = _midpoints(1000)
        tables = []
        for law, top, w in (
            (self.reported_law, self.peak, self.p_rep),
            (self.unreported_law, self.alpha * self.peak, 1.0 - self.p_rep),
        ):
            eta = law.ppf(nodes)
            tables.append((w, self._profile(grid[:, None], eta[None, :], top).mean(axis=1)))
        return grid, tables

    def mean(self, t, left=False):
        t = _arr(t)
        grid, tables = self._age_tables
        zeta = self.onset_law.ppf(_midpoints(1000))
        flat = t.reshape(-1)
        out = np.zeros(flat.shape)
        for i in range(0, flat.size, 2000):
            age = flat[i:i + 2000, None] - zeta[None, :]
            for w, h in tables:
                out[i:i + 2000] += w * np.interp(age, grid, h, left=0.0, right=0.0).mean(axis=1)
        return out.reshape(t.shape)

    @property
    def period_law(self):
        return Mixture(
            (SumLaw(self.onset_law, self.reported_law), SumLaw(self.onset_law, self.unreported_law)),
            (self.p_rep, 1.0 - self.p_rep),
        )

    def kinks(self):
        return (2.0, 4.0, 5.0, 8.0, 10.0, 16.0)

    def to_config(self):
        return {"kind": "covid", "alpha": self.alpha, "p_rep": self.p_rep, "peak": self.peak, "rise": self.rise}


def infectivity_from_config(cfg: dict) -> InfectivityLaw:
    cfg = dict(cfg)
    kind = cfg.pop("kind", None)
    try:
        if kind == "constant":
            law = ConstantInfectivity(float(cfg.pop("rate")), law_from_config(cfg.pop("period")))
        elif kind == "latent":
            law = LatentInfectivity(
                float(cfg.pop("rate")), law_from_config(cfg.pop("latent")), law_from_config(cfg.pop("period"))
            )
        elif kind == "covid":
            law = CovidProfile(**{k: float(cfg.pop(k)) for k in ("alpha", "p_rep", "peak", "rise") if k in cfg})
        else:
            raise ValueError(f"unknown infectivity law kind {kind!r}")
    except KeyError as exc:
        raise ValueError(f"infectivity law {kind!r} is missing field {exc.args[0]!r}") from None
    if cfg:
        raise ValueError(f"unknown keys for {kind!r} infectivity law: {sorted(cfg)}")
    return law


# ---------------------------------------------------------------------------
# susceptibility laws


class SusceptibilityLaw(ABC):
    """Generator of paired (lambda, gamma) trajectories with gamma = 0 while infectious."""

    infectivity: InfectivityLaw

    @abstractmethod
    def susceptibility(self, infectivity: Path) -> Path:
        """Susceptibility trajectory paired with a drawn infectivity trajectory."""

    def sample_pair(self, rng: np.random.Generator) -> tuple[Path, Path]:
        lam = self.infectivity.sample(rng)
        return lam, self.susceptibility(lam)

    def evaluate(self, rng: np.random.Generator, n: int, t) -> np.ndarray:
        t = _arr(t)
        return np.stack([self.susceptibility(p)(t) for p in self.infectivity.sample_many(rng, n)])


@dataclass(frozen=True)
class DeterministicWaning(SusceptibilityLaw):
    """gamma(t) = g(t - eta) with eta the end of the paired infectivity trajectory."""

    infectivity: InfectivityLaw
    waning: Path

    def __post_init__(self):
        g = self.waning
        if any(v < 0 or v > 1 for v in (*g.starts, *g.ends, g.tail)):
            raise ValueError("waning curve must take values in [0, 1]")

    def susceptibility(self, infectivity):
        return self.waning.delayed(infectivity.period)

    def evaluate(self, rng, n, t):
        eta = self.infectivity.period_law.sample(rng, n)
        return self.waning(_arr(t)[None, :] - eta[:, None])

    def to_config(self) -> dict:
        return {"infectivity": self.infectivity.to_config(), "waning": self.waning.to_config()}


@dataclass(frozen=True)
class InitialImmunity:
    """Initial-state mixture: naive (gamma0 = 1), infected, or recovered.

    Initially infected individuals draw lambda0 from `infectivity` and then
    wane like everyone else; initially recovered ones have been recovered for
    a time drawn from `recovered_age` (immediately susceptible again if None).
    """

    susceptible: float
    infected: float
    recovered: float
    infectivity: InfectivityLaw
    waning: Path
    recovered_age: DurationLaw | None = None

    def __post_init__(self):
        fr = (self.susceptible, self.infected, self.recovered)
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError("initial fractions must be nonnegative and sum to 1")

    def infected_pair(self, rng: np.random.Generator) -> tuple[Path, Path]:
        lam = self.infectivity.sample(rng)
        return lam, self.waning.delayed(lam.period)

    def recovered_susceptibility(self, rng: np.random.Generator) -> Path:
        age = 0.0 if self.recovered_age is None else float(self.recovered_age.sample(rng))
        return self.waning.advanced(age)


# ---------------------------------------------------------------------------
# operations


@lru_cache(maxsize=64)
def _mean_curve_cached(law, mesh: TimeMesh, samples: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    t = mesh.times
    total = np.zeros(t.size)
    done = 0
    while done < samples:
        n = min(20_000, samples - done)
        total += law.evaluate(rng, n, t).sum(axis=0)
        done += n
    out = total / samples
    out.setflags(write=False)
    return out


def mean_curve(law: InfectivityLaw | SusceptibilityLaw, mesh: TimeMesh, samples: int, seed: int = 0) -> np.ndarray:
    """Monte Carlo average of `samples` trajectories on the mesh (cached)."""
    if samples < 1:
        raise ValueError("mean_curve needs at least one sample")
    return _mean_curve_cached(law, mesh, int(samples), int(seed))


def gauss_legendre_panels(upper: float, kinks: Sequence[float] = (), panels: int = 4000, order: int = 8):
    """Panel edges, nodes (panels, order) and weights for composite Gauss-Legendre on [0, upper].

    Panels are split at the kinks so that piecewise-smooth integrands keep
    full order.
    """
    edges = np.unique(np.concatenate([[0.0, upper], [k for k in kinks if 0 < k < upper]]))
    widths = np.diff(edges)
    per = np.maximum(1, np.ceil(panels * widths / upper).astype(int))
    pts = np.unique(np.concatenate([np.linspace(a, b, m + 1) for a, b, m in zip(edges[:-1], edges[1:], per)]))
    x, w = np.polynomial.legendre.leggauss(order)
    lo, hi = pts[:-1, None], pts[1:, None]
    nodes = 0.5 * (hi - lo) * x[None, :] + 0.5 * (hi + lo)
    return pts, nodes, w[None, :] * 0.5 * (hi - lo)


def integrate(fn, upper: float, kinks: Sequence[float] = (), panels: int = 4000, order: int = 8) -> float:
    """Composite Gauss-Legendre quadrature of fn on [0, upper], split at kinks."""
    if upper <= 0:
        return 0.0
    _, nodes, weights = gauss_legendre_panels(upper, kinks, panels, order)
    vals = fn(nodes.reshape(-1)).reshape(nodes.shape)
    return float(np.sum(vals * weights))


class TruncationError(RuntimeError):
    pass


def basic_reproduction_number(law: InfectivityLaw, tol: float = 1e-9) -> float:
    """R0 = integral of the mean infectivity curve."""
    upper = law.horizon()
    tail = float(law.mean(np.array([upper]))[0])
    if upper >= TAIL_CAP and tail * 1.0 > tol:
        raise TruncationError(f"mean infectivity still {tail:.3g} at the truncation cap")
    return integrate(law.mean, upper, law.kinks())
