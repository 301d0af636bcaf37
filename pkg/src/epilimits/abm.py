"""Exact event-driven simulation of the individual-based epidemic models.

All engines are driven by independent random streams spawned from a single
master seed (one stream per role: infection candidates, law draws, initial
state, migrations), so a run is a deterministic function of (spec, seed).

Infections are generated by thinning: candidate points arrive at a rate that
dominates the true infection rate between two scheduled events, and each is
accepted with probability (true rate) / (dominating rate).  The dominating
rate used here is the local bound lambda* I S / N, which is tighter than the
global lambda* N and gives the same law.
"""
from __future__ import annotations

import hashlib
import heapq
import json
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .laws import (
    ConstantInfectivity,
    DurationLaw,
    InfectivityLaw,
    InitialImmunity,
    Path,
    SusceptibilityLaw,
)
from .mesh import TimeMesh
from .volterra import AgeProfile, IndependentPair, JointTable, PatchNetwork

__all__ = [
    "FAMILIES",
    "ModelSpec",
    "Trajectory",
    "Ensemble",
    "BoundViolation",
    "ExtinctionCensored",
    "PopulationCapExceeded",
    "simulate",
    "replicate",
    "extinction_time",
]

FAMILIES = (
    "markov-sir",
    "markov-sis",
    "markov-sirs",
    "markov-sir-demography",
    "nonmarkov-sir",
    "nonmarkov-seir",
    "varying-infectivity",
    "varying-susceptibility",
    "multipatch",
)
MARKOV = FAMILIES[:4]
_RATES = {
    "markov-sir": ("lam", "gamma"),
    "markov-sis": ("lam", "gamma"),
    "markov-sirs": ("lam", "gamma", "rho"),
    "markov-sir-demography": ("lam", "gamma", "mu"),
    "nonmarkov-sir": ("lam",),
    "nonmarkov-seir": ("lam",),
}
POPULATION_CAP = 4
BLOCK = 4096


class BoundViolation(RuntimeError):
    """An accepted candidate had a true rate above the dominating rate."""


class ExtinctionCensored(RuntimeError):
    """The infection did not die out before the configured cap."""

    def __init__(self, cap: float, infected: int):
        super().__init__(f"still {infected} infected at the cap t={cap:g}")
        self.cap = cap
        self.infected = infected


class PopulationCapExceeded(RuntimeError):
    """The demography population grew beyond its bookkeeping cap."""


def _config_of(obj):
    if obj is None:
        return None
    if hasattr(obj, "to_config"):
        return obj.to_config()
    return obj


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A fully specified individual-based model.

    `init` holds compartment counts (S, E, I, R), or per-patch lists for the
    multipatch family.  Laws not needed by the family must be left unset.
    Initially infected individuals either draw their remaining infectivity
    from `initial_infectivity` / `initial_period`, or get infection ages from
    `age_profile` and are conditioned on still being infected at that age.
    """

    family: str
    N: int
    init: Mapping[str, Any]
    params: Mapping[str, float] = field(default_factory=dict)
    period: DurationLaw | None = None
    initial_period: DurationLaw | None = None
    infectivity: InfectivityLaw | None = None
    initial_infectivity: InfectivityLaw | None = None
    seir: IndependentPair | JointTable | None = None
    initial_exposed: IndependentPair | JointTable | None = None
    susceptibility: SusceptibilityLaw | None = None
    immunity: InitialImmunity | None = None
    network: PatchNetwork | None = None
    age_profile: AgeProfile | None = None
    log_events: bool = False

    def __post_init__(self):
        self.validate()

    # -- validation -------------------------------------------------------

    def validate(self) -> None:
        fam = self.family
        if fam not in FAMILIES:
            raise ValueError(f"unknown family {fam!r}")
        if not isinstance(self.N, (int, np.integer)) or self.N < 1:
            raise ValueError("N must be a positive integer")
        for k, v in self.params.items():
            if not (isinstance(v, (int, float)) and v >= 0 and math.isfinite(v)):
                raise ValueError(f"parameter {k} must be a finite nonnegative number")
        need = _RATES.get(fam, ())
        missing = [k for k in need if k not in self.params]
        if missing:
            raise ValueError(f"{fam} needs parameters {missing}")
        extra = set(self.params) - set(need)
        if extra:
            raise ValueError(f"{fam} does not use parameters {sorted(extra)}")
        if fam == "multipatch":
            self._validate_patches()
            return
        if fam == "varying-susceptibility":
            if self.susceptibility is None or self.immunity is None:
                raise ValueError("varying-susceptibility needs susceptibility and immunity laws")
            return
        counts = self.counts
        if any(v < 0 for v in counts.values()):
            raise ValueError("compartment counts must be nonnegative")
        if fam != "markov-sir-demography" and sum(counts.values()) != self.N:
            raise ValueError(f"compartment counts sum to {sum(counts.values())}, not N={self.N}")
        if counts["E"] and fam != "nonmarkov-seir":
            raise ValueError(f"{fam} has no exposed compartment")
        if fam == "nonmarkov-sir" and self.period is None:
            raise ValueError("nonmarkov-sir needs an infectious-period law")
        if fam == "varying-infectivity" and self.infectivity is None:
            raise ValueError("varying-infectivity needs an infectivity law")
        if fam == "nonmarkov-seir" and self.seir is None:
            raise ValueError("nonmarkov-seir needs a joint (exposed, infectious) law")
        if self.age_profile is not None:
            if fam not in ("nonmarkov-sir", "varying-infectivity"):
                raise ValueError("age profiles are supported for nonmarkov-sir and varying-infectivity")
            if self.initial_period is not None or self.initial_infectivity is not None:
                raise ValueError("give either an age profile or an initial law, not both")

    def _validate_patches(self) -> None:
        if self.network is None or self.period is None:
            raise ValueError("multipatch needs a patch network and an infectious-period law")
        L = self.network.size
        tot = 0
        for k in ("S", "I", "R"):
            v = self.init.get(k, [0] * L)
            if len(v) != L or any(int(x) != x or x < 0 for x in v):
                raise ValueError(f"multipatch init {k} must be {L} nonnegative integers")
            tot += sum(int(x) for x in v)
        if tot != self.N:
            raise ValueError(f"patch counts sum to {tot}, not N={self.N}")

    # -- helpers ----------------------------------------------------------

    @property
    def counts(self) -> dict[str, int]:
        out = {}
        for k in ("S", "E", "I", "R"):
            v = self.init.get(k, 0)
            if int(v) != v:
                raise ValueError(f"count {k} must be an integer")
            out[k] = int(v)
        return out

    @property
    def lam_star(self) -> float:
        fam = self.family
        if fam in ("markov-sir", "markov-sis", "markov-sirs", "markov-sir-demography", "nonmarkov-sir", "nonmarkov-seir"):
            return float(self.params["lam"])
        if fam == "varying-infectivity":
            return max(self.infectivity.bound, (self.initial_infectivity or self.infectivity).bound)
        if fam == "varying-susceptibility":
            return max(self.susceptibility.infectivity.bound, self.immunity.infectivity.bound)
        return max(self.network.lam) * max(1.0, max(max(r) for r in self.network.kappa))

    def to_config(self) -> dict:
        cfg = {"family": self.family, "N": int(self.N), "init": {k: v for k, v in self.init.items()}}
        if self.params:
            cfg["params"] = dict(self.params)
        for name in (
            "period",
            "initial_period",
            "infectivity",
            "initial_infectivity",
            "seir",
            "initial_exposed",
            "susceptibility",
            "immunity",
            "network",
            "age_profile",
        ):
            val = getattr(self, name)
            if val is not None:
                cfg[name] = _immunity_config(val) if name == "immunity" else _config_of(val)
        return cfg

    def digest(self) -> str:
        text = json.dumps(self.to_config(), sort_keys=True, default=_json_default)
        return hashlib.sha256(text.encode()).hexdigest()


def _immunity_config(im: InitialImmunity) -> dict:
    return {
        "susceptible": im.susceptible,
        "infected": im.infected,
        "recovered": im.recovered,
        "infectivity": im.infectivity.to_config(),
        "waning": im.waning.to_config(),
        "recovered_age": None if im.recovered_age is None else im.recovered_age.to_config(),
    }


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


@dataclass
class Trajectory:
    """Counts on the record mesh plus force of infection and cumulative infections.

    Counts are integer arrays of shape (nodes,) or (nodes, patches).
    """

    mesh: TimeMesh
    N: int
    counts: dict[str, np.ndarray]
    F: np.ndarray
    A: np.ndarray
    seed: int
    digest: str
    event_counts: dict[str, int]
    events: list[tuple[float, int, str]] | None = None
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def t(self) -> np.ndarray:
        return self.mesh.times

    def fraction(self, name: str) -> np.ndarray:
        if name == "F":
            return self.F / self.N
        if name == "A":
            return self.A / self.N
        if name in self.extra:
            return self.extra[name]
        return self.counts[name] / self.N

    def __getitem__(self, name: str) -> np.ndarray:
        return self.fraction(name)


class _Recorder:
    def __init__(self, mesh: TimeMesh, horizon: float, width: int | None = None):
        self.times = mesh.times[mesh.times <= horizon * (1 + 1e-12)]
        if self.times.size != mesh.size + 1:
            raise ValueError("record mesh extends beyond the simulation horizon")
        shape = (self.times.size,) if width is None else (self.times.size, width)
        self.rows = {k: np.zeros(shape, dtype=np.int64) for k in ("S", "E", "I", "R")}
        self.F = np.zeros(shape)
        self.A = np.zeros(shape, dtype=np.int64)
        self.extra: dict[str, np.ndarray] = {}
        self.k = 0

    @property
    def next(self) -> float:
        return self.times[self.k] if self.k < self.times.size else math.inf

    def put(self, S, E, I, R, F, A, **extra):
        k = self.k
        self.rows["S"][k], self.rows["E"][k], self.rows["I"][k], self.rows["R"][k] = S, E, I, R
        self.F[k], self.A[k] = F, A
        for name, v in extra.items():
            self.extra.setdefault(name, np.zeros(self.times.size))[k] = v
        self.k += 1

    def fill_rest(self, *state, **extra):
        while self.k < self.times.size:
            self.put(*state, **extra)


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    if not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ValueError("seed must be a nonnegative integer")
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(n)]


class _Uniforms:
    """Block-buffered uniforms from one stream."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.buf = rng.random(BLOCK)
        self.i = 0

    def __call__(self) -> float:
        if self.i == BLOCK:
            self.buf = self.rng.random(BLOCK)
            self.i = 0
        u = self.buf[self.i]
        self.i += 1
        return u

    def exp(self, rate: float) -> float:
        return -math.log(1.0 - self()) / rate


# ---------------------------------------------------------------------------
# markov-sir: Sellke construction


def _sellke(spec: ModelSpec, horizon: float, seed: int, mesh: TimeMesh) -> Trajectory:
    """Exact markov-sir path from thresholds and periods.

    Susceptible j has an Exp(1) threshold Q_j and gets infected when the
    pressure (lambda / N) int_0^t I(s) ds reaches it; infectious periods are
    Exp(gamma).  Raising lambda with the same draws never delays an infection.
    """
    rng_thr, rng_per, rng_init = _streams(seed, 3)
    c = spec.counts
    N = spec.N
    lam, gam = float(spec.params["lam"]), float(spec.params["gamma"])
    S0, I0, R0 = c["S"], c["I"], c["R"]
    q = np.sort(rng_thr.exponential(1.0, S0))
    periods = rng_per.exponential(1.0, S0) / gam if gam > 0 else np.full(S0, math.inf)
    init_periods = rng_init.exponential(1.0, I0) / gam if gam > 0 else np.full(I0, math.inf)
    heap = [(float(e), -1 - j) for j, e in enumerate(init_periods)]
    heapq.heapify(heap)
    rec = _Recorder(mesh, horizon)
    events = [] if spec.log_events else None
    t, I, A, R, P = 0.0, I0, 0, R0, 0.0
    rate = lam * I / N
    while True:
        t_rec = heap[0][0] if heap else math.inf
        if A < S0 and rate > 0:
            t_inf = t + (q[A] - P) / rate
        else:
            t_inf = math.inf
        t_next = min(t_rec, t_inf)
        while rec.next <= min(t_next, horizon):
            rec.put(S0 - A, 0, I, R, lam * I, A)
        if t_next > horizon:
            break
        P += rate * (t_next - t)
        t = t_next
        if t_rec <= t_inf:
            _, who = heapq.heappop(heap)
            I -= 1
            R += 1
            if events is not None:
                events.append((t, who, "recovery"))
        else:
            P = q[A]
            heapq.heappush(heap, (t + float(periods[A]), A))
            if events is not None:
                events.append((t, A, "infection"))
            A += 1
            I += 1
        rate = lam * I / N
    rec.fill_rest(S0 - A, 0, I, R, lam * I, A)
    return _finish(rec, spec, seed, mesh, {"infection": A, "recovery": R - R0}, events)


def _finish(rec: _Recorder, spec: ModelSpec, seed: int, mesh: TimeMesh, counts, events, N=None) -> Trajectory:
    return Trajectory(
        mesh,
        spec.N if N is None else N,
        rec.rows,
        rec.F,
        rec.A,
        int(seed),
        spec.digest(),
        dict(counts),
        events,
        rec.extra,
    )


# ---------------------------------------------------------------------------
# other Markov families: aggregate Gillespie


def _gillespie(spec: ModelSpec, horizon: float, seed: int, mesh: TimeMesh) -> Trajectory:
    rng_time, rng_pick = _streams(seed, 2)
    ut, up = _Uniforms(rng_time), _Uniforms(rng_pick)
    fam = spec.family
    p = spec.params
    lam, gam = float(p["lam"]), float(p["gamma"])
    rho = float(p.get("rho", 0.0))
    mu = float(p.get("mu", 0.0))
    N = spec.N
    c = spec.counts
    S, I, R = c["S"], c["I"], c["R"]
    A = 0
    cap = POPULATION_CAP * N
    tally = {"infection": 0, "recovery": 0, "immunity_loss": 0, "birth": 0, "death": 0}
    events = [] if spec.log_events else None
    rec = _Recorder(mesh, horizon)
    t = 0.0
    while True:
        r_inf = lam * S * I / N
        r_rec = gam * I
        r_loss = rho * R if fam == "markov-sirs" else 0.0
        if fam == "markov-sir-demography":
            r_birth = mu * N
            r_death = mu * (S + I + R)
        else:
            r_birth = r_death = 0.0
        total = r_inf + r_rec + r_loss + r_birth + r_death
        t_next = t + ut.exp(total) if total > 0 else math.inf
        while rec.next <= min(t_next, horizon):
            rec.put(S, 0, I, R, lam * I, A)
        if t_next > horizon:
            break
        t = t_next
        u = up() * total
        if u < r_inf:
            S -= 1
            I += 1
            A += 1
            kind = "infection"
        elif u < r_inf + r_rec:
            I -= 1
            if fam == "markov-sis":
                S += 1
            else:
                R += 1
            kind = "recovery"
        elif u < r_inf + r_rec + r_loss:
            R -= 1
            S += 1
            kind = "immunity_loss"
        elif u < r_inf + r_rec + r_loss + r_birth:
            S += 1
            kind = "birth"
            if S + I + R > cap:
                raise PopulationCapExceeded(f"population exceeded {cap} at t={t:g}")
        else:
            v = (u - r_inf - r_rec - r_loss - r_birth) / mu
            if v < S:
                S -= 1
            elif v < S + I:
                I -= 1
            else:
                R -= 1
            kind = "death"
        tally[kind] += 1
        if events is not None:
            events.append((t, -1, kind))
    rec.fill_rest(S, 0, I, R, lam * I, A)
    return _finish(rec, spec, seed, mesh, tally, events)


# ---------------------------------------------------------------------------
# varying infectivity (covers nonmarkov-sir and nonmarkov-seir)


def _segments(path: Path, start: float) -> list[tuple[float, float, float]]:
    """Absolute-time knots (time, intercept, slope) of a path started at `start`."""
    if path.tail != 0:
        raise ValueError("infectivity trajectories must vanish eventually")
    out = []
    for t0, t1, v0, v1 in path.segments():
        if t1 <= t0:
            continue
        slope = (v1 - v0) / (t1 - t0)
        out.append((start + t0, v0 - slope * (start + t0), slope))
    out.append((start + path.breaks[-1], 0.0, 0.0))
    return out


@dataclass
class _Case:
    path: Path
    onset: float  # age at which the individual counts as infectious
    end: float  # age at recovery


def _draw_constant(law: ConstantInfectivity, rng) -> _Case:
    eta = float(law.period.sample(rng))
    return _Case(Path.constant(law.rate, eta), 0.0, eta)


def _case_from_law(law: InfectivityLaw, rng) -> _Case:
    if isinstance(law, ConstantInfectivity):
        return _draw_constant(law, rng)
    p = law.sample(rng)
    return _Case(p, 0.0, p.period)


def _alive_case(law: InfectivityLaw, rng, age: float) -> _Case:
    if isinstance(law, ConstantInfectivity):
        lo = float(law.period.cdf(age))
        if lo >= 1.0:
            raise ValueError(f"no infectious period exceeds the initial age {age:g}")
        eta = float(law.period.ppf(lo + (1.0 - lo) * rng.random()))
        rem = max(eta - age, 0.0)
        return _Case(Path.constant(law.rate, rem), 0.0, rem)
    p = law.sample_alive(rng, age)
    return _Case(p, 0.0, p.period)


def _profile_ages(profile: AgeProfile, rng, n: int) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-linear age density."""
    x, d = profile.ages, profile.density
    cell = 0.5 * (d[1:] + d[:-1]) * np.diff(x)
    cdf = np.concatenate([[0.0], np.cumsum(cell)])
    if cdf[-1] <= 0:
        raise ValueError("age profile has no mass")
    u = rng.random(n) * cdf[-1]
    k = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, len(cell) - 1)
    # solve the quadratic inside the cell for a linear density
    h = x[k + 1] - x[k]
    d0, d1 = d[k], d[k + 1]
    r = u - cdf[k]
    slope = (d1 - d0) / np.where(h > 0, h, 1.0)
    lin = np.where(d0 > 0, r / np.where(d0 > 0, d0, 1.0), 0.0)
    disc = np.maximum(d0 ** 2 + 2 * slope * r, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        quad = np.where(np.abs(slope) > 1e-14, (np.sqrt(disc) - d0) / slope, lin)
    return x[k] + np.clip(quad, 0.0, h)


class _Forces:
    """Running sum of piecewise-linear infectivities, kept as intercept + slope * t."""

    def __init__(self):
        self.a = 0.0
        self.b = 0.0
        self.own: dict[int, tuple[float, float]] = {}
        self.updates = 0

    def set(self, who: int, a: float, b: float):
        oa, ob = self.own.get(who, (0.0, 0.0))
        self.a += a - oa
        self.b += b - ob
        if a == 0.0 and b == 0.0:
            self.own.pop(who, None)
        else:
            self.own[who] = (a, b)
        self.updates += 1
        if self.updates % BLOCK == 0:
            self.a = math.fsum(v[0] for v in self.own.values())
            self.b = math.fsum(v[1] for v in self.own.values())

    def at(self, t: float) -> float:
        return max(self.a + self.b * t, 0.0)


def _vi_setup(spec: ModelSpec, rng_law, rng_init):
    """New-case sampler and the initial cases for the VI-type families."""
    fam = spec.family
    c = spec.counts
    if fam == "nonmarkov-sir":
        lam = float(spec.params["lam"])
        law = ConstantInfectivity(lam, spec.period)
        law0 = ConstantInfectivity(lam, spec.initial_period or spec.period)

        def new_case():
            return _draw_constant(law, rng_law)
    elif fam == "varying-infectivity":
        law = spec.infectivity
        law0 = spec.initial_infectivity or law

        def new_case():
            return _case_from_law(law, rng_law)
    else:
        lam = float(spec.params["lam"])
        joint = spec.seir

        def pair_case(pair, rng):
            xi, eta = (float(v[0]) for v in pair.sample(rng, 1))
            return _Case(Path((0.0, xi, xi + eta), (0.0, lam), (0.0, lam)), xi, xi + eta)

        def new_case():
            return pair_case(joint, rng_law)

        if spec.initial_period is not None:
            F0 = spec.initial_period
        elif isinstance(joint, IndependentPair):
            F0 = joint.period
        else:
            raise ValueError("a joint table needs an explicit initial infectious-period law")
        exposed = spec.initial_exposed or joint
        init = [pair_case(exposed, rng_init) for _ in range(c["E"])]
        init += [_draw_constant(ConstantInfectivity(lam, F0), rng_init) for _ in range(c["I"])]
        return new_case, init
    if spec.age_profile is not None:
        ages = _profile_ages(spec.age_profile, rng_init, c["I"])
        init = [_alive_case(law, rng_init, float(a)) for a in ages]
    else:
        init = [_case_from_law(law0, rng_init) for _ in range(c["I"])]
    return new_case, init


def _vi_engine(spec: ModelSpec, horizon: float, seed: int, mesh: TimeMesh) -> Trajectory:
    rng_prm, rng_law, rng_init = _streams(seed, 3)
    U = _Uniforms(rng_prm)
    new_case, init = _vi_setup(spec, rng_law, rng_init)
    N = spec.N
    lstar = spec.lam_star
    c = spec.counts
    S, R = c["S"], c["R"]
    E = I = 0
    A = 0
    forces = _Forces()
    heap: list = []
    seq = 0
    events = [] if spec.log_events else None
    tally = {"infection": 0, "onset": 0, "recovery": 0, "rejected": 0}

    def admit(case: _Case, who: int, t0: float):
        nonlocal seq, E, I
        for when, a, b in _segments(case.path, t0):
            heapq.heappush(heap, (when, 1, seq, who, "knot", a, b))
            seq += 1
        heapq.heappush(heap, (t0 + case.end, 0, seq, who, "end", 0.0, 0.0))
        seq += 1
        if case.onset > 0:
            E += 1
            heapq.heappush(heap, (t0 + case.onset, 0, seq, who, "onset", 0.0, 0.0))
            seq += 1
        else:
            I += 1

    for j, case in enumerate(init):
        admit(case, -1 - j, 0.0)
    exposed_now: set[int] = set()
    # individuals admitted with onset > 0 are exposed until their onset event
    for j, case in enumerate(init):
        if case.onset > 0:
            exposed_now.add(-1 - j)
    active = E + I
    rec = _Recorder(mesh, horizon)
    t = 0.0
    cand = math.inf
    while True:
        # process scheduled events due now (ends before knots at equal times)
        while heap and heap[0][0] <= t:
            when, _, _, who, kind, a, b = heapq.heappop(heap)
            if kind == "knot":
                forces.set(who, a, b)
            elif kind == "onset":
                E -= 1
                I += 1
                exposed_now.discard(who)
                tally["onset"] += 1
                if events is not None:
                    events.append((when, who, "onset"))
            else:
                forces.set(who, 0.0, 0.0)
                if who in exposed_now:
                    exposed_now.discard(who)
                    E -= 1
                else:
                    I -= 1
                R += 1
                tally["recovery"] += 1
                if events is not None:
                    events.append((when, who, "recovery"))
        active = E + I
        dom = lstar * active * S / N
        t_sched = heap[0][0] if heap else math.inf
        cand = t + U.exp(dom) if dom > 0 else math.inf
        t_next = min(cand, t_sched)
        while rec.next <= min(t_next, horizon) and rec.next < t_next:
            rec.put(S, E, I, R, forces.at(rec.next), A)
        if t_next > horizon:
            break
        if t_sched <= cand:
            t = t_sched
            continue
        t = cand
        f = forces.at(t)
        bound = lstar * active
        if f > bound * (1 + 1e-9) + 1e-12:
            raise BoundViolation(f"force {f:.6g} exceeds lambda* x active = {bound:.6g} at t={t:g}")
        if U() * bound < f:
            case = new_case()
            who = A
            S -= 1
            A += 1
            tally["infection"] += 1
            if case.onset > 0:
                exposed_now.add(who)
            admit(case, who, t)
            if events is not None:
                events.append((t, who, "infection"))
        else:
            tally["rejected"] += 1
        # knots scheduled at the infection time itself are applied on the next pass
    rec.fill_rest(S, E, I, R, forces.at(horizon), A)
    return _finish(rec, spec, seed, mesh, tally, events)


# ---------------------------------------------------------------------------
# varying susceptibility


def _pv(path: Path, age: float) -> float:
    """Scalar right-continuous evaluation of a path."""
    if age < 0:
        return 0.0
    br = path.breaks
    k = bisect_right(br, age) - 1
    if k >= len(path.starts):
        return path.tail
    t0, t1 = br[k], br[k + 1]
    v0, v1 = path.starts[k], path.ends[k]
    return v0 if t1 <= t0 else v0 + (v1 - v0) * (age - t0) / (t1 - t0)


_ONE = Path((0.0,), (), (), tail=1.0)


def _vivs_engine(spec: ModelSpec, horizon: float, seed: int, mesh: TimeMesh) -> Trajectory:
    rng_prm, rng_law, rng_init, rng_pick = _streams(seed, 4)
    U = _Uniforms(rng_prm)
    P = _Uniforms(rng_pick)
    sus = spec.susceptibility
    im = spec.immunity
    N = spec.N
    lstar = spec.lam_star
    n_inf0 = int(round(im.infected * N))
    n_rec0 = int(round(im.recovered * N))
    n_sus0 = N - n_inf0 - n_rec0
    if n_sus0 < 0:
        raise ValueError("initial immunity fractions do not fit in N")
    gamma = [None] * N  # susceptibility path per individual
    ref = np.zeros(N)  # time origin of that path
    counter = np.zeros(N, dtype=np.int64)
    pool = []  # non-infected individuals
    where = np.full(N, -1)
    forces = _Forces()
    heap: list = []
    seq = 0
    events = [] if spec.log_events else None
    tally = {"infection": 0, "recovery": 0, "rejected": 0}
    positive_at_infection = True

    def add_pool(k):
        where[k] = len(pool)
        pool.append(k)

    def drop_pool(k):
        i = where[k]
        last = pool.pop()
        if last != k:
            pool[i] = last
            where[last] = i
        where[k] = -1

    def admit(k, lam_path: Path, t0: float, gam: Path):
        nonlocal seq
        for when, a, b in _segments(lam_path, t0):
            heapq.heappush(heap, (when, 1, seq, k, "knot", a, b))
            seq += 1
        heapq.heappush(heap, (t0 + lam_path.period, 0, seq, k, "end", 0.0, 0.0))
        seq += 1
        gamma[k] = gam
        ref[k] = t0

    for k in range(n_sus0):
        gamma[k] = _ONE
        add_pool(k)
    for k in range(n_sus0, n_sus0 + n_inf0):
        lam0, gam0 = im.infected_pair(rng_init)
        admit(k, lam0, 0.0, gam0)
    for k in range(n_sus0 + n_inf0, N):
        gamma[k] = im.recovered_susceptibility(rng_init)
        add_pool(k)
    n_inf = n_inf0
    A = 0
    rec = _Recorder(mesh, horizon)

    def aggregate_susceptibility(t):
        return math.fsum(_pv(gamma[k], t - ref[k]) for k in pool) / N

    t = 0.0
    while True:
        while heap and heap[0][0] <= t:
            when, _, _, k, kind, a, b = heapq.heappop(heap)
            if kind == "knot":
                forces.set(k, a, b)
            else:
                forces.set(k, 0.0, 0.0)
                n_inf -= 1
                add_pool(k)
                tally["recovery"] += 1
                if events is not None:
                    events.append((when, k, "recovery"))
        dom = lstar * n_inf * len(pool) / N
        t_sched = heap[0][0] if heap else math.inf
        cand = t + U.exp(dom) if dom > 0 else math.inf
        t_next = min(cand, t_sched)
        while rec.next <= min(t_next, horizon) and rec.next < t_next:
            tr = rec.next
            rec.put(N - n_inf, 0, n_inf, 0, forces.at(tr), A, Sfrak=aggregate_susceptibility(tr))
        if t_next > horizon:
            break
        if t_sched <= cand:
            t = t_sched
            continue
        t = cand
        f = forces.at(t)
        bound = lstar * n_inf
        if f > bound * (1 + 1e-9) + 1e-12:
            raise BoundViolation(f"force {f:.6g} exceeds lambda* x infected = {bound:.6g} at t={t:g}")
        k = pool[min(int(P() * len(pool)), len(pool) - 1)]
        g = _pv(gamma[k], t - ref[k])
        if U() * bound < g * f:
            positive_at_infection &= g > 0
            drop_pool(k)
            lam_path, gam_path = sus.sample_pair(rng_law)
            admit(k, lam_path, t, gam_path)
            n_inf += 1
            A += 1
            counter[k] += 1
            tally["infection"] += 1
            if events is not None:
                events.append((t, k, "infection"))
        else:
            tally["rejected"] += 1
    rec.fill_rest(N - n_inf, 0, n_inf, 0, forces.at(horizon), A, Sfrak=aggregate_susceptibility(horizon))
    traj = _finish(rec, spec, seed, mesh, tally, events)
    traj.extra["infections_per_individual"] = counter
    traj.extra["positive_at_infection"] = np.array(positive_at_infection)
    return traj


# ---------------------------------------------------------------------------
# multipatch


def _multipatch_engine(spec: ModelSpec, horizon: float, seed: int, mesh: TimeMesh) -> Trajectory:
    rng_time, rng_pick, rng_law, rng_init = _streams(seed, 4)
    ut, up = _Uniforms(rng_time), _Uniforms(rng_pick)
    net = spec.network
    L = net.size
    N = spec.N
    lam = np.asarray(net.lam)
    kappa = np.asarray(net.kappa)
    nuS, nuI, nuR = (np.array(m, dtype=float) for m in (net.nu_S, net.nu_I, net.nu_R))
    for m in (nuS, nuI, nuR):
        np.fill_diagonal(m, 0.0)
    outS, outI, outR = nuS.sum(axis=1), nuI.sum(axis=1), nuR.sum(axis=1)
    gexp = net.exponent
    S = np.array(spec.init.get("S", [0] * L), dtype=np.int64)
    I = np.zeros(L, dtype=np.int64)
    R = np.array(spec.init.get("R", [0] * L), dtype=np.int64)
    A = np.zeros(L, dtype=np.int64)
    members: list[list[int]] = [[] for _ in range(L)]
    loc: dict[int, tuple[int, int]] = {}
    heap: list = []
    F = spec.period
    F0 = spec.initial_period or F
    tally = {"infection": 0, "recovery": 0, "migration": 0}
    events = [] if spec.log_events else None

    def place(who, patch):
        loc[who] = (patch, len(members[patch]))
        members[patch].append(who)
        I[patch] += 1

    def remove(who):
        patch, i = loc.pop(who)
        last = members[patch].pop()
        if last != who:
            members[patch][i] = last
            loc[last] = (patch, i)
        I[patch] -= 1
        return patch

    next_id = 0
    for patch, n in enumerate(spec.init.get("I", [0] * L)):
        for eta in F0.sample(rng_init, int(n)):
            place(next_id, patch)
            heapq.heappush(heap, (float(eta), next_id))
            next_id += 1

    def forces():
        tot = (S + I + R).astype(float)
        num = lam * S * (kappa @ I)
        den = N ** (1.0 - gexp) * tot ** gexp
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)

    rec = _Recorder(mesh, horizon, width=L)
    t = 0.0
    while True:
        ups = forces()
        rates = np.concatenate([ups, outS * S, outI * I, outR * R])
        total = float(rates.sum())
        t_gil = t + ut.exp(total) if total > 0 else math.inf
        t_rec = heap[0][0] if heap else math.inf
        t_next = min(t_gil, t_rec)
        while rec.next <= min(t_next, horizon):
            rec.put(S.copy(), 0, I.copy(), R.copy(), lam * (kappa @ I), A.copy())
        if t_next > horizon:
            break
        t = t_next
        if t_rec <= t_gil:
            _, who = heapq.heappop(heap)
            patch = remove(who)
            R[patch] += 1
            tally["recovery"] += 1
            if events is not None:
                events.append((t, who, f"recovery@{patch}"))
            continue
        u = up() * total
        kind = min(int(np.searchsorted(np.cumsum(rates), u, side="right")), rates.size - 1)
        block, i = divmod(kind, L)
        if block == 0:
            S[i] -= 1
            A[i] += 1
            who = next_id
            next_id += 1
            place(who, i)
            heapq.heappush(heap, (t + float(F.sample(rng_law)), who))
            tally["infection"] += 1
            if events is not None:
                events.append((t, who, f"infection@{i}"))
            continue
        tally["migration"] += 1
        row = (nuS, nuI, nuR)[block - 1][i]
        j = int(np.searchsorted(np.cumsum(row), up() * row.sum(), side="right"))
        j = min(j, L - 1)
        if block == 1:
            S[i] -= 1
            S[j] += 1
        elif block == 2:
            who = members[i][min(int(up() * len(members[i])), len(members[i]) - 1)]
            remove(who)
            place(who, j)
        else:
            R[i] -= 1
            R[j] += 1
    rec.fill_rest(S.copy(), 0, I.copy(), R.copy(), lam * (kappa @ I), A.copy())
    return _finish(rec, spec, seed, mesh, tally, events)


# ---------------------------------------------------------------------------
# public API


def simulate(spec: ModelSpec, horizon: float, seed: int, mesh: TimeMesh) -> Trajectory:
    """One exact realization, recorded at the nodes of `mesh` (right-continuous values)."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    if mesh.horizon > horizon * (1 + 1e-12):
        raise ValueError("record mesh extends beyond the horizon")
    fam = spec.family
    if fam == "markov-sir":
        return _sellke(spec, horizon, seed, mesh)
    if fam in MARKOV:
        return _gillespie(spec, horizon, seed, mesh)
    if fam == "varying-susceptibility":
        return _vivs_engine(spec, horizon, seed, mesh)
    if fam == "multipatch":
        return _multipatch_engine(spec, horizon, seed, mesh)
    return _vi_engine(spec, horizon, seed, mesh)


@dataclass
class Ensemble:
    """Pointwise mean and (population) variance of fractions over replicates."""

    mesh: TimeMesh
    n: int
    mean: dict[str, np.ndarray]
    m2: dict[str, np.ndarray]
    seeds: tuple[int, ...]

    @property
    def var(self) -> dict[str, np.ndarray]:
        return {k: (v / (self.n - 1) if self.n > 1 else np.zeros_like(v)) for k, v in self.m2.items()}

    def stderr(self, name: str) -> np.ndarray:
        return np.sqrt(self.var[name] / self.n)

    @classmethod
    def of(cls, traj: Trajectory, names: Sequence[str]) -> Ensemble:
        mean = {k: np.asarray(traj.fraction(k), dtype=float).copy() for k in names}
        return cls(traj.mesh, 1, mean, {k: np.zeros_like(v) for k, v in mean.items()}, (traj.seed,))

    def merge(self, other: Ensemble) -> Ensemble:
        """Chan et al. pairwise combination of two partial ensembles."""
        n = self.n + other.n
        mean, m2 = {}, {}
        for k in self.mean:
            d = other.mean[k] - self.mean[k]
            mean[k] = self.mean[k] + d * other.n / n
            m2[k] = self.m2[k] + other.m2[k] + d * d * self.n * other.n / n
        return Ensemble(self.mesh, n, mean, m2, tuple(sorted(self.seeds + other.seeds)))


def replicate(spec: ModelSpec, horizon: float, seeds: Iterable[int], mesh: TimeMesh, names=("S", "E", "I", "R", "F", "A")) -> Ensemble:
    """Independent runs, one per seed, merged into streaming mean and variance."""
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("at least one seed is required")
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be pairwise distinct")
    acc = None
    for s in seeds:
        part = Ensemble.of(simulate(spec, horizon, s, mesh), names)
        acc = part if acc is None else acc.merge(part)
    return acc


def extinction_time(spec: ModelSpec, seed: int, cap: float = 1e6) -> float:
    """First time the markov-sis infection count hits zero.

    Raises ExtinctionCensored if the infection survives up to `cap`.
    """
    if spec.family != "markov-sis":
        raise ValueError("extinction times are defined for the markov-sis family")
    (rng_time,) = _streams(seed, 1)
    U = _Uniforms(rng_time)
    lam, gam = float(spec.params["lam"]), float(spec.params["gamma"])
    N = spec.N
    I = spec.counts["I"]
    t = 0.0
    while I > 0:
        up = lam * (N - I) * I / N
        down = gam * I
        total = up + down
        t += U.exp(total)
        if t > cap:
            raise ExtinctionCensored(cap, I)
        I += 1 if U() * total < up else -1
    return t
