"""Scenario files: parsing, canonical form, digest and model builders.

A scenario is a TOML document.  Top-level keys::

    experiment   simulate | solve | converge | fluctuations | pde | analytics | vivs | compare
    family       model family (see abm.FAMILIES)
    N            population size
    horizon      final time
    step         mesh step
    seed         master seed (default 0)
    replicates   number of runs (default 1)
    out          output directory (default "out")

and tables ``params`` (rates lam, gamma, rho, mu, nu), ``init`` (initial
fractions S, E, I, R; per-patch lists for multipatch), ``laws`` (period,
initial_period, latent, infectivity, initial_infectivity, waning),
``immunity``, ``network``, ``age_profile``, plus one table per experiment
(``converge``, ``fluctuations``, ``pde``, ``vivs``, ``compare``).  Unknown keys
anywhere are errors.
"""
from __future__ import annotations

import copy
import hashlib
import sys
from dataclasses import dataclass
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import numpy as np

from .laws import (
    ConstantInfectivity,
    DeterministicWaning,
    InitialImmunity,
    Path,
    infectivity_from_config,
    law_from_config,
    ramp_waning,
    step_waning,
)
from .volterra import AgeProfile, IndependentPair, PatchNetwork

__all__ = ["ConfigError", "ScenarioConfig", "EXPERIMENTS"]

EXPERIMENTS = ("simulate", "solve", "converge", "fluctuations", "pde", "analytics", "vivs", "compare")

_TOP = {
    "experiment",
    "family",
    "N",
    "horizon",
    "step",
    "seed",
    "replicates",
    "out",
    "params",
    "init",
    "laws",
    "immunity",
    "network",
    "age_profile",
    "converge",
    "fluctuations",
    "pde",
    "vivs",
    "compare",
}
_TABLES = {
    "params": {"lam", "gamma", "rho", "mu", "nu"},
    "init": {"S", "E", "I", "R"},
    "laws": {"period", "initial_period", "latent", "infectivity", "initial_infectivity", "waning"},
    "immunity": {"susceptible", "infected", "recovered", "recovered_age"},
    "network": {"lam", "kappa", "nu_S", "nu_I", "nu_R", "exponent"},
    "age_profile": {"kind", "values", "step", "upper"},
    "converge": {"sizes"},
    "fluctuations": {"paths", "panel"},
    "pde": {"kind"},
    "vivs": {"samples", "method", "start"},
    "compare": {"rho", "initial", "day", "rho_after", "latent", "period"},
}
_NEEDS_MESH = {"simulate", "solve", "converge", "fluctuations", "pde", "vivs", "compare"}


class ConfigError(ValueError):
    """Invalid scenario file or override."""


def _check_keys(where: str, table: Any, allowed: set[str]) -> None:
    if not isinstance(table, dict):
        raise ConfigError(f"{where} must be a table")
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    """Validated scenario tree."""

    data: dict

    # -- I/O --------------------------------------------------------------

    @classmethod
    def parse(cls, text: str) -> ScenarioConfig:
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed scenario file: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> ScenarioConfig:
        try:
            with open(path, "rb") as fh:
                text = fh.read().decode()
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None
        return cls.parse(text)

    @classmethod
    def from_dict(cls, data: dict) -> ScenarioConfig:
        cfg = cls(copy.deepcopy(data))
        cfg.validate()
        return cfg

    def dumps(self) -> str:
        """Canonical text: sorted keys, TOML."""
        return tomli_w.dumps(_sorted(self.data))

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def with_overrides(self, pairs) -> ScenarioConfig:
        """Apply dotted ``key=value`` overrides (values parsed as TOML)."""
        data = copy.deepcopy(self.data)
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not key=value")
            key, text = pair.split("=", 1)
            node = data
            parts = key.strip().split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
                if not isinstance(node, dict):
                    raise ConfigError(f"override {key!r} goes through a non-table")
            node[parts[-1]] = _parse_value(text.strip())
        return ScenarioConfig.from_dict(data)

    # -- accessors ----------------------------------------------------------

    def __getitem__(self, key):
        return self.data[key]

    def get(self, key, default=None):
        return self.data.get(key, default)

    def table(self, name: str) -> dict:
        return dict(self.data.get(name, {}))

    @property
    def experiment(self) -> str:
        return self.data["experiment"]

    @property
    def seed(self) -> int:
        return int(self.data.get("seed", 0))

    @property
    def replicates(self) -> int:
        return int(self.data.get("replicates", 1))

    @property
    def out(self) -> str:
        return str(self.data.get("out", "out"))

    # -- validation -------------------------------------------------------

    def validate(self) -> None:
        d = self.data
        _check_keys("the scenario", d, _TOP)
        for name, allowed in _TABLES.items():
            if name in d:
                _check_keys(f"[{name}]", d[name], allowed)
        exp = d.get("experiment")
        if exp not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {exp!r}")
        if exp in _NEEDS_MESH:
            for key in ("horizon", "step"):
                if key not in d:
                    raise ConfigError(f"missing required field {key!r}")
            if not (_num(d["horizon"]) > 0 and _num(d["step"]) > 0):
                raise ConfigError("horizon and step must be positive")
            ratio = d["horizon"] / d["step"]
            if abs(ratio - round(ratio)) > 1e-6 * max(1.0, ratio):
                raise ConfigError("horizon must be a whole number of mesh steps")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        reps = d.get("replicates", 1)
        if not isinstance(reps, int) or reps < 1:
            raise ConfigError("replicates must be a positive integer")
        if exp == "simulate" and "N" not in d:
            raise ConfigError("missing required field 'N'")
        if exp in ("simulate", "solve", "converge", "fluctuations") and "family" not in d:
            raise ConfigError("missing required field 'family'")
        if exp == "converge" and "sizes" not in d.get("converge", {}):
            raise ConfigError("missing required field 'converge.sizes'")
        if exp == "pde" and "age_profile" not in d:
            raise ConfigError("missing required field 'age_profile'")
        if exp == "vivs" and ("immunity" not in d or "waning" not in d.get("laws", {})):
            raise ConfigError("vivs needs [immunity] and laws.waning")
        init = d.get("init", {})
        try:
            fr = [float(np.sum(v)) for v in init.values()]
        except (TypeError, ValueError):
            raise ConfigError("init values must be numbers or lists of numbers") from None
        if any(v < 0 for v in fr) or sum(fr) > 1.0 + 1e-9:
            raise ConfigError("initial fractions must be nonnegative and sum to at most 1")
        # build everything once so law errors surface as validation errors
        try:
            self._build_all()
        except ConfigError:
            raise
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    def _build_all(self) -> None:
        laws = self.laws()
        if "immunity" in self.data:
            self.immunity(laws)
        if "network" in self.data:
            self.network()
        if "age_profile" in self.data:
            self.age_profile(laws)
        if self.experiment == "simulate":
            self.model_spec(int(self.data["N"]))

    # -- builders ---------------------------------------------------------

    @property
    def params(self) -> dict[str, float]:
        return {k: float(v) for k, v in self.table("params").items()}

    def laws(self) -> dict[str, Any]:
        raw = self.table("laws")
        out: dict[str, Any] = {}
        for key in ("period", "initial_period", "latent"):
            if key in raw:
                out[key] = law_from_config(raw[key])
        for key in ("infectivity", "initial_infectivity"):
            if key in raw:
                out[key] = infectivity_from_config(raw[key])
        if "waning" in raw:
            out["waning"] = waning_from_config(raw["waning"])
        return out

    def infectivity(self, laws=None):
        """The infectivity law implied by the family (classical laws become constant rates)."""
        laws = self.laws() if laws is None else laws
        if "infectivity" in laws:
            return laws["infectivity"]
        if "period" in laws and "lam" in self.params:
            return ConstantInfectivity(self.params["lam"], laws["period"])
        raise ConfigError("need laws.infectivity, or params.lam with laws.period")

    def immunity(self, laws=None) -> InitialImmunity:
        laws = self.laws() if laws is None else laws
        raw = self.table("immunity")
        age = raw.get("recovered_age")
        try:
            return InitialImmunity(
                float(raw.get("susceptible", 1.0)),
                float(raw.get("infected", 0.0)),
                float(raw.get("recovered", 0.0)),
                laws.get("initial_infectivity") or self.infectivity(laws),
                laws["waning"],
                None if age is None else law_from_config(age),
            )
        except KeyError as exc:
            raise ConfigError(f"immunity needs laws.{exc.args[0]}") from None

    def susceptibility(self, laws=None) -> DeterministicWaning:
        laws = self.laws() if laws is None else laws
        return DeterministicWaning(self.infectivity(laws), laws["waning"])

    def network(self) -> PatchNetwork:
        raw = self.table("network")
        if "lam" not in raw or "kappa" not in raw:
            raise ConfigError("network needs lam and kappa")
        return PatchNetwork.build(
            raw["lam"], raw["kappa"], raw.get("nu_S"), raw.get("nu_I"), raw.get("nu_R"), raw.get("exponent", 1.0)
        )

    def age_profile(self, laws=None) -> AgeProfile:
        """Either explicit values on a step, or the stationary shape I(0) F^c(x) / E[eta]."""
        laws = self.laws() if laws is None else laws
        raw = self.table("age_profile")
        kind = raw.get("kind", "values")
        if kind == "values":
            if "values" not in raw or "step" not in raw:
                raise ConfigError("age_profile needs values and step")
            return AgeProfile(tuple(float(v) for v in raw["values"]), float(raw["step"]))
        if kind == "stationary":
            F = self.infectivity(laws).period_law
            step = float(raw.get("step", self.data.get("step", 0.01)))
            upper = float(raw.get("upper", F.horizon()))
            prof = AgeProfile.from_function(F.sf, upper, step)
            mass = float(self.init_fractions().get("I", 0.0))
            return AgeProfile(tuple(v * mass / prof.total for v in prof.values), step)
        raise ConfigError(f"unknown age_profile kind {kind!r}")

    def init_fractions(self) -> dict[str, Any]:
        return dict(self.table("init"))

    def counts(self, N: int) -> dict[str, int]:
        """Integer counts from initial fractions; S absorbs the rounding."""
        fr = self.init_fractions()
        out = {k: int(round(float(fr.get(k, 0.0)) * N)) for k in ("E", "I", "R")}
        out["S"] = N - sum(out.values())
        if out["S"] < 0:
            raise ConfigError("initial fractions exceed 1")
        return out

    def model_spec(self, N: int):
        from .abm import ModelSpec

        fam = self.data.get("family")
        laws = self.laws()
        p = self.params
        kw: dict[str, Any] = {}
        if fam == "multipatch":
            fr = self.init_fractions()
            L = self.network().size
            counts = {k: [int(round(float(v) * N)) for v in fr.get(k, [0.0] * L)] for k in ("S", "I", "R")}
            counts["S"][0] += N - sum(sum(v) for v in counts.values())
            return ModelSpec(fam, N, counts, period=laws.get("period"), initial_period=laws.get("initial_period"), network=self.network())
        if fam == "varying-susceptibility":
            return ModelSpec(fam, N, {}, susceptibility=self.susceptibility(laws), immunity=self.immunity(laws))
        counts = self.counts(N)
        if fam == "nonmarkov-sir":
            kw = {"period": laws.get("period"), "initial_period": laws.get("initial_period")}
        elif fam == "varying-infectivity":
            kw = {"infectivity": laws.get("infectivity"), "initial_infectivity": laws.get("initial_infectivity")}
        elif fam == "nonmarkov-seir":
            if "latent" not in laws or "period" not in laws:
                raise ConfigError("nonmarkov-seir needs laws.latent and laws.period")
            kw = {"seir": IndependentPair(laws["latent"], laws["period"]), "initial_period": laws.get("initial_period")}
        if "age_profile" in self.data and fam in ("nonmarkov-sir", "varying-infectivity"):
            kw["age_profile"] = self.age_profile(laws)
        return ModelSpec(fam, N, counts, p, **kw)


def waning_from_config(cfg: dict) -> Path:
    cfg = dict(cfg)
    kind = cfg.pop("kind", "path")
    try:
        if kind == "zero":
            out = Path.zero()
        elif kind == "step":
            out = step_waning(float(cfg.pop("delay")))
        elif kind == "ramp":
            out = ramp_waning(float(cfg.pop("delay")), float(cfg.pop("width")))
        elif kind == "path":
            out = Path(
                tuple(float(v) for v in cfg.pop("breaks")),
                tuple(float(v) for v in cfg.pop("starts")),
                tuple(float(v) for v in cfg.pop("ends")),
                float(cfg.pop("tail", 0.0)),
            )
        else:
            raise ConfigError(f"unknown waning kind {kind!r}")
    except KeyError as exc:
        raise ConfigError(f"waning {kind!r} is missing field {exc.args[0]!r}") from None
    if cfg:
        raise ConfigError(f"unknown keys for waning {kind!r}: {sorted(cfg)}")
    return out


def _num(x) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigError(f"expected a number, got {x!r}")
    return float(x)


def _sorted(obj):
    if isinstance(obj, dict):
        return {k: _sorted(obj[k]) for k in sorted(obj)}
    if isinstance(obj, list):
        return [_sorted(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
