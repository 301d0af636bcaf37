"""Command-line front end: scenario files in, CSV files and a manifest out.

Exit codes: 0 success, 2 invalid scenario or arguments, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .abm import FAMILIES, Trajectory, replicate, simulate
from .agepde import solve_age_density, solve_sis_age_density
from .analytics import (
    Kernel,
    doubling_time,
    early_phase_profile,
    growth_rate,
    laplace,
    markov_equilibria,
    critical_population_size,
    sis_quasipotential,
)
from .config import ConfigError, ScenarioConfig
from .fclt import driver_covariances, sample_fluctuations
from .laws import (
    DurationLaw,
    Exponential,
    Gamma,
    LatentInfectivity,
    basic_reproduction_number,
    law_from_config,
)
from .mesh import TimeMesh
from .volterra import (
    IndependentPair,
    LimitSolution,
    solve_multipatch_volterra,
    solve_ode,
    solve_seir_volterra,
    solve_sir_volterra,
    solve_vi_volterra,
    solve_vivs_fixed_point,
)

__all__ = ["main", "run", "compare", "CompareReport", "default_compare_config", "solve_limit"]

COLUMNS = ("S", "E", "I", "R", "F", "A")


class NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# output


class Output:
    """Single writer for one run directory; every CSV starts with the digest line."""

    def __init__(self, root: str, digest: str):
        self.root = root
        self.digest = digest
        self.files: dict[str, str] = {}

    def csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> str:
        os.makedirs(self.root, exist_ok=True)
        path = os.path.join(self.root, name)
        with open(path, "w", newline="") as fh:
            fh.write(f"# digest: {self.digest}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        self.files[name] = self.digest
        return path

    def manifest(self, **info) -> str:
        os.makedirs(self.root, exist_ok=True)
        path = os.path.join(self.root, "manifest.json")
        body = {"version": __version__, "digest": self.digest, "files": sorted(self.files), **info}
        with open(path, "w") as fh:
            json.dump(body, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
        return path


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _curve_columns(curves: dict[str, np.ndarray], names=COLUMNS) -> tuple[list[str], list[np.ndarray]]:
    header, cols = [], []
    for name in names:
        if name not in curves:
            continue
        v = np.asarray(curves[name])
        if v.ndim == 1:
            header.append(name)
            cols.append(v)
        else:
            for i in range(v.shape[1]):
                header.append(f"{name}_p{i}")
                cols.append(v[:, i])
    return header, cols


def _write_curves(out: Output, name: str, t: np.ndarray, curves: dict, names=COLUMNS) -> None:
    header, cols = _curve_columns(curves, names)
    out.csv(name, ["t", *header], zip(t, *cols))


def trajectory_rows(traj: Trajectory):
    curves = {**traj.counts, "F": traj.F, "A": traj.A}
    return _curve_columns(curves)


# ---------------------------------------------------------------------------
# experiments


def _mesh(cfg: ScenarioConfig) -> TimeMesh:
    return TimeMesh(float(cfg["horizon"]), float(cfg["step"]))


def solve_limit(cfg: ScenarioConfig, mesh: TimeMesh | None = None) -> LimitSolution:
    """Deterministic limit for the scenario's family."""
    mesh = mesh or _mesh(cfg)
    fam = cfg["family"]
    laws = cfg.laws()
    p = cfg.params
    init = cfg.init_fractions()
    if fam.startswith("markov-") or fam == "markov-seir":
        return solve_ode(fam, p, init, mesh)
    age = cfg.age_profile(laws) if "age_profile" in cfg.data else None
    if fam == "nonmarkov-sir":
        return solve_sir_volterra(laws["period"], p["lam"], init, mesh, F0=laws.get("initial_period"), age_profile=age)
    if fam == "varying-infectivity":
        return solve_vi_volterra(laws["infectivity"], init, mesh, initial_infectivity=laws.get("initial_infectivity"), age_profile=age)
    if fam == "nonmarkov-seir":
        pair = IndependentPair(laws["latent"], laws["period"])
        return solve_seir_volterra(pair, p["lam"], init, mesh, F0=laws.get("initial_period"))
    if fam == "multipatch":
        arrays = {k: np.asarray(v, dtype=float) for k, v in init.items()}
        return solve_multipatch_volterra(cfg.network(), laws["period"], arrays, mesh, F0=laws.get("initial_period"))
    if fam == "varying-susceptibility":
        return _vivs(cfg, mesh)
    raise ConfigError(f"no deterministic limit for family {fam!r}")


def _vivs(cfg: ScenarioConfig, mesh: TimeMesh) -> LimitSolution:
    v = cfg.table("vivs")
    laws = cfg.laws()
    return solve_vivs_fixed_point(
        cfg.susceptibility(laws),
        cfg.immunity(laws),
        mesh,
        mc_samples=int(v.get("samples", 1000)),
        seed=cfg.seed,
        method=v.get("method", "auto"),
        start=v.get("start", "zero"),
    )


def _run_simulate(cfg: ScenarioConfig, out: Output) -> dict:
    mesh = _mesh(cfg)
    N = int(cfg["N"])
    spec = cfg.model_spec(N)
    seeds = [cfg.seed + k for k in range(cfg.replicates)]
    tallies = {}
    for s in seeds:
        traj = simulate(spec, mesh.horizon, s, mesh)
        header, cols = trajectory_rows(traj)
        out.csv(f"trajectory_{s}.csv", ["t", *header], zip(mesh.times, *cols))
        tallies[str(s)] = traj.event_counts
    if len(seeds) > 1:
        ens = replicate(spec, mesh.horizon, seeds, mesh, names=("S", "E", "I", "R", "F", "A"))
        curves = {**{f"{k}": ens.mean[k] for k in ens.mean}}
        header, cols = _curve_columns(curves)
        vh, vcols = _curve_columns(ens.var)
        out.csv("ensemble.csv", ["t", *header, *[f"var_{h}" for h in vh]], zip(mesh.times, *cols, *vcols))
    return {"seeds": seeds, "event_counts": tallies, "spec_digest": spec.digest()}


def _run_solve(cfg: ScenarioConfig, out: Output) -> dict:
    sol = solve_limit(cfg)
    names = COLUMNS + (("Sfrak",) if "Sfrak" in sol.curves else ())
    _write_curves(out, "limit.csv", sol.t, sol.curves, names)
    return {"meta": {k: v for k, v in sol.meta.items() if isinstance(v, (int, float, str))}}


def _run_converge(cfg: ScenarioConfig, out: Output) -> dict:
    mesh = _mesh(cfg)
    sol = solve_limit(cfg, mesh)
    sizes = [int(n) for n in cfg.table("converge")["sizes"]]
    reps = cfg.replicates
    rows = []
    prev = None
    for N in sizes:
        spec = cfg.model_spec(N)
        errs = []
        for k in range(reps):
            traj = simulate(spec, mesh.horizon, cfg.seed + k, mesh)
            errs.append(float(np.max(np.abs(traj.fraction("I") - sol["I"]))))
        err = float(np.mean(errs))
        se = float(np.std(errs, ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
        ratio = prev / err if prev else float("nan")
        rows.append((N, err, se, ratio))
        prev = err
    out.csv("converge.csv", ["N", "sup_error_I", "stderr", "ratio_to_previous"], rows)
    return {"errors": {str(r[0]): r[1] for r in rows}}


def _run_fluctuations(cfg: ScenarioConfig, out: Output) -> dict:
    mesh = _mesh(cfg)
    fam = cfg["family"]
    sol = solve_limit(cfg, mesh)
    laws = cfg.laws()
    p = cfg.params
    fl = cfg.table("fluctuations")
    if fam == "markov-sir":
        lw = {"lam": p["lam"], "gamma": p["gamma"]}
    elif fam == "nonmarkov-sir":
        lw = {"lam": p["lam"], "F": laws["period"], "F0": laws.get("initial_period")}
    elif fam == "varying-infectivity":
        lw = {
            "infectivity": laws["infectivity"],
            "initial_infectivity": laws.get("initial_infectivity"),
            "panel": int(fl.get("panel", 10_000)),
            "seed": cfg.seed,
        }
    else:
        raise ConfigError(f"no fluctuation limit for family {fam!r}")
    spec = driver_covariances(fam, sol, lw, mesh)
    ens = sample_fluctuations(spec, sol, int(fl.get("paths", 20_000)), cfg.seed)
    names = ("S", "I", "R", "F")
    out.csv(
        "fluctuations.csv",
        ["t", *[f"mean_{k}" for k in names], *[f"var_{k}" for k in names]],
        zip(mesh.times, *[ens.mean[k] for k in names], *[ens.var[k] for k in names]),
    )
    drivers = [n for n in spec.names]
    out.csv("driver_variance.csv", ["t", *drivers], zip(mesh.times, *[np.diag(spec.covariance(n, n)) for n in drivers]))
    return {"paths": ens.n_paths, "blocks": [list(b) for b in spec.blocks]}


def _run_pde(cfg: ScenarioConfig, out: Output) -> dict:
    mesh = _mesh(cfg)
    laws = cfg.laws()
    law = cfg.infectivity(laws)
    prof = cfg.age_profile(laws)
    kind = cfg.table("pde").get("kind", "sir")
    if kind == "sir":
        field = solve_age_density(law, prof, mesh)
    elif kind == "sis":
        field = solve_sis_age_density(law, prof, mesh)
    else:
        raise ConfigError(f"pde.kind must be 'sir' or 'sis', got {kind!r}")
    total = field.total()
    out.csv("pde_totals.csv", ["t", "S", "I", "F", "boundary"], zip(mesh.times, field.S, total, field.F, field.boundary))
    out.csv("pde_density.csv", ["t", "x", "i"], field.rows())
    return {"clamped_steps": len(field.clamped)}


def _run_vivs(cfg: ScenarioConfig, out: Output) -> dict:
    sol = _vivs(cfg, _mesh(cfg))
    _write_curves(out, "vivs.csv", sol.t, sol.curves, ("S", "I", "F", "A", "Sfrak", "se"))
    return {"iterations": sol.meta.get("iterations")}


def _run_analytics(cfg: ScenarioConfig, out: Output) -> dict:
    fam = cfg.get("family")
    p = cfg.params
    rows: list[tuple[str, float]] = []
    if fam in ("markov-sis", "markov-sirs", "markov-sir-demography", "markov-sir"):
        eq = markov_equilibria(fam, p)
        rows += [(f"equilibrium_{k}", v) for k, v in eq.items()]
        r0 = eq["R0"]
        if fam == "markov-sis" and r0 > 1:
            rows.append(("quasipotential", sis_quasipotential(r0)))
        if fam == "markov-sir-demography" and r0 != 1:
            rows.append(("critical_population_size", critical_population_size(r0, p["gamma"], p["mu"])))
        rho = p["lam"] - p["gamma"] - p.get("mu", 0.0)
        rows += [("R0", r0), ("rho", rho)]
    else:
        law = cfg.infectivity()
        r0 = basic_reproduction_number(law)
        rho = growth_rate(law)
        rows += [("R0", r0), ("rho", rho)]
    if rho != 0:
        rows.append(("doubling_time", doubling_time(rho)))
    out.csv("analytics.csv", ["quantity", "value"], rows)
    print(json.dumps({k: float(v) for k, v in rows}, indent=2))
    return {"values": dict(rows)}


# ---------------------------------------------------------------------------
# compare: lockdown inertia


@dataclass
class CompareReport:
    """Cumulative infections of a Markov SEIR model and a non-Markov one with equal means and growth."""

    t: np.ndarray
    markov: np.ndarray
    nonmarkov: np.ndarray
    lam: tuple[float, float]
    contact_after: tuple[float, float]
    day: float

    @property
    def gap(self) -> np.ndarray:
        return self.nonmarkov - self.markov


def default_compare_config() -> dict:
    """Documented default scenario.

    Latent period Gamma(3, 1) (mean 3 days), infectious period Gamma(5, 1)
    (mean 5 days), initial growth rate 0.2 per day, a contact drop at day 28
    set so that each model decays at rate 0.05 per day, horizon 90 days.
    """
    return {
        "experiment": "compare",
        "horizon": 90.0,
        "step": 0.05,
        "compare": {
            "rho": 0.2,
            "initial": 1e-5,
            "day": 28.0,
            "rho_after": -0.05,
            "latent": {"kind": "gamma", "shape": 3.0, "scale": 1.0},
            "period": {"kind": "gamma", "shape": 5.0, "scale": 1.0},
        },
    }


def _unit_latent(latent: DurationLaw, period: DurationLaw) -> LatentInfectivity:
    return LatentInfectivity(1.0, latent, period)


def _rate_for(law_unit: LatentInfectivity, rho: float, level: float = 1.0) -> float:
    """Infection rate making int level * rate * lambda_unit(t) e^{-rho t} dt = 1."""
    val = laplace(Kernel.from_infectivity(law_unit), rho)
    if not (math.isfinite(val) and val > 0):
        raise NumericalFailure(f"Laplace transform is not finite at rho={rho}")
    return 1.0 / (level * val)


def compare(markov: dict, nonmarkov: dict, setting: dict, horizon: float, step: float) -> CompareReport:
    """Run both deterministic limits with a contact drop and report cumulative infections.

    `markov` and `nonmarkov` hold ``latent`` and ``period`` law tables; the
    Markov side must be exponential and both sides must share their means.
    `setting` holds ``rho``, ``initial``, ``day`` and ``rho_after``.
    """
    for key in ("day", "rho_after"):
        if key not in setting:
            raise ConfigError(f"compare needs an intervention ({key!r} missing)")
    lat_m, per_m = law_from_config(markov["latent"]), law_from_config(markov["period"])
    lat_n, per_n = law_from_config(nonmarkov["latent"]), law_from_config(nonmarkov["period"])
    if not (isinstance(lat_m, Exponential) and isinstance(per_m, Exponential)):
        raise ConfigError("the Markov side needs exponential latent and infectious periods")
    for a, b, what in ((lat_m, lat_n, "latent"), (per_m, per_n, "infectious")):
        if abs(a.mean - b.mean) > 1e-9 * max(1.0, a.mean):
            raise ConfigError(f"mean {what} periods differ: {a.mean} vs {b.mean}")
    rho = float(setting.get("rho", 0.2))
    eps = float(setting.get("initial", 1e-5))
    day = float(setting["day"])
    rho2 = float(setting["rho_after"])
    mesh = TimeMesh(horizon, step)
    if not 0 < day < horizon:
        raise ConfigError("the intervention day must lie inside the horizon")
    if abs(day / step - round(day / step)) > 1e-9:
        raise ConfigError("the intervention day must be a mesh node")
    unit_m = _unit_latent(lat_m, per_m)
    unit_n = _unit_latent(lat_n, per_n)
    lam_m = _rate_for(unit_m, rho)
    lam_n = _rate_for(unit_n, rho)

    # Markov SEIR: initial state on the growing eigenvector
    # `initial` is the ever-infected mass at time 0, split as in exponential growth
    nu, gam = lat_m.rate, per_m.rate
    E0 = eps * rho / (nu + rho)
    I0 = eps * rho * nu / ((nu + rho) * (gam + rho))
    R0 = eps - E0 - I0
    params = {"lam": lam_m, "gamma": gam, "nu": nu}
    init_m = {"S": 1.0 - eps, "E": E0, "I": I0, "R": R0}
    pre = solve_ode("markov-seir", params, init_m, mesh)
    c_m = _rate_for(unit_m, rho2, lam_m * pre.at("S", day))

    law_n = LatentInfectivity(lam_n, lat_n, per_n)
    prof = early_phase_profile(law_n, rho)
    init_n = {"S": 1.0 - eps, "I": eps * prof.i, "R": eps * prof.r}
    kw = dict(initial_mean=prof.force, initial_survival=prof.survival)
    pre_n = solve_vi_volterra(law_n, init_n, mesh, **kw)
    c_n = _rate_for(unit_n, rho2, lam_n * pre_n.at("S", day))

    def drop(c):
        return lambda t: np.where(np.asarray(t) < day - 1e-12, 1.0, c)

    post_m = solve_ode("markov-seir", params, init_m, mesh, contact=drop(c_m), substeps=4)
    post_n = solve_vi_volterra(law_n, init_n, mesh, contact=drop(c_n), **kw)
    return CompareReport(mesh.times, post_m["A"], post_n["A"], (lam_m, lam_n), (c_m, c_n), day)


def _run_compare(cfg: ScenarioConfig, out: Output) -> dict:
    c = cfg.table("compare")
    base = default_compare_config()["compare"]
    setting = {k: c.get(k, base[k]) for k in ("rho", "initial")}
    for k in ("day", "rho_after"):
        if k in c:
            setting[k] = c[k]
    nonmarkov = {k: c.get(k, base[k]) for k in ("latent", "period")}
    lat, per = law_from_config(nonmarkov["latent"]), law_from_config(nonmarkov["period"])
    markov = {
        "latent": {"kind": "exponential", "rate": 1.0 / lat.mean},
        "period": {"kind": "exponential", "rate": 1.0 / per.mean},
    }
    rep = compare(markov, nonmarkov, setting, float(cfg["horizon"]), float(cfg["step"]))
    out.csv("compare.csv", ["t", "A_markov", "A_nonmarkov", "gap"], zip(rep.t, rep.markov, rep.nonmarkov, rep.gap))
    after = rep.t >= rep.day + 7
    return {
        "lam": list(rep.lam),
        "contact_after": list(rep.contact_after),
        "gap_at_horizon": float(rep.gap[-1]),
        "nonmarkov_exceeds_after_day_plus_7": bool(np.all(rep.gap[after] > 0)),
    }


_RUNNERS: dict[str, Callable[[ScenarioConfig, Output], dict]] = {
    "simulate": _run_simulate,
    "solve": _run_solve,
    "converge": _run_converge,
    "fluctuations": _run_fluctuations,
    "pde": _run_pde,
    "analytics": _run_analytics,
    "vivs": _run_vivs,
    "compare": _run_compare,
}


def run(config_path: str | None, overrides: Sequence[str] = (), experiment: str | None = None) -> int:
    """Load, override, validate and dispatch; returns the process exit code."""
    try:
        if config_path is None:
            if experiment != "compare":
                raise ConfigError("--config is required")
            cfg = ScenarioConfig.from_dict(default_compare_config())
        else:
            cfg = ScenarioConfig.load(config_path)
        cfg = cfg.with_overrides(overrides)
        if experiment is not None and cfg.experiment != experiment:
            cfg = cfg.with_overrides([f'experiment="{experiment}"'])
        if cfg.get("family") is not None and cfg["family"] not in FAMILIES + ("markov-seir",):
            raise ConfigError(f"unknown family {cfg['family']!r}")
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Output(cfg.out, cfg.digest)
    try:
        info = _RUNNERS[cfg.experiment](cfg, out)
    except (ConfigError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, RuntimeError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"numerical failure in {type(exc).__module__}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    out.manifest(experiment=cfg.experiment, seed=cfg.seed, config=cfg.data, **info)
    return 0


def _overrides(args) -> list[str]:
    out = list(args.set or [])
    if args.seed is not None:
        out.append(f"seed={args.seed}")
    if args.mesh_step is not None:
        out.append(f"step={args.mesh_step!r}")
    if args.out is not None:
        out.append(f"out={json.dumps(args.out)}")
    if args.replicates is not None:
        out.append(f"replicates={args.replicates}")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epilimits", description="Stochastic epidemic models and their limits.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _RUNNERS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="scenario file (TOML)")
        p.add_argument("--seed", type=int)
        p.add_argument("--mesh-step", type=float)
        p.add_argument("--out")
        p.add_argument("--replicates", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a scenario key")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    return run(args.config, _overrides(args), experiment=args.command)


if __name__ == "__main__":
    sys.exit(main())
