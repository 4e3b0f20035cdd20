"""Batch front end: scenario files in, CSV tables and reports out.

A scenario is one TOML file (models, Sharpe ratio, grids, paths, probes,
portfolio sizes); see ``scenarios/constant.toml`` for the annotated
schema.  Every output file starts with a run-manifest header (commented
lines recording the config checksum, seed, tool version and timestamp);
bodies below the header are byte-identical across reruns with the same
manifest inputs.

Exit codes: 0 success, 1 numerical failure, 2 configuration error.
The seed may be overridden by ``MORTVAL_SEED`` or ``--seed`` (flag wins).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import math
import os
import sys
from datetime import datetime, timezone

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:                      # Python 3.10
    import tomli as tomllib

from . import __version__
from .errors import ConfigError, MortvalError
from .grids import SolverConfig
from .models import (BrownianMakehamParams, SharpeConfig, brownian_makeham,
                     cir, constant_hazard, constant_rate, vasicek)
from .montecarlo import (MeasureSpec, PathConfig, mc_annuity_alpha0, mc_limit,
                         mc_survival, simulate_hedged_portfolio,
                         write_estimates_csv)
from .pde import solve_beta, solve_limit, solve_pure_endowment
from .valuation import (GridConfig, Scenario, bid_ask, fbeta_quadrature,
                        risk_charge_split, run_property_suite, value_portfolio)

_MC_TOL = 2e-3   # cross-checks pass within max(3 se, this)


def _require(table: dict, key: str, section: str):
    if key not in table:
        raise ConfigError(f"missing required field '{section}.{key}'")
    return table[key]


def _build_hazard(cfg: dict):
    kind = _require(cfg, "kind", "hazard")
    if kind == "constant":
        lam0 = float(_require(cfg, "lambda0", "hazard"))
        return constant_hazard(lam0), lam0
    if kind == "brownian_makeham":
        params = BrownianMakehamParams(
            g=float(_require(cfg, "g", "hazard")),
            m=float(_require(cfg, "m", "hazard")),
            sigma=float(_require(cfg, "sigma", "hazard")),
            lambda0=float(_require(cfg, "lambda0", "hazard")),
            lambda_floor=float(_require(cfg, "lambda_floor", "hazard")))
        return brownian_makeham(params), params.lambda0
    raise ConfigError(f"hazard.kind {kind!r} not supported (constant | brownian_makeham)")


def _build_rate(cfg: dict):
    kind = _require(cfg, "kind", "rate")
    r0 = float(_require(cfg, "r0", "rate"))
    if kind == "constant":
        return constant_rate(), r0
    if kind in ("vasicek", "cir"):
        factory = vasicek if kind == "vasicek" else cir
        return factory(kappa=float(_require(cfg, "kappa", "rate")),
                       theta=float(_require(cfg, "theta", "rate")),
                       vol=float(_require(cfg, "vol", "rate")),
                       mpr=float(cfg.get("mpr", 0.0))), r0
    raise ConfigError(f"rate.kind {kind!r} not supported (constant | vasicek | cir)")


def load_scenario(path: str, *, seed_override: int | None = None,
                  paths_override: int | None = None,
                  grid_scale: float = 1.0) -> Scenario:
    """Parse and validate a scenario TOML file."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"scenario file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML parse error in {path}: {exc}")

    hazard, lam0 = _build_hazard(_require(raw, "hazard", "scenario"))
    rate, r0 = _build_rate(_require(raw, "rate", "scenario"))
    val = _require(raw, "valuation", "scenario")
    alpha = float(_require(val, "alpha", "valuation"))
    horizon = float(_require(val, "horizon", "valuation"))
    try:
        sharpe = SharpeConfig(alpha=alpha, lambda_floor=hazard.lambda_floor,
                              buyer=bool(val.get("buyer", False)))
    except MortvalError as exc:
        raise ConfigError(f"valuation.alpha invalid: {exc}")

    g = raw.get("grids", {})
    scale = max(grid_scale, 1e-3)

    def scaled(x, lo=3):
        return max(lo, int(round(x * scale)))

    grid = GridConfig(
        mode=g.get("mode", "deterministic_rate"),
        n_hazard=scaled(int(g.get("n_hazard", 400))),
        n_rate=scaled(int(g.get("n_rate", 80))),
        n_time=scaled(int(g["n_time"]), lo=8) if "n_time" in g else None,
        lo_mult=float(g.get("lo_mult", 1e-5)),
        hi_mult=float(g.get("hi_mult", 50.0)),
        r_min=float(g["r_min"]) if "r_min" in g else None,
        r_max=float(g["r_max"]) if "r_max" in g else None)

    p = raw.get("paths", {})
    seed = seed_override if seed_override is not None else int(p.get("seed", 0))
    paths = PathConfig(
        paths=paths_override if paths_override is not None else int(p.get("paths", 10_000)),
        steps_per_year=int(p.get("steps_per_year", 252)),
        seed=seed,
        antithetic=bool(p.get("antithetic", False)))

    probes = tuple((float(_require(q, "r", "probes")),
                    float(_require(q, "lam", "probes")),
                    float(q.get("t", 0.0)))
                   for q in raw.get("probes", []))

    try:
        return Scenario(
            title=str(raw.get("title", os.path.basename(path))),
            hazard=hazard, rate=rate, sharpe=sharpe, horizon=horizon,
            r0=r0, lam0=lam0,
            sizes=tuple(int(n) for n in val.get("sizes", [1])),
            eta=float(val["eta"]) if "eta" in val else None,
            payment_rate=float(val.get("payment_rate", 1.0)),
            grid=grid, paths=paths, probes=probes)
    except MortvalError as exc:
        raise ConfigError(str(exc))


class RunManifest:
    """Provenance header stamped into every output file."""

    def __init__(self, config_path: str, subcommand: str, out_dir: str,
                 seed: int, seed_source: str, grid_scale: float):
        with open(config_path, "rb") as fh:
            self.config_sha256 = hashlib.sha256(fh.read()).hexdigest()
        self.config_path = os.path.abspath(config_path)
        self.subcommand = subcommand
        self.out_dir = os.path.abspath(out_dir)
        self.seed = seed
        self.seed_source = seed_source
        self.grid_scale = grid_scale
        self.timestamp = datetime.now(timezone.utc).isoformat(timespec="seconds")

    def header(self) -> str:
        return "".join(f"# {k}: {v}\n" for k, v in [
            ("tool", f"mortval {__version__}"),
            ("subcommand", self.subcommand),
            ("scenario", self.config_path),
            ("config_sha256", self.config_sha256),
            ("out_dir", self.out_dir),
            ("seed", f"{self.seed} ({self.seed_source})"),
            ("grid_scale", self.grid_scale),
            ("timestamp", self.timestamp),
        ])


def _open_out(manifest: RunManifest, name: str):
    path = os.path.join(manifest.out_dir, name)
    fh = open(path, "w", newline="")
    fh.write(manifest.header())
    return fh


def _probe_key(probe):
    r, lam, t = probe
    return f"{r!r},{lam!r},{t!r}"


def cmd_value(scenario: Scenario, manifest: RunManifest) -> int:
    n_max = max(scenario.sizes) if scenario.sizes else 1
    stack, rows = value_portfolio(scenario, n_max)
    with _open_out(manifest, "probes.csv") as fh:
        fh.write("r,lambda,t,n,value\n")
        for probe, k, v in rows:
            if k in scenario.sizes:
                fh.write(f"{_probe_key(probe)},{k},{v!r}\n")
    for n in scenario.sizes:
        if n < 1:
            continue
        with _open_out(manifest, f"surface_a_{n}.csv") as fh:
            stack.level(n).to_csv(fh)
    print(f"value: wrote probes.csv and {len([n for n in scenario.sizes if n >= 1])} "
          f"surface file(s) to {manifest.out_dir}")
    return 0


def cmd_bidask(scenario: Scenario, manifest: RunManifest) -> int:
    rows = bid_ask(scenario)
    grid = scenario.hazard_grid()
    with _open_out(manifest, "bidask.csv") as fh:
        fh.write("r,lambda,t,bid,alpha0,ask\n")
        for probe, bid, ask in rows:
            r, lam, t = probe
            base = float(fbeta_quadrature(
                scenario.hazard, scenario.rate, 0.0, [(r, lam)], t,
                scenario.horizon, grid=grid)[0]) * scenario.payment_rate
            fh.write(f"{_probe_key(probe)},{bid!r},{base!r},{ask!r}\n")
    print(f"bidask: wrote bidask.csv to {manifest.out_dir}")
    return 0


def cmd_check(scenario: Scenario, manifest: RunManifest) -> int:
    failures = []
    report = run_property_suite(scenario)
    with _open_out(manifest, "property_report.csv") as fh:
        report.to_csv(fh)
    with _open_out(manifest, "property_report.md") as fh:
        fh.write(report.to_markdown())
    if not report.all_pass:
        failures.append("property suite")

    # risk-charge decomposition per size at the first probe
    probe = scenario.probe_list()[0]
    sizes = [n for n in scenario.sizes if n >= 1]
    stack, _ = value_portfolio(scenario, max(sizes))
    with _open_out(manifest, "risk_charge.csv") as fh:
        fh.write("n,per_annuity,alpha0,limit_product,finite_portfolio,"
                 "stochastic_hazard\n")
        for n in sizes:
            rc = risk_charge_split(scenario, n, probe, stack=stack)
            fh.write(f"{n},{rc.per_annuity!r},{rc.base_alpha0!r},"
                     f"{rc.limit_product!r},{rc.finite_portfolio!r},"
                     f"{rc.stochastic_hazard!r}\n")
            if rc.finite_portfolio < -1e-3 or rc.stochastic_hazard < -1e-3:
                failures.append(f"risk charge negative at n={n}")

    # MC cross-checks against the PDE / quadrature values
    grid = scenario.hazard_grid()
    r, lam, t = probe
    estimates, targets = [], []
    est = mc_annuity_alpha0(scenario.hazard, scenario.rate, r, lam, t,
                            scenario.horizon, scenario.paths)
    tgt = float(fbeta_quadrature(scenario.hazard, scenario.rate, 0.0,
                                 [(r, lam)], t, scenario.horizon, grid=grid)[0])
    estimates.append(est)
    targets.append(("alpha0_quadrature", tgt))
    alpha = scenario.sharpe.signed_alpha
    est = mc_survival(scenario.hazard, MeasureSpec(tag="tilde", alpha=alpha),
                      lam, t, scenario.horizon, scenario.paths)
    beta = solve_beta(scenario.hazard, alpha, scenario.horizon, grid,
                      t_start=t)
    estimates.append(est)
    targets.append(("beta_pde", beta.value_at(lam, t)))
    est = mc_limit(scenario.hazard, scenario.rate, alpha, r, lam, t,
                   scenario.horizon, scenario.paths)
    kw = dict(mode=scenario.grid.mode)
    if scenario.grid.mode == "two_factor":
        kw["rate_grid"] = scenario.rate_grid()
    else:
        kw["r0"] = scenario.r0
    limit = solve_limit(scenario.hazard, scenario.rate, alpha,
                        scenario.horizon, grid, **kw)
    estimates.append(est)
    targets.append(("limit_pde",
                    limit.value_at(lam, t, r=r if limit.two_factor else None)))

    with _open_out(manifest, "mc_cross_check.csv") as fh:
        fh.write("label,mc_mean,mc_se,target,target_label,abs_diff,passed\n")
        for est, (tlabel, tval) in zip(estimates, targets):
            diff = abs(est.mean - tval)
            ok = diff <= max(3 * est.se, _MC_TOL)
            if not ok:
                failures.append(f"mc {est.label} vs {tlabel}")
            fh.write(f"{est.label},{est.mean!r},{est.se!r},{tval!r},{tlabel},"
                     f"{diff!r},{ok}\n")

    status = "all checks passed" if not failures else \
        "FAILED: " + "; ".join(failures)
    print(f"check: {status}; reports in {manifest.out_dir}")
    return 0 if not failures else 1


def cmd_endow(scenario: Scenario, manifest: RunManifest) -> int:
    sizes = [n for n in scenario.sizes if n >= 1]
    n_max = max(sizes)
    grid = scenario.hazard_grid()
    stack = solve_pure_endowment(scenario.hazard, scenario.sharpe, n_max,
                                 scenario.horizon, grid)
    with _open_out(manifest, "endow_probes.csv") as fh:
        fh.write("lambda,t,n,value\n")
        for (_, lam, t) in scenario.probe_list():
            for n in sizes:
                v = stack.level(n).value_at(lam, t)
                fh.write(f"{lam!r},{t!r},{n},{v!r}\n")
    with _open_out(manifest, f"surface_phi_{n_max}.csv") as fh:
        stack.level(n_max).to_csv(fh)
    print(f"endow: wrote endow_probes.csv and surface_phi_{n_max}.csv "
          f"to {manifest.out_dir}")
    return 0


def cmd_limit(scenario: Scenario, manifest: RunManifest) -> int:
    grid = scenario.hazard_grid()
    kw = dict(mode=scenario.grid.mode)
    if scenario.grid.mode == "two_factor":
        kw["rate_grid"] = scenario.rate_grid()
    else:
        kw["r0"] = scenario.r0
    surf = solve_limit(scenario.hazard, scenario.rate,
                       scenario.sharpe.signed_alpha, scenario.horizon,
                       grid, **kw)
    with _open_out(manifest, "limit_probes.csv") as fh:
        fh.write("r,lambda,t,value\n")
        for probe in scenario.probe_list():
            r, lam, t = probe
            v = surf.value_at(lam, t, r=r if surf.two_factor else None)
            fh.write(f"{_probe_key(probe)},{v!r}\n")
    with _open_out(manifest, "surface_limit.csv") as fh:
        surf.to_csv(fh)
    print(f"limit: wrote limit_probes.csv and surface_limit.csv to {manifest.out_dir}")
    return 0


def cmd_hedge(scenario: Scenario, manifest: RunManifest) -> int:
    stack, _ = value_portfolio(scenario, 1, store="all")
    with _open_out(manifest, "hedge_report.csv") as fh:
        fh.write("r,lambda,t,drift_emp,drift_pred,var_emp,var_pred,"
                 "sharpe_realized,sharpe_target,se_drift,se_var,se_sharpe\n")
        for probe in scenario.probe_list():
            r, lam, t = probe
            rep = simulate_hedged_portfolio(
                scenario.hazard, scenario.rate, scenario.sharpe,
                stack.level(1), r, lam, t, scenario.horizon, scenario.paths)
            fh.write(f"{_probe_key(probe)},{rep.drift_empirical!r},"
                     f"{rep.drift_predicted!r},{rep.variance_empirical!r},"
                     f"{rep.variance_predicted!r},{rep.sharpe_realized!r},"
                     f"{rep.sharpe_target!r},{rep.se_drift!r},"
                     f"{rep.se_variance!r},{rep.se_sharpe!r}\n")
    print(f"hedge: wrote hedge_report.csv to {manifest.out_dir}")
    return 0


_COMMANDS = {
    "value": cmd_value,
    "check": cmd_check,
    "bidask": cmd_bidask,
    "endow": cmd_endow,
    "limit": cmd_limit,
    "hedge": cmd_hedge,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mortval",
        description="Life-annuity valuation under stochastic hazard and rates")
    parser.add_argument("subcommand", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="scenario TOML file")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the scenario seed (beats MORTVAL_SEED)")
    parser.add_argument("--paths", type=int, default=None,
                        help="override the scenario path count")
    parser.add_argument("--grid-scale", type=float, default=1.0,
                        help="multiply grid sizes by this factor")
    args = parser.parse_args(argv)

    seed_override, seed_source = None, "config"
    env_seed = os.environ.get("MORTVAL_SEED")
    if env_seed is not None:
        try:
            seed_override = int(env_seed)
        except ValueError:
            print(f"error: MORTVAL_SEED={env_seed!r} is not an integer",
                  file=sys.stderr)
            return 2
        seed_source = "env"
    if args.seed is not None:
        seed_override, seed_source = args.seed, "flag"

    try:
        scenario = load_scenario(args.config, seed_override=seed_override,
                                 paths_override=args.paths,
                                 grid_scale=args.grid_scale)
        os.makedirs(args.out, exist_ok=True)
        manifest = RunManifest(args.config, args.subcommand, args.out,
                               scenario.paths.seed, seed_source,
                               args.grid_scale)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2

    try:
        return _COMMANDS[args.subcommand](scenario, manifest)
    except MortvalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
