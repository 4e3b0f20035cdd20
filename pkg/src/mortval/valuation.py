"""Scenario orchestration: full valuations, controls, hedges and the
executable property suite.

A scenario bundles the hazard and rate models, the Sharpe configuration,
grids, path settings and probe points.  On top of the PDE solvers this
module supplies the quadrature oracles (annuity-certain bound, the
risk-load-free value, the limit product form and the survivor-count
bound), optimal-control extraction with its algebraic identity, bid/ask
valuation, the risk-charge decomposition and the qualitative property
suite, by which every claim about the solved surfaces becomes a pass/fail
entry with a worst violation and its location.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .grids import HazardGrid, RateGrid, SolverConfig, Surface
from .models import (HazardModel, SharpeConfig, ShortRateModel, bond_delta,
                     bond_price, custom_hazard)
from .montecarlo import PathConfig
from .pde import (ValuationStack, default_time_steps, solve_annuity,
                  solve_beta, solve_limit, solve_pure_endowment)

__all__ = [
    "GridConfig",
    "Scenario",
    "ControlField",
    "RiskChargeReport",
    "PropertyCheck",
    "PropertyReport",
    "value_portfolio",
    "extract_controls",
    "hedge_ratio",
    "bid_ask",
    "risk_charge_split",
    "run_property_suite",
    "annuity_certain",
    "fbeta_quadrature",
    "fphi_quadrature",
    "alpha0_value",
]

_RADICAND_FLOOR = 1e-20     # below this the feedback controls are undefined


@dataclass(frozen=True)
class GridConfig:
    """Grid sizes and truncation for a scenario's solves."""

    mode: str = "deterministic_rate"
    n_hazard: int = 400
    n_rate: int = 80
    n_time: int | None = None
    lo_mult: float = 1e-5
    hi_mult: float = 50.0
    r_min: float | None = None
    r_max: float | None = None

    def __post_init__(self):
        if self.mode not in ("deterministic_rate", "two_factor"):
            raise DomainError(f"unknown mode {self.mode!r}")

    def steps(self, horizon: float) -> int:
        if self.n_time is not None:
            return self.n_time
        per_year = 200 if self.mode == "deterministic_rate" else 80
        return default_time_steps(horizon, per_year=per_year)


@dataclass(frozen=True)
class Scenario:
    """Everything needed to run one valuation end to end."""

    title: str
    hazard: HazardModel
    rate: ShortRateModel
    sharpe: SharpeConfig
    horizon: float
    r0: float
    lam0: float
    sizes: tuple = (1, 2, 5)
    eta: float | None = None
    payment_rate: float = 1.0
    grid: GridConfig = GridConfig()
    paths: PathConfig = PathConfig(paths=10_000)
    probes: tuple = ()
    solver: SolverConfig = SolverConfig()

    def __post_init__(self):
        if self.horizon <= 0:
            raise DomainError("horizon must be positive")
        if self.lam0 < self.hazard.lambda_floor:
            raise DomainError("lam0 below the hazard floor")
        if any(n < 0 for n in self.sizes):
            raise DomainError("portfolio sizes must be nonnegative")
        for (r, lam, t) in self.probes:
            if not 0.0 <= t <= self.horizon:
                raise DomainError(f"probe time {t} outside [0, horizon]")
            if lam < self.hazard.lambda_floor:
                raise DomainError(f"probe hazard {lam} below the floor")
            if r <= 0:
                raise DomainError(f"probe rate {r} must be positive")

    def hazard_grid(self) -> HazardGrid:
        ref = self.hazard.lam_ref if self.hazard.lam_ref is not None else self.lam0
        return HazardGrid.from_reference(
            self.hazard.lambda_floor, ref, self.grid.n_hazard,
            lo_mult=self.grid.lo_mult, hi_mult=self.grid.hi_mult,
            anchor_lam=self.lam0)

    def rate_grid(self) -> RateGrid:
        lo, hi = self.grid.r_min, self.grid.r_max
        if lo is None or hi is None:
            p = self.rate.params
            if self.rate.kind in ("vasicek", "cir"):
                sd = p["vol"] / math.sqrt(2 * p["kappa"])
                if self.rate.kind == "cir":
                    sd *= math.sqrt(max(p["theta"], self.r0))
                center = max(self.r0, p["theta"])
                lo = lo if lo is not None else max(1e-3, min(self.r0, p["theta"]) - 6 * sd)
                hi = hi if hi is not None else center + 6 * sd
            else:
                lo = lo if lo is not None else max(1e-3, 0.2 * self.r0)
                hi = hi if hi is not None else max(0.2, 3.0 * self.r0)
        return RateGrid.from_bounds(lo, hi, self.grid.n_rate, anchor_r=self.r0)

    def probe_list(self) -> list:
        if self.probes:
            return list(self.probes)
        return [(self.r0, self.lam0, 0.0)]

    def solve_kwargs(self, store="all") -> dict:
        kw = dict(horizon=self.horizon, hazard_grid=self.hazard_grid(),
                  mode=self.grid.mode, n_steps=self.grid.steps(self.horizon),
                  payment_rate=self.payment_rate, solver=self.solver,
                  store=store)
        if self.grid.mode == "two_factor":
            kw["rate_grid"] = self.rate_grid()
        else:
            kw["r0"] = self.r0
        return kw

    def probe_value(self, surface: Surface, probe) -> float:
        r, lam, t = probe
        return surface.value_at(lam, t, r=r if surface.two_factor else None)


def value_portfolio(scenario: Scenario, n: int, store=None):
    """Solve the size recursion to level n; returns (stack, probe rows).

    Probe rows are ``(probe, level, value)`` for every level 1..n at every
    scenario probe.
    """
    if store is None:
        store = sorted({0.0, scenario.horizon} | {t for (_, _, t) in scenario.probe_list()})
    stack = solve_annuity(scenario.hazard, scenario.rate, scenario.sharpe, n,
                          **scenario.solve_kwargs(store=store))
    rows = []
    for probe in scenario.probe_list():
        for k in range(1, n + 1):
            rows.append((probe, k, scenario.probe_value(stack.level(k), probe)))
    return stack, rows


# ---------------------------------------------------------------------------
# quadrature oracles
# ---------------------------------------------------------------------------

def _simpson_nodes(t: float, horizon: float, n_quad: int):
    if n_quad % 2 or n_quad < 2:
        raise DomainError("Simpson rule needs an even interval count")
    h = (horizon - t) / n_quad
    nodes = t + h * np.arange(n_quad + 1)
    w = np.ones(n_quad + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return nodes, w * h / 3.0


def annuity_certain(rate: ShortRateModel, r: float, t: float, horizon: float,
                    n_quad: int = 128) -> float:
    """Deterministic upper bound per contract: integral of the bond price."""
    if horizon <= t:
        return 0.0
    nodes, w = _simpson_nodes(t, horizon, n_quad)
    vals = np.array([bond_price(rate, r, t, float(s)) for s in nodes])
    return float(np.dot(w, vals))


def fbeta_quadrature(hazard: HazardModel, rate: ShortRateModel, alpha: float,
                     pairs, t: float, horizon: float, *, grid: HazardGrid,
                     n_quad: int = 64, per_year: int = 120,
                     solver: SolverConfig = SolverConfig()) -> np.ndarray:
    """Product quadrature ``int F(r, t; s) beta(lam, t; s) ds`` per (r, lam).

    With ``alpha = 0`` the survival factor is the physical one and the
    result is the risk-load-free value.  One backward solve per Simpson
    node; probe hazards are read off the stored slice at ``t``.
    """
    pairs = list(pairs)
    if horizon <= t:
        return np.zeros(len(pairs))
    rs = np.array([p[0] for p in pairs])
    lams = np.array([p[1] for p in pairs])
    nodes, w = _simpson_nodes(t, horizon, n_quad)
    total = np.zeros(len(pairs))
    for j, s in enumerate(nodes):
        if s <= t:
            integrand = np.ones(len(pairs))          # F = beta = 1 at s = t
        else:
            n_steps = max(16, int(math.ceil((s - t) * per_year)))
            surf = solve_beta(hazard, alpha, float(s), grid,
                              n_steps=n_steps, solver=solver, t_start=t)
            betas = surf.eval_many(lams, t)
            F = np.array([bond_price(rate, float(r), t, float(s)) for r in rs])
            integrand = F * betas
        total += w[j] * integrand
    return total


def alpha0_value(hazard: HazardModel, rate: ShortRateModel, r: float,
                 lam: float, t: float, horizon: float, *, grid: HazardGrid,
                 n_quad: int = 64, per_year: int = 120) -> float:
    """Risk-load-free value: discounted physical survival, by quadrature."""
    return float(fbeta_quadrature(hazard, rate, 0.0, [(r, lam)], t, horizon,
                                  grid=grid, n_quad=n_quad, per_year=per_year)[0])


def fphi_quadrature(hazard: HazardModel, sharpe: SharpeConfig,
                    rate: ShortRateModel, n: int, pairs, t: float,
                    horizon: float, *, grid: HazardGrid, n_quad: int = 64,
                    per_year: int = 120,
                    solver: SolverConfig = SolverConfig()) -> np.ndarray:
    """Upper sandwich bound ``int F(r, t; s) phi_n(lam, t; s) ds``.

    Returns an array of shape (n + 1, len(pairs)); row k is the bound for
    portfolio size k (row 0 is zero).
    """
    pairs = list(pairs)
    out = np.zeros((n + 1, len(pairs)))
    if horizon <= t or n == 0:
        return out
    rs = np.array([p[0] for p in pairs])
    lams = np.array([p[1] for p in pairs])
    nodes, w = _simpson_nodes(t, horizon, n_quad)
    for j, s in enumerate(nodes):
        if s <= t:
            phis = np.arange(n + 1)[:, None] * np.ones(len(pairs))[None, :]
            F = np.ones(len(pairs))
        else:
            n_steps = max(16, int(math.ceil((s - t) * per_year)))
            stack = solve_pure_endowment(hazard, sharpe, n, float(s), grid,
                                         n_steps=n_steps, solver=solver,
                                         t_start=t)
            phis = np.stack([stack.level(k).eval_many(lams, t)
                             for k in range(n + 1)])
            F = np.array([bond_price(rate, float(r), t, float(s)) for r in rs])
        out += w[j] * F[None, :] * phis
    return out


# ---------------------------------------------------------------------------
# optimal controls
# ---------------------------------------------------------------------------

@dataclass
class ControlField:
    """Optimal feedback controls on the level-1 solve grid.

    Lookups use the nearest stored time slice and bilinear interpolation
    in space, then renormalize into the admissible ellipse
    ``delta^2 + lam gamma^2 <= alpha^2`` (interpolation between nodes can
    overshoot it by O(dy)).  ``flagged`` marks nodes where the radicand
    vanished and the controls default to zero.
    """

    alpha: float
    delta_surface: Surface
    gamma_surface: Surface
    flagged: np.ndarray

    def pair(self, r, lam, t):
        """(delta, gamma) at path states, one fused interpolation pass."""
        ds = self.delta_surface
        hg = ds.hazard_grid
        lam = np.asarray(lam, dtype=float)
        gap = lam - hg.lam_floor
        y = hg.y
        yq = np.clip(np.where(gap > 0, np.log(np.maximum(gap, 1e-300)), y[0]),
                     y[0], y[-1])
        k = int(np.argmin(np.abs(ds.times - t)))
        zd, zg = ds.values[k], self.gamma_surface.values[k]
        if ds.two_factor:
            xs = ds.rate_grid.r
            rq = np.clip(np.asarray(r, dtype=float), xs[0], xs[-1])
            i = np.clip(np.searchsorted(xs, rq) - 1, 0, len(xs) - 2)
            j = np.clip(np.searchsorted(y, yq) - 1, 0, len(y) - 2)
            wx = (rq - xs[i]) / (xs[i + 1] - xs[i])
            wy = (yq - y[j]) / (y[j + 1] - y[j])
            ny = len(y)
            base = i * ny + j
            w00 = (1 - wx) * (1 - wy)
            w10 = wx * (1 - wy)
            w01 = (1 - wx) * wy
            w11 = wx * wy

            def gather(z):
                f = z.ravel()
                return (w00 * f[base] + w10 * f[base + ny]
                        + w01 * f[base + 1] + w11 * f[base + ny + 1])

            d, g = gather(zd), gather(zg)
        else:
            d = np.interp(yq, y, zd)
            g = np.interp(yq, y, zg)
        norm2 = d * d + lam * g * g
        a2 = self.alpha * self.alpha
        scale = np.where(norm2 > a2, np.sqrt(a2 / np.maximum(norm2, 1e-300)), 1.0)
        return d * scale, np.maximum(g * scale, -1.0)

    def delta(self, r, lam, t):
        return self.pair(r, lam, t)[0]

    def gamma(self, r, lam, t):
        return self.pair(r, lam, t)[1]

    def identity_stats(self, identity_tol: float = 1e-10):
        """Diagnostics over nodes above the smoothing threshold (unflagged):
        (max |delta^2 + lam gamma^2 - alpha^2|, fraction of those nodes
        satisfying the identity and gamma > -1, min gamma)."""
        d = self.delta_surface.values
        g = self.gamma_surface.values
        lam = self.delta_surface.hazard_grid.lam
        ident = np.abs(d * d + lam * g * g - self.alpha * self.alpha)
        ok = ~self.flagged
        if not np.any(ok):
            return 0.0, 1.0, 0.0
        passing = (ident[ok] <= identity_tol) & (g[ok] > -1.0)
        return (float(np.max(ident[ok])), float(np.mean(passing)),
                float(np.min(g[ok])))


def extract_controls(a_surface: Surface, hazard: HazardModel,
                     alpha: float) -> ControlField:
    """Nodewise optimal controls from a level-1 seller surface.

    ``delta* = alpha sigma (lam-floor) a_lam / sqrt(rad)`` and
    ``gamma* = -alpha a / sqrt(rad)`` with
    ``rad = sigma^2 (lam-floor)^2 a_lam^2 + lam a^2``; in the log
    coordinate ``(lam-floor) a_lam`` is just ``a_y``.  Nodes with a
    vanishing radicand (the terminal slice) are flagged and set to zero.
    """
    if a_surface.meta.get("level", 1) != 1:
        raise DomainError("controls are defined for the level-1 surface")
    v = a_surface.values
    hg = a_surface.hazard_grid
    lam = hg.lam
    dy = hg.dy
    ay = np.empty_like(v)
    ay[..., 1:-1] = (v[..., 2:] - v[..., :-2]) / (2 * dy)
    ay[..., 0] = (v[..., 1] - v[..., 0]) / dy
    ay[..., -1] = (v[..., -1] - v[..., -2]) / dy

    times = a_surface.times
    n_t = len(times)
    sig = np.array([hazard.vol(t) for t in times])
    sig = sig.reshape((n_t,) + (1,) * (v.ndim - 1))
    rad = sig * sig * ay * ay + lam * v * v
    flagged = rad <= _RADICAND_FLOOR
    root = np.sqrt(np.where(flagged, 1.0, rad))
    delta = np.where(flagged, 0.0, alpha * sig * ay / root)
    gamma = np.where(flagged, 0.0, -alpha * v / root)

    mk = dict(a_surface.meta)
    ds = Surface(label="delta_star", values=delta, times=times,
                 hazard_grid=hg, rate_grid=a_surface.rate_grid, meta=mk)
    gs = Surface(label="gamma_star", values=gamma, times=times,
                 hazard_grid=hg, rate_grid=a_surface.rate_grid, meta=mk)
    return ControlField(alpha=alpha, delta_surface=ds, gamma_surface=gs,
                        flagged=flagged)


def hedge_ratio(a_surface: Surface, hazard: HazardModel, rate: ShortRateModel,
                r: float, lam: float, t: float, *, bump: float = 1e-4) -> float:
    """Variance-minimizing bond position ``a_r / F_r``.

    Two-factor surfaces differentiate the stored values in r; in
    deterministic-rate mode the rate sensitivity comes from re-solving the
    annuity at bumped initial rates.
    """
    horizon = a_surface.meta.get("horizon")
    if horizon is None:
        raise DomainError("surface lacks a horizon in its metadata")
    if t >= horizon:
        return 0.0
    Fr = bond_delta(rate, r, t, horizon)
    if Fr == 0.0:
        from .errors import DegenerateHedgeError
        raise DegenerateHedgeError("bond price has zero rate sensitivity")
    if a_surface.two_factor:
        dr = a_surface.rate_grid.dr
        a_up = a_surface.value_at(lam, t, r=r + dr)
        a_dn = a_surface.value_at(lam, t, r=r - dr)
        return (a_up - a_dn) / (2 * dr) / Fr
    # deterministic-rate: rebuild the level at bumped initial rates
    meta = a_surface.meta
    level = meta.get("level", 1)
    signed = meta.get("alpha", 0.0)
    sharpe = SharpeConfig(alpha=abs(signed), lambda_floor=hazard.lambda_floor,
                          buyer=signed < 0)
    vals = []
    for rb in (meta["r_fixed"] + bump, meta["r_fixed"] - bump):
        stack = solve_annuity(hazard, rate, sharpe, level,
                              horizon=horizon, hazard_grid=a_surface.hazard_grid,
                              mode="deterministic_rate", r0=rb,
                              n_steps=len(a_surface.times) - 1,
                              payment_rate=meta.get("payment_rate", 1.0),
                              store=[t])
        vals.append(stack.level(level).value_at(lam, t))
    return (vals[0] - vals[1]) / (2 * bump) / Fr


def bid_ask(scenario: Scenario):
    """Seller (+alpha) and buyer (-alpha) level-1 values at each probe."""
    seller_cfg = dataclasses.replace(scenario.sharpe, buyer=False)
    buyer_cfg = dataclasses.replace(scenario.sharpe, buyer=True)
    store = sorted({0.0, scenario.horizon} | {t for (_, _, t) in scenario.probe_list()})
    kw = scenario.solve_kwargs(store=store)
    seller = solve_annuity(scenario.hazard, scenario.rate, seller_cfg, 1, **kw)
    buyer = solve_annuity(scenario.hazard, scenario.rate, buyer_cfg, 1, **kw)
    rows = []
    for probe in scenario.probe_list():
        bid = scenario.probe_value(buyer.level(1), probe)
        ask = scenario.probe_value(seller.level(1), probe)
        rows.append((probe, bid, ask))
    return rows


@dataclass(frozen=True)
class RiskChargeReport:
    """Per-annuity risk charge split at one probe.

    ``finite_portfolio + stochastic_hazard == per_annuity - base`` exactly
    by construction.
    """

    probe: tuple
    n: int
    per_annuity: float
    base_alpha0: float
    limit_product: float
    finite_portfolio: float
    stochastic_hazard: float


def risk_charge_split(scenario: Scenario, n: int, probe, *,
                      stack: ValuationStack | None = None,
                      n_quad: int = 64, per_year: int = 120) -> RiskChargeReport:
    """Split the per-annuity risk charge into its finite-portfolio and
    stochastic-hazard components at a probe point."""
    if n < 1:
        raise DomainError("risk charge needs n >= 1")
    if stack is None:
        stack, _ = value_portfolio(scenario, n)
    r, lam, t = probe
    per = scenario.probe_value(stack.level(n), probe) / n
    grid = stack.level(n).hazard_grid
    fbeta = float(fbeta_quadrature(scenario.hazard, scenario.rate,
                                   scenario.sharpe.signed_alpha, [(r, lam)],
                                   t, scenario.horizon, grid=grid,
                                   n_quad=n_quad, per_year=per_year)[0])
    base = float(fbeta_quadrature(scenario.hazard, scenario.rate, 0.0,
                                  [(r, lam)], t, scenario.horizon, grid=grid,
                                  n_quad=n_quad, per_year=per_year)[0])
    return RiskChargeReport(probe=tuple(probe), n=n, per_annuity=per,
                            base_alpha0=base, limit_product=fbeta,
                            finite_portfolio=per - fbeta,
                            stochastic_hazard=fbeta - base)


# ---------------------------------------------------------------------------
# property suite
# ---------------------------------------------------------------------------

@dataclass
class PropertyCheck:
    pid: str
    description: str
    status: str          # pass | fail | not_applicable
    worst: float
    location: str
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.status != "fail"


@dataclass
class PropertyReport:
    scenario: str
    checks: list = field(default_factory=list)

    def add(self, pid, description, violation, tolerance, location="",
            not_applicable=None):
        if not_applicable:
            status = "not_applicable"
            location = not_applicable
        else:
            status = "pass" if violation <= tolerance else "fail"
        self.checks.append(PropertyCheck(pid=pid, description=description,
                                         status=status, worst=float(violation),
                                         location=location,
                                         tolerance=float(tolerance)))

    @property
    def all_pass(self) -> bool:
        return all(c.ok for c in self.checks)

    def to_markdown(self) -> str:
        lines = [f"# Property report: {self.scenario}", "",
                 "| id | property | status | worst violation | tolerance | location |",
                 "|----|----------|--------|-----------------|-----------|----------|"]
        for c in self.checks:
            lines.append(f"| {c.pid} | {c.description} | {c.status} | "
                         f"{c.worst:.3e} | {c.tolerance:.3e} | {c.location} |")
        return "\n".join(lines) + "\n"

    def to_csv(self, fh) -> None:
        owns = isinstance(fh, str)
        out = open(fh, "w", newline="") if owns else fh
        try:
            out.write("property,status,worst_violation,tolerance,location\n")
            for c in self.checks:
                out.write(f"{c.pid},{c.status},{c.worst!r},{c.tolerance!r},"
                          f"\"{c.location}\"\n")
        finally:
            if owns:
                out.close()


def _worst_over(levels_values):
    """Max violation and its flat location over an iterable of
    (violation_array, tag) pairs."""
    worst, where = -np.inf, ""
    for arr, tag in levels_values:
        arr = np.asarray(arr)
        if arr.size == 0:
            continue
        m = float(np.max(arr))
        if m > worst:
            worst = m
            where = f"{tag}[{int(np.argmax(arr))}]"
    return max(worst, 0.0), where


def run_property_suite(scenario: Scenario, *, stack: ValuationStack | None = None,
                       n_quad: int = 64, per_year: int = 120) -> PropertyReport:
    """Evaluate the qualitative properties of the solved portfolio values.

    Monotonicity tolerances are additive, ``1e-3 * n``, because the
    surfaces vanish at the horizon where relative error is meaningless.
    The volatility-comparison property is conditional on computed
    convexity and reports "not applicable" when the hypothesis fails.
    """
    sizes = sorted(set(int(n) for n in scenario.sizes if n >= 1))
    if not sizes:
        raise DomainError("property suite needs at least one positive size")
    n_max = max(sizes)
    tol = lambda n: 1e-3 * n
    report = PropertyReport(scenario=scenario.title)
    probes = scenario.probe_list()
    store = sorted({0.0, scenario.horizon} | {t for (_, _, t) in probes})

    if stack is None or stack.n < n_max:
        stack, _ = value_portfolio(scenario, n_max, store=store)
    grid = stack.level(min(1, stack.n)).hazard_grid

    def probe_vals(surf):
        return np.array([scenario.probe_value(surf, p) for p in probes])

    # P1 no arbitrage: 0 <= a_n <= n * annuity-certain
    viols = []
    for n in sizes:
        surf = stack.level(n)
        for k, t in enumerate(surf.times):
            sl = surf.values[k]
            if surf.two_factor:
                bound = np.array([annuity_certain(scenario.rate, float(rv), float(t),
                                                  scenario.horizon)
                                  for rv in surf.rate_grid.r])[:, None]
            else:
                bound = annuity_certain(scenario.rate, scenario.r0, float(t),
                                        scenario.horizon)
            viols.append((np.maximum(-sl, sl - n * bound * scenario.payment_rate),
                          f"n={n},t={t:.3g}"))
    worst, where = _worst_over(viols)
    report.add("P1", "no arbitrage bounds", worst, tol(n_max), where)

    # P2 increasing in n (marginal value nonnegative)
    viols = [(stack.level(k - 1).values - stack.level(k).values, f"n={k}")
             for k in range(1, stack.n + 1)]
    worst, where = _worst_over(viols)
    report.add("P2", "increasing in portfolio size", worst, tol(n_max), where)

    # P3 decreasing in hazard
    viols = []
    for n in sizes:
        v = stack.level(n).values
        viols.append((np.diff(v, axis=-1), f"n={n}"))
    worst, where = _worst_over(viols)
    report.add("P3", "decreasing in the hazard rate", worst, tol(n_max), where)

    # P4 increasing in the Sharpe ratio
    half = dataclasses.replace(scenario.sharpe, alpha=scenario.sharpe.alpha / 2)
    n_cmp = [n for n in sizes if n <= 5] or [sizes[0]]
    kw = scenario.solve_kwargs(store=store)
    stack_half = solve_annuity(scenario.hazard, scenario.rate, half,
                               max(n_cmp), **kw)
    viols = [(stack_half.level(n).values - stack.level(n).values, f"n={n}")
             for n in n_cmp]
    worst, where = _worst_over(viols)
    report.add("P4", "increasing in the Sharpe ratio", worst, tol(max(n_cmp)), where)

    # P5 lower bound n * alpha0 value
    base = _grouped_fbeta(scenario, probes, 0.0, grid, n_quad, per_year)
    viols = []
    for n in sizes:
        pv = probe_vals(stack.level(n))
        viols.append((n * base - pv, f"n={n}"))
    worst, where = _worst_over(viols)
    report.add("P5", "bounded below by the risk-load-free value", worst,
               tol(n_max), where)

    # P6 decreasing in the hazard drift
    shifted = custom_hazard(
        lambda lam, t: scenario.hazard.drift(lam, t) + 0.25,
        scenario.hazard.vol_fn, scenario.hazard.lambda_floor,
        lam_ref=scenario.hazard.lam_ref)
    stack_mu = solve_annuity(shifted, scenario.rate, scenario.sharpe,
                             max(n_cmp), **kw)
    viols = [(stack_mu.level(n).values - stack.level(n).values, f"n={n}")
             for n in n_cmp]
    worst, where = _worst_over(viols)
    report.add("P6", "decreasing in the hazard drift", worst, tol(max(n_cmp)), where)

    # P7 increasing in volatility, conditional on convexity in the hazard
    n7 = n_cmp[-1]
    surf = stack.level(n7)
    v = surf.values
    dy = grid.dy
    lam_row = grid.lam
    vy = (v[..., 2:] - v[..., :-2]) / (2 * dy)
    vyy = (v[..., 2:] - 2 * v[..., 1:-1] + v[..., :-2]) / (dy * dy)
    gap = (lam_row - grid.lam_floor)[1:-1]
    a_ll = (vyy - vy) / (gap * gap)
    convex = bool(np.all(a_ll >= -1e-6 * n7))
    if not convex:
        report.add("P7", "increasing in volatility (needs convexity)", 0.0,
                   tol(n7), not_applicable="not applicable (non-convex): "
                   f"min a_lamlam = {float(np.min(a_ll)):.3e}")
    else:
        wider = custom_hazard(
            scenario.hazard.drift_fn,
            lambda t: 1.25 * scenario.hazard.vol(t),
            scenario.hazard.lambda_floor, lam_ref=scenario.hazard.lam_ref)
        stack_sig = solve_annuity(wider, scenario.rate, scenario.sharpe, n7, **kw)
        viols = [(stack.level(n7).values - stack_sig.level(n7).values, f"n={n7}")]
        worst, where = _worst_over(viols)
        report.add("P7", "increasing in volatility (convex case)", worst,
                   tol(n7), where)

    # P8 subadditivity on representative pairs
    pairs = [(m, n) for (m, n) in [(1, 1), (1, 2), (2, 3), (5, 5)]
             if m + n <= stack.n]
    viols = []
    for (m, n) in pairs:
        v = stack.level(m + n).values - stack.level(m).values - stack.level(n).values
        viols.append((v, f"(m,n)=({m},{n})"))
    worst, where = _worst_over(viols)
    report.add("P8", "subadditive in portfolio size", worst,
               tol(max((m + n) for (m, n) in pairs) if pairs else 1), where)

    # P9 decreasing value per risk
    viols = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        va = probe_vals(stack.level(a)) / a
        vb = probe_vals(stack.level(b)) / b
        viols.append((vb - va, f"{a}->{b}"))
    worst, where = _worst_over(viols)
    report.add("P9", "decreasing value per risk", worst, tol(n_max), where)

    # P10 scaling in the payment rate
    k_rate = 2.5
    scaled = dataclasses.replace(scenario, payment_rate=scenario.payment_rate * k_rate)
    n10 = min(2, n_max)
    stack_k = solve_annuity(scenario.hazard, scenario.rate, scenario.sharpe,
                            n10, **scaled.solve_kwargs(store=store))
    viols = [(np.abs(stack_k.level(n10).values - k_rate * stack.level(n10).values),
              f"n={n10}")]
    worst, where = _worst_over(viols)
    report.add("P10", "payment-rate scaling is exact", worst, 1e-12, where)

    # Lemmas: sandwich bounds at the probes (survivor bound capped at n=10)
    fbeta = _grouped_fbeta(scenario, probes, scenario.sharpe.signed_alpha,
                           grid, n_quad, per_year)
    lemma_sizes = [n for n in sizes if n <= 10] or [sizes[0]]
    fphi = _grouped_fphi(scenario, probes, max(lemma_sizes), grid, n_quad,
                         per_year)
    lo_viol, hi_viol = [], []
    for n in sizes:
        pv = probe_vals(stack.level(n))
        lo_viol.append((n * fbeta - pv, f"n={n}"))
        if n in lemma_sizes:
            hi_viol.append((pv - fphi[n], f"n={n}"))
    worst, where = _worst_over(lo_viol)
    report.add("L4.3", "product lower bound per contract", worst, tol(n_max), where)
    worst, where = _worst_over(hi_viol)
    report.add("L4.2", "survivor-count upper bound", worst,
               tol(max(lemma_sizes)), where)

    # limit trend: per-risk values decrease toward the product bound
    per_risk = {n: float(np.mean(probe_vals(stack.level(n)) / n)) for n in sizes}
    dec = all(per_risk[a] > per_risk[b] for a, b in zip(sizes[:-1], sizes[1:]))
    mid = next((n for n in sizes if n >= 5), sizes[len(sizes) // 2])
    if mid != n_max:
        fbeta_mean = float(np.mean(fbeta))
        gap_mid = per_risk[mid] - fbeta_mean
        gap_max = per_risk[n_max] - fbeta_mean
        ratio = gap_max / gap_mid if gap_mid > 0 else 0.0
        ok = dec and ratio <= 0.6
        report.add("T4.4", "per-risk values decrease toward the limit",
                   0.0 if ok else max(ratio - 0.6, 1e-9), 0.0,
                   f"gap ratio n={n_max} vs n={mid}: {ratio:.3f}, "
                   f"decreasing={dec}")
    else:
        report.add("T4.4", "per-risk values decrease toward the limit",
                   0.0 if dec else 1.0, 0.0, f"decreasing={dec}")
    return report


def _grouped_fbeta(scenario, probes, alpha, grid, n_quad, per_year):
    """fbeta quadrature per probe, one solve family per distinct probe time."""
    out = np.empty(len(probes))
    for t in sorted({p[2] for p in probes}):
        idx = [i for i, p in enumerate(probes) if p[2] == t]
        vals = fbeta_quadrature(scenario.hazard, scenario.rate, alpha,
                                [(probes[i][0], probes[i][1]) for i in idx],
                                t, scenario.horizon, grid=grid,
                                n_quad=n_quad, per_year=per_year)
        for k, i in enumerate(idx):
            out[i] = vals[k] * scenario.payment_rate
    return out


def _grouped_fphi(scenario, probes, n, grid, n_quad, per_year):
    """fphi quadrature per probe, rows are portfolio sizes 0..n."""
    out = np.empty((n + 1, len(probes)))
    for t in sorted({p[2] for p in probes}):
        idx = [i for i, p in enumerate(probes) if p[2] == t]
        vals = fphi_quadrature(scenario.hazard, scenario.sharpe, scenario.rate,
                               n, [(probes[i][0], probes[i][1]) for i in idx],
                               t, scenario.horizon, grid=grid, n_quad=n_quad,
                               per_year=per_year)
        for k, i in enumerate(idx):
            out[:, i] = vals[:, k] * scenario.payment_rate
    return out
