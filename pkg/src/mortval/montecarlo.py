"""Path simulation and Feynman-Kac oracles for every expectation form.

Hazard paths are stepped in the log coordinate ``y = ln(lam - floor)`` so
positivity above the floor is exact.  Estimators stream over fixed-size
chunks of paths; each chunk draws from its own substream derived from the
base seed and the chunk index, so results are bitwise reproducible and
independent of how chunks would be scheduled.  Means and standard errors
reduce with numpy's pairwise summation in a fixed order.

Measure tags select the drift substitutions:

========  =====================  ==================
tag       hazard drift           rate drift
========  =====================  ==================
physical  mu                     b
Q         mu                     b - q c
tilde     mu - alpha sigma       b
hat       mu - alpha sigma       b - q c
bar       mu + delta sigma       b - q c
========  =====================  ==================

Under ``bar`` the survival discount uses the tilted intensity
``lam (1 + gamma)``; the controls must satisfy
``delta^2 + lam gamma^2 <= alpha^2`` and ``gamma >= -1`` at every
evaluated point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ControlConstraintError, DegenerateHedgeError, DomainError
from .grids import Surface
from .models import (HazardModel, SharpeConfig, ShortRateModel, bond_delta,
                     bond_price, constant_rate, drift_under_Q)

__all__ = [
    "PathConfig",
    "MeasureSpec",
    "McEstimate",
    "HedgeCheckReport",
    "PathBundle",
    "simulate_paths",
    "mc_survival",
    "mc_annuity_alpha0",
    "mc_limit",
    "mc_good_deal",
    "simulate_hedged_portfolio",
    "write_estimates_csv",
]

# Fixed chunk width: the chunk partition is part of the determinism
# contract, so estimates cannot depend on scheduling or worker counts.
_CHUNK = 4096

_MEASURES = ("physical", "Q", "tilde", "hat", "bar")
_QDRIFT = {"physical": False, "Q": True, "tilde": False, "hat": True, "bar": True}
_ALPHA_SHIFT = ("tilde", "hat")


@dataclass(frozen=True)
class PathConfig:
    """Path count, Euler resolution, base seed and antithetic flag."""

    paths: int
    steps_per_year: int = 252
    seed: int = 0
    antithetic: bool = False

    def __post_init__(self):
        if self.paths < 1:
            raise DomainError("paths must be >= 1")
        if self.steps_per_year < 1:
            raise DomainError("steps_per_year must be >= 1")
        if self.seed < 0:
            raise DomainError("seed must be nonnegative")
        if self.antithetic and self.paths % 2:
            raise DomainError("antithetic sampling needs an even path count")


@dataclass(frozen=True)
class MeasureSpec:
    """Which drift substitution to simulate under.

    ``alpha`` feeds the hazard-drift shift of the tilde/hat measures;
    ``delta_fn``/``gamma_fn`` are the control fields of the bar measure,
    evaluated as ``fn(r, lam, t)`` on path arrays.
    """

    tag: str
    alpha: float = 0.0
    delta_fn: Callable | None = None
    gamma_fn: Callable | None = None

    def __post_init__(self):
        if self.tag not in _MEASURES:
            raise DomainError(f"unknown measure tag {self.tag!r}")
        if self.tag == "bar" and (self.delta_fn is None or self.gamma_fn is None):
            raise DomainError("bar measure requires delta_fn and gamma_fn")


@dataclass(frozen=True)
class McEstimate:
    label: str
    mean: float
    se: float
    paths: int
    seed: int

    def __post_init__(self):
        if self.se < 0:
            raise DomainError("standard error must be >= 0")


@dataclass(frozen=True)
class HedgeCheckReport:
    """Empirical vs predicted drift / local variance of the hedged portfolio."""

    drift_empirical: float
    drift_predicted: float
    variance_empirical: float
    variance_predicted: float
    sharpe_realized: float
    sharpe_target: float
    se_drift: float
    se_variance: float
    se_sharpe: float
    paths: int
    seed: int


@dataclass(frozen=True)
class PathBundle:
    times: np.ndarray
    lam: np.ndarray
    r: np.ndarray
    measure: str
    seed: int


def _chunks(total: int):
    start, idx = 0, 0
    while start < total:
        size = min(_CHUNK, total - start)
        yield idx, size
        start += size
        idx += 1


def _chunk_rng(seed: int, chunk_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(chunk_index,))
    return np.random.Generator(np.random.PCG64(ss))


def _normals(rng, m: int, antithetic: bool) -> np.ndarray:
    if not antithetic:
        return rng.standard_normal(m)
    half = (m + 1) // 2
    z = rng.standard_normal(half)
    return np.concatenate([z, -z])[:m]


def _check_initial_hazard(hazard: HazardModel, lam0: float):
    if lam0 < hazard.lambda_floor or (
        lam0 == hazard.lambda_floor and hazard.kind != "constant"
    ):
        raise DomainError(
            f"initial hazard {lam0} at or below the floor {hazard.lambda_floor}"
        )


def _step_chunk(hazard, rate, measure, times, r0, lam0, rng, m, antithetic,
                on_step):
    """Euler-march one chunk of paths; returns final (r, lam) arrays.

    ``on_step(j, t_new, dt, r_old, lam_old, r_new, lam_new)`` runs after
    each move.  A hazard starting exactly at the floor is the degenerate
    constant case and stays put.
    """
    floor = hazard.lambda_floor
    gap0 = lam0 - floor
    frozen = gap0 == 0.0
    y = None if frozen else np.full(m, math.log(gap0))
    lam = np.full(m, float(lam0))
    r = np.full(m, float(r0))
    qdrift = _QDRIFT[measure.tag]
    alpha_shift = measure.alpha if measure.tag in _ALPHA_SHIFT else 0.0

    for j in range(len(times) - 1):
        t, t_next = times[j], times[j + 1]
        dt = t_next - t
        sdt = math.sqrt(dt)
        r_old, lam_old = r, lam

        z_lam = _normals(rng, m, antithetic)
        z_r = _normals(rng, m, antithetic)

        if not frozen:
            s = hazard.vol(t)
            mu = hazard.drift(lam, t)
            if measure.tag == "bar":
                mu = mu + measure.delta_fn(r, lam, t) * s
            elif alpha_shift:
                mu = mu - alpha_shift * s
            y = y + (mu - 0.5 * s * s) * dt + s * sdt * z_lam
            lam = floor + np.exp(y)

        b = drift_under_Q(rate, r, t) if qdrift else rate.b(r, t)
        r = r + b * dt + rate.c(r, t) * sdt * z_r

        on_step(j, t_next, dt, r_old, lam_old, r, lam)
    return r, lam


def simulate_paths(hazard: HazardModel, rate: ShortRateModel,
                   measure: MeasureSpec, config: PathConfig,
                   t0: float, t1: float, r0: float, lam0: float) -> PathBundle:
    """Full path bundle; intended for modest path counts (diagnostics).

    Estimator routines stream over the same stepping kernel instead of
    materializing paths, so they share the determinism contract.
    """
    if t1 <= t0:
        raise DomainError("t1 must exceed t0")
    _check_initial_hazard(hazard, lam0)
    n_steps = max(1, int(math.ceil((t1 - t0) * config.steps_per_year)))
    if config.paths * (n_steps + 1) > 20_000_000:
        raise DomainError(
            "path bundle too large to materialize; use an estimator instead"
        )
    times = np.linspace(t0, t1, n_steps + 1)
    lam_out = np.empty((config.paths, n_steps + 1))
    r_out = np.empty((config.paths, n_steps + 1))
    lam_out[:, 0] = lam0
    r_out[:, 0] = r0
    row = 0
    for idx, m in _chunks(config.paths):
        rng = _chunk_rng(config.seed, idx)
        sl = slice(row, row + m)

        def record(j, t, dt, r_old, lam_old, r_new, lam_new, sl=sl):
            lam_out[sl, j + 1] = lam_new
            r_out[sl, j + 1] = r_new

        _step_chunk(hazard, rate, measure, times, r0, lam0, rng, m,
                    config.antithetic, record)
        row += m
    return PathBundle(times=times, lam=lam_out, r=r_out, measure=measure.tag,
                      seed=config.seed)


def _estimate(label: str, values: np.ndarray, config: PathConfig) -> McEstimate:
    n_paths = len(values)
    if config.antithetic:
        # each chunk holds mirrored halves; the i.i.d. samples are the
        # pair averages, which is what the standard error must reflect
        folded = []
        start = 0
        for _, m in _chunks(n_paths):
            seg = values[start:start + m]
            half = m // 2
            if half:
                folded.append(0.5 * (seg[:half] + seg[half:2 * half]))
            start += m
        values = np.concatenate(folded)
    mean = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    return McEstimate(label=label, mean=mean, se=se, paths=n_paths,
                      seed=config.seed)


def mc_survival(hazard: HazardModel, measure: MeasureSpec, lam0: float,
                t: float, s: float, config: PathConfig) -> McEstimate:
    """Estimate of ``E[exp(-int_t^s lam_u du)]`` under the chosen drift.

    ``measure`` must be physical or tilde (the hazard-only measures); the
    hazard integral accumulates by the trapezoid rule along each path.
    """
    if s < t:
        raise DomainError("maturity precedes start")
    _check_initial_hazard(hazard, lam0)
    if measure.tag not in ("physical", "tilde"):
        raise DomainError("mc_survival runs under the physical or tilde measure")
    if s == t:
        return McEstimate("survival", 1.0, 0.0, config.paths, config.seed)
    rate = constant_rate()
    n_steps = max(1, int(math.ceil((s - t) * config.steps_per_year)))
    times = np.linspace(t, s, n_steps + 1)
    out = np.empty(config.paths)
    row = 0
    for idx, m in _chunks(config.paths):
        rng = _chunk_rng(config.seed, idx)
        integral = np.zeros(m)

        def accumulate(j, tt, dt, r_old, lam_old, r_new, lam_new):
            integral[:] += 0.5 * dt * (lam_old + lam_new)

        _step_chunk(hazard, rate, measure, times, 0.0, lam0, rng, m,
                    config.antithetic, accumulate)
        out[row:row + m] = np.exp(-integral)
        row += m
    return _estimate("survival", out, config)


def _simpson_weights(n_intervals: int, h: float) -> np.ndarray:
    if n_intervals % 2 or n_intervals < 2:
        raise DomainError("Simpson rule needs an even interval count >= 2")
    w = np.ones(n_intervals + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * h / 3.0


def mc_annuity_alpha0(hazard: HazardModel, rate: ShortRateModel, r0: float,
                      lam0: float, t: float, horizon: float,
                      config: PathConfig, n_quad: int = 64) -> McEstimate:
    """Risk-load-free annuity value: Simpson quadrature over payment times
    of the bond price times the physical survival probability.

    The Euler mesh is refined to align with the quadrature nodes, so the
    only quadrature error is Simpson's own.
    """
    if horizon < t:
        raise DomainError("horizon precedes start")
    _check_initial_hazard(hazard, lam0)
    if horizon == t:
        return McEstimate("annuity_alpha0", 0.0, 0.0, config.paths, config.seed)
    n_quad = max(64, n_quad + (n_quad % 2))
    span = horizon - t
    per_node = max(1, int(math.ceil(span * config.steps_per_year / n_quad)))
    n_steps = per_node * n_quad
    times = np.linspace(t, horizon, n_steps + 1)
    node_times = times[::per_node]
    F = np.array([bond_price(rate, r0, t, float(s)) for s in node_times])
    weights = _simpson_weights(n_quad, span / n_quad)
    measure = MeasureSpec(tag="physical")

    out = np.empty(config.paths)
    row = 0
    for idx, m in _chunks(config.paths):
        rng = _chunk_rng(config.seed, idx)
        integral = np.zeros(m)
        acc = np.full(m, weights[0] * F[0])   # survival factor 1 at s = t

        def accumulate(j, tt, dt, r_old, lam_old, r_new, lam_new):
            integral[:] += 0.5 * dt * (lam_old + lam_new)
            node, rem = divmod(j + 1, per_node)
            if rem == 0:
                acc[:] += weights[node] * F[node] * np.exp(-integral)

        _step_chunk(hazard, rate, measure, times, r0, lam0, rng, m,
                    config.antithetic, accumulate)
        out[row:row + m] = acc
        row += m
    return _estimate("annuity_alpha0", out, config)


def mc_limit(hazard: HazardModel, rate: ShortRateModel, alpha: float,
             r0: float, lam0: float, t: float, horizon: float,
             config: PathConfig) -> McEstimate:
    """Limiting per-contract value under the hat measure; the running
    discount and its time integral both accumulate by the trapezoid rule."""
    if horizon < t:
        raise DomainError("horizon precedes start")
    _check_initial_hazard(hazard, lam0)
    if horizon == t:
        return McEstimate("limit", 0.0, 0.0, config.paths, config.seed)
    measure = MeasureSpec(tag="hat", alpha=alpha)
    n_steps = max(1, int(math.ceil((horizon - t) * config.steps_per_year)))
    times = np.linspace(t, horizon, n_steps + 1)
    out = np.empty(config.paths)
    row = 0
    for idx, m in _chunks(config.paths):
        rng = _chunk_rng(config.seed, idx)
        J = np.zeros(m)
        disc_prev = np.ones(m)
        G = np.zeros(m)

        def accumulate(j, tt, dt, r_old, lam_old, r_new, lam_new):
            J[:] += 0.5 * dt * ((r_old + lam_old) + (r_new + lam_new))
            disc = np.exp(-J)
            G[:] += 0.5 * dt * (disc_prev + disc)
            disc_prev[:] = disc

        _step_chunk(hazard, rate, measure, times, r0, lam0, rng, m,
                    config.antithetic, accumulate)
        out[row:row + m] = G
        row += m
    return _estimate("limit", out, config)


_CONSTRAINT_SLACK = 1e-6


def _as_control_pair(controls):
    if hasattr(controls, "pair"):
        return controls.pair
    if hasattr(controls, "delta") and hasattr(controls, "gamma"):
        return lambda r, lam, t: (controls.delta(r, lam, t),
                                  controls.gamma(r, lam, t))
    d, g = controls
    if np.isscalar(d) and np.isscalar(g):
        dv, gv = float(d), float(g)
        return lambda r, lam, t: (np.full(np.shape(lam), dv),
                                  np.full(np.shape(lam), gv))
    return lambda r, lam, t: (np.asarray(d(r, lam, t), dtype=float),
                              np.asarray(g(r, lam, t), dtype=float))


def mc_good_deal(hazard: HazardModel, rate: ShortRateModel, alpha: float,
                 controls, r0: float, lam0: float, t: float, horizon: float,
                 config: PathConfig) -> McEstimate:
    """Good-deal estimator under the bar measure induced by the controls.

    ``controls`` is a solved control field (anything with a
    ``pair(r, lam, t) -> (delta, gamma)`` or ``delta``/``gamma`` lookup)
    or a pair of constants.  The hazard drift gains ``delta sigma``, the
    survival discount uses the tilted intensity ``lam (1 + gamma)``, and
    admissibility is checked at every lookup.  At the optimal feedback
    controls the estimate reproduces the seller value.
    """
    if horizon < t:
        raise DomainError("horizon precedes start")
    _check_initial_hazard(hazard, lam0)
    if horizon == t:
        return McEstimate("good_deal", 0.0, 0.0, config.paths, config.seed)
    pair = _as_control_pair(controls)
    bound = alpha * alpha * (1 + _CONSTRAINT_SLACK) + 1e-14

    def checked(r, lam, tt):
        d, g = pair(r, lam, tt)
        viol = d * d + lam * g * g
        bad = (viol > bound) | (g < -1.0)
        if np.any(bad):
            k = int(np.argmax(np.where(bad, viol, -np.inf)))
            raise ControlConstraintError(
                f"inadmissible control at t={tt:.6g}, lam={np.asarray(lam)[k]:.6g}: "
                f"delta={d[k]:.6g}, gamma={g[k]:.6g}, "
                f"delta^2+lam*gamma^2={viol[k]:.6g} vs alpha^2={alpha * alpha:.6g}"
            )
        return d, g

    floor = hazard.lambda_floor
    gap0 = lam0 - floor
    frozen = gap0 == 0.0
    n_steps = max(1, int(math.ceil((horizon - t) * config.steps_per_year)))
    times = np.linspace(t, horizon, n_steps + 1)
    out = np.empty(config.paths)
    row = 0
    for idx, m in _chunks(config.paths):
        rng = _chunk_rng(config.seed, idx)
        y = None if frozen else np.full(m, math.log(gap0))
        lam = np.full(m, float(lam0))
        r = np.full(m, float(r0))
        d, g = checked(r, lam, times[0])
        tilt_old = lam * (1 + g)
        J = np.zeros(m)
        disc_prev = np.ones(m)
        G = np.zeros(m)
        for j in range(n_steps):
            tt, t_next = times[j], times[j + 1]
            dt = t_next - tt
            sdt = math.sqrt(dt)
            z_lam = _normals(rng, m, config.antithetic)
            z_r = _normals(rng, m, config.antithetic)
            r_old = r
            if not frozen:
                s = hazard.vol(tt)
                mu = hazard.drift(lam, tt) + d * s
                y = y + (mu - 0.5 * s * s) * dt + s * sdt * z_lam
                lam = floor + np.exp(y)
            r = r + drift_under_Q(rate, r, tt) * dt + rate.c(r, tt) * sdt * z_r
            d, g = checked(r, lam, t_next)
            tilt_new = lam * (1 + g)
            J += 0.5 * dt * ((r_old + tilt_old) + (r + tilt_new))
            disc = np.exp(-J)
            G += 0.5 * dt * (disc_prev + disc)
            disc_prev = disc
            tilt_old = tilt_new
        out[row:row + m] = G
        row += m
    return _estimate("good_deal", out, config)


def simulate_hedged_portfolio(hazard: HazardModel, rate: ShortRateModel,
                              sharpe: SharpeConfig, a_surface: Surface,
                              r0: float, lam0: float, t: float,
                              horizon: float, config: PathConfig,
                              h: float = 1.0 / 252,
                              sub_steps: int = 1) -> HedgeCheckReport:
    """One-window check of the hedged-portfolio drift and local variance.

    The self-financing sub-portfolio starts at the annuity value so the
    initial total portfolio is zero; the variance-minimizing bond
    position ``a_r / F_r`` is held over the window ``[t, t + h]``; deaths
    thin with probability ``lam dt`` per step.  Empirical drift and
    variance per unit time are compared with the predictions implied by
    the solved level-1 surface, and the realized Sharpe ratio (excess
    drift over local standard deviation) should match the target.
    """
    _check_initial_hazard(hazard, lam0)
    alpha = sharpe.signed_alpha
    if t >= horizon:
        return HedgeCheckReport(0.0, 0.0, 0.0, 0.0, 0.0, alpha,
                                0.0, 0.0, 0.0, config.paths, config.seed)

    def a_scalar(lam, tt, r):
        return a_surface.value_at(lam, tt, r=r if a_surface.two_factor else None)

    a0 = a_scalar(lam0, t, r0)
    gap = lam0 - hazard.lambda_floor
    if gap > 0:
        dl = gap * (math.exp(a_surface.hazard_grid.dy) - 1.0) / 2
        a_lam = (a_scalar(lam0 + dl, t, r0) - a_scalar(lam0 - dl, t, r0)) / (2 * dl)
    else:
        a_lam = 0.0

    c0 = float(rate.c(r0, t))
    Fr0 = bond_delta(rate, r0, t, horizon)
    if a_surface.two_factor:
        drh = a_surface.rate_grid.dr
        a_r = (a_scalar(lam0, t, r0 + drh) - a_scalar(lam0, t, r0 - drh)) / (2 * drh)
        if Fr0 == 0.0:
            raise DegenerateHedgeError("bond price has zero rate sensitivity")
        pi = a_r / Fr0
    elif c0 > 0:
        raise DomainError("a two-factor surface is required when c > 0")
    else:
        pi = 0.0   # deterministic rate: the bond position carries no risk

    s0 = hazard.vol(t)
    var_pred = s0 * s0 * gap * gap * a_lam * a_lam + lam0 * a0 * a0
    sd_pred = math.sqrt(max(var_pred, 0.0))
    drift_pred = alpha * sd_pred          # plus r * Pi, which is zero here

    n_sub = max(1, int(sub_steps))
    times = np.linspace(t, t + h, n_sub + 1)
    measure = MeasureSpec(tag="physical")
    dpi = np.empty(config.paths)
    row = 0
    for idx, m in _chunks(config.paths):
        rng = _chunk_rng(config.seed, idx)
        V = np.full(m, a0)
        alive = np.ones(m, dtype=bool)
        F_prev = np.full(m, bond_price(rate, r0, t, horizon))
        box = {"V": V, "alive": alive, "F_prev": F_prev}

        def step(j, tt, dtt, r_old, lam_old, r_new, lam_new):
            F_new = np.broadcast_to(
                np.asarray(bond_price(rate, r_new, tt, horizon), dtype=float),
                (m,)).copy()
            V = box["V"]
            V += pi * (F_new - box["F_prev"]) \
                + r_old * (V - pi * box["F_prev"]) * dtt \
                - box["alive"] * dtt
            u = rng.random(m)
            box["alive"] = box["alive"] & (u >= lam_old * dtt)
            box["F_prev"] = F_new

        r_end, lam_end = _step_chunk(hazard, rate, measure, times, r0, lam0,
                                     rng, m, config.antithetic, step)
        a_end = a_surface.eval_many(
            lam_end, t + h, r=r_end if a_surface.two_factor else None)
        dpi[row:row + m] = box["V"] - np.where(box["alive"], a_end, 0.0)
        row += m

    drift_emp = float(np.mean(dpi)) / h
    centered = dpi - np.mean(dpi)
    m2 = float(np.mean(centered ** 2))
    m4 = float(np.mean(centered ** 4))
    n = len(dpi)
    var_emp = m2 * n / (n - 1) / h if n > 1 else 0.0
    se_drift = math.sqrt(m2 / max(n - 1, 1)) / h
    se_var = math.sqrt(max(m4 - m2 * m2, 0.0) / n) / h if n > 1 else 0.0
    sd_emp = math.sqrt(max(var_emp, 0.0))
    sharpe_real = drift_emp / sd_emp if sd_emp > 0 else 0.0
    se_sharpe = se_drift / sd_emp if sd_emp > 0 else 0.0
    return HedgeCheckReport(
        drift_empirical=drift_emp, drift_predicted=drift_pred,
        variance_empirical=var_emp, variance_predicted=var_pred,
        sharpe_realized=sharpe_real, sharpe_target=alpha,
        se_drift=se_drift, se_variance=se_var, se_sharpe=se_sharpe,
        paths=n, seed=config.seed)


def write_estimates_csv(estimates, fh) -> None:
    """CSV export: label, mean, se, paths, seed."""
    owns = isinstance(fh, str)
    out = open(fh, "w", newline="") if owns else fh
    try:
        out.write("label,mean,se,paths,seed\n")
        for e in estimates:
            out.write(f"{e.label},{e.mean!r},{e.se!r},{e.paths},{e.seed}\n")
    finally:
        if owns:
            out.close()
