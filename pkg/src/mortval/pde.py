"""Finite-difference solvers for the valuation equations.

Everything marches backward in time with a theta scheme (default
Crank-Nicolson).  The hazard dimension lives in the log coordinate
``y = ln(lam - floor)`` where the proportional SDE coefficients become
spatially constant: ``(lam - floor) v_lam = v_y`` and
``(lam - floor)^2 v_lamlam = v_yy - v_y``.  Advection is discretized
centrally where the cell Peclet number allows and upwinded otherwise;
truncation boundaries use linearity extrapolation (zero second
derivative).  The square-root risk loading is handled by Picard
iteration on each time step, with the radicand smoothed as
``sqrt(x + eps^2) - eps`` so derivatives stay bounded where the
surface vanishes.

Two-factor (rate x hazard) problems use Peaceman-Rachford alternating
sweeps: the rate and hazard operators act on different axes, each sweep
solves a batch of tridiagonal systems, and the nonlinear term is lagged
into the Picard source.

The recursion over portfolio size is strictly sequential: level ``n``
consumes the full time history of level ``n - 1`` on the same grid.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .errors import DomainError, SolverError
from .grids import HazardGrid, RateGrid, SolverConfig, Surface, TimeMesh
from .models import (HazardModel, SharpeConfig, ShortRateModel, bond_price,
                     drift_under_Q)

__all__ = [
    "ValuationStack",
    "solve_beta",
    "solve_pure_endowment",
    "solve_annuity",
    "solve_limit",
    "solve_indifference",
    "solve_bond_pde",
    "apply_generator",
    "pde_residual",
    "default_time_steps",
]

_SQRT_EPS = 1e-12

# Equation and solver diagnostics land in Surface.meta under these labels.
EQ_BETA = "beta"
EQ_ENDOWMENT = "endowment"
EQ_ANNUITY = "annuity"
EQ_LIMIT = "limit"
EQ_INDIFF_EXACT = "indiff_exact"
EQ_INDIFF_QUAD = "indiff_quad"
EQ_BOND = "bond"


def _ssqrt(x):
    """Smoothed square root: exact at 0, bounded slope near 0."""
    return np.sqrt(x + _SQRT_EPS * _SQRT_EPS) - _SQRT_EPS


def _grad(v, dx, axis=-1):
    g = np.empty_like(v)
    sl = [slice(None)] * v.ndim

    def at(i):
        s = sl.copy()
        s[axis] = i
        return tuple(s)

    g[at(slice(1, -1))] = (v[at(slice(2, None))] - v[at(slice(None, -2))]) / (2 * dx)
    g[at(0)] = (v[at(1)] - v[at(0)]) / dx
    g[at(-1)] = (v[at(-1)] - v[at(-2)]) / dx
    return g


def _tridiag_rows(x, A, B, k):
    """Rows of ``L v = A v_x + B v_xx - k v``, exponentially fitted.

    Central differencing with the fitted diffusion
    ``B_eff = B * p * coth(p)``, ``p = A dx / (2B)``, which keeps the rows
    an M-matrix at every cell Peclet number while staying second-order
    accurate where advection is moderate, and -- unlike a hard
    central/upwind switch -- varies smoothly with the drift, so
    comparison arguments between solves with shifted drifts survive
    discretization.  Boundary rows drop the diffusion term (linearity
    extrapolation) and take the drift one-sided into the domain.
    """
    n = len(x)
    dx = x[1] - x[0]
    A = np.broadcast_to(np.asarray(A, dtype=float), (n,))
    B = np.broadcast_to(np.asarray(B, dtype=float), (n,))
    k = np.broadcast_to(np.asarray(k, dtype=float), (n,))

    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(B > 0, A * dx / (2 * np.maximum(B, 1e-300)), np.inf)
        small = np.abs(p) < 1e-4
        fitted = np.where(small, B * (1 + p * p / 3),
                          B * p / np.tanh(np.where(small | ~np.isfinite(p), 1.0, p)))
    b_eff = np.where(B > 0, fitted, np.abs(A) * dx / 2)

    lo = np.zeros(n)
    di = np.zeros(n)
    up = np.zeros(n)
    i = slice(1, -1)
    diff = b_eff / (dx * dx)
    lo[i] = diff[i] - A[i] / (2 * dx)
    up[i] = diff[i] + A[i] / (2 * dx)
    di[i] = -2 * diff[i] - k[i]

    # boundary rows: one-sided drift, no diffusion
    up[0] = A[0] / dx
    di[0] = -A[0] / dx - k[0]
    lo[-1] = -A[-1] / dx
    di[-1] = A[-1] / dx - k[-1]
    return lo, di, up


def _apply_rows(rows, v):
    lo, di, up = rows
    out = di * v
    out[..., 1:] += lo[1:] * v[..., :-1]
    out[..., :-1] += up[:-1] * v[..., 1:]
    return out


def _solve_implicit(rows, gamma, rhs):
    """Solve ``(I - gamma L) v = rhs`` for tridiagonal L; rhs may be 2-D."""
    lo, di, up = rows
    n = len(di)
    ab = np.zeros((3, n))
    ab[0, 1:] = -gamma * up[:-1]
    ab[1, :] = 1.0 - gamma * di
    ab[2, :-1] = -gamma * lo[1:]
    rhs2 = rhs.T if rhs.ndim == 2 else rhs
    out = solve_banded((1, 1), ab, rhs2, overwrite_ab=True, check_finite=False)
    return out.T if rhs.ndim == 2 else out


def default_time_steps(horizon: float, per_year: int = 200) -> int:
    return max(64, int(math.ceil(horizon * per_year)))


@dataclass
class _Problem1D:
    """One level of a 1-D (hazard-only or fixed-rate) equation."""

    x: np.ndarray                     # spatial nodes (y or r)
    coeffs: callable                  # t -> (A, B, k)
    source: callable | None           # (t, prev_slice) -> array
    nonlin: callable | None           # (v, vx, prev_slice, t) -> array
    terminal: np.ndarray
    label: str
    level: int = 0


def _march_1d(problem: _Problem1D, times: np.ndarray, prev_hist, cfg: SolverConfig):
    """Backward theta-scheme march; returns (history, max Picard residual)."""
    x = problem.x
    dx = x[1] - x[0]
    theta = cfg.theta
    n_steps = len(times) - 1
    hist = np.empty((len(times), len(x)))
    hist[-1] = problem.terminal
    max_resid = 0.0

    if theta < 0.5:
        _cfl_warning(problem, times, theta)

    def rhs_terms(v, t, prev_slice):
        s = 0.0
        if problem.source is not None:
            s = problem.source(t, prev_slice)
        if problem.nonlin is not None:
            s = s + problem.nonlin(v, _grad(v, dx), prev_slice, t)
        return s

    for j in range(n_steps - 1, -1, -1):
        t_new, t_old = times[j], times[j + 1]
        dt = t_old - t_new
        v_old = hist[j + 1]
        prev_new = prev_hist[j] if prev_hist is not None else None
        prev_old = prev_hist[j + 1] if prev_hist is not None else None
        rows_new = _tridiag_rows(x, *problem.coeffs(t_new))
        expl = v_old.copy()
        if theta < 1.0:
            rows_old = _tridiag_rows(x, *problem.coeffs(t_old))
            expl = expl + (1 - theta) * dt * (
                _apply_rows(rows_old, v_old) + rhs_terms(v_old, t_old, prev_old)
            )
        if problem.nonlin is None:
            rhs = expl
            if problem.source is not None:
                rhs = rhs + theta * dt * problem.source(t_new, prev_new)
            v_new = _solve_implicit(rows_new, theta * dt, rhs)
        else:
            v_it = v_old
            for it in range(cfg.max_picard):
                rhs = expl + theta * dt * rhs_terms(v_it, t_new, prev_new)
                v_new = _solve_implicit(rows_new, theta * dt, rhs)
                resid = float(np.max(np.abs(v_new - v_it)))
                scale = max(1.0, float(np.max(np.abs(v_new))))
                v_it = v_new
                if resid <= cfg.picard_tol * scale:
                    break
            else:
                raise SolverError(
                    f"Picard iteration stalled for {problem.label}",
                    label=problem.label, level=problem.level,
                    time_index=j, residual=resid,
                )
            max_resid = max(max_resid, resid / scale)
        hist[j] = v_new
    return hist, max_resid


def _cfl_warning(problem, times, theta):
    dt = times[1] - times[0]
    dx = problem.x[1] - problem.x[0]
    _, B, _ = problem.coeffs(times[0])
    nu = float(np.max(np.atleast_1d(B))) * dt / (dx * dx)
    if nu * (1 - 2 * theta) > 0.5:
        warnings.warn(
            f"explicit fraction of theta={theta} scheme violates the CFL "
            f"bound (diffusion number {nu:.3g}); expect instability",
            stacklevel=3,
        )


def _theta_residual_1d(hist, times, problem: _Problem1D, prev_hist, theta):
    """Sup-norm residual of a history against the discrete theta scheme."""
    x = problem.x
    dx = x[1] - x[0]
    worst = 0.0

    def full(v, t, prev_slice):
        out = _apply_rows(_tridiag_rows(x, *problem.coeffs(t)), v)
        if problem.source is not None:
            out = out + problem.source(t, prev_slice)
        if problem.nonlin is not None:
            out = out + problem.nonlin(v, _grad(v, dx), prev_slice, t)
        return out

    for j in range(len(times) - 1):
        dt = times[j + 1] - times[j]
        prev_new = prev_hist[j] if prev_hist is not None else None
        prev_old = prev_hist[j + 1] if prev_hist is not None else None
        r = (hist[j + 1] - hist[j]) / dt \
            + theta * full(hist[j], times[j], prev_new) \
            + (1 - theta) * full(hist[j + 1], times[j + 1], prev_old)
        worst = max(worst, float(np.max(np.abs(r))))
    return worst


# ---------------------------------------------------------------------------
# two-factor Peaceman-Rachford march
# ---------------------------------------------------------------------------

@dataclass
class _Problem2D:
    rate_grid: RateGrid
    hazard_grid: HazardGrid
    r_coeffs: callable                 # t -> (A, B, k) on the r axis
    y_coeffs: callable                 # t -> (A, B, k) on the y axis
    source: callable | None            # (t, prev_slice) -> array (n_r, n_y)
    nonlin: callable | None            # (v, vy, prev_slice, t) -> array
    terminal: np.ndarray
    label: str
    level: int = 0


def _march_2d(problem: _Problem2D, times: np.ndarray, prev_hist, cfg: SolverConfig):
    rg, hg = problem.rate_grid, problem.hazard_grid
    dy = hg.dy
    n_steps = len(times) - 1
    hist = np.empty((len(times), rg.n, hg.n))
    hist[-1] = problem.terminal
    max_resid = 0.0

    for j in range(n_steps - 1, -1, -1):
        t_new, t_old = times[j], times[j + 1]
        dt = t_old - t_new
        tm = 0.5 * (t_new + t_old)
        v_old = hist[j + 1]
        rows_r = _tridiag_rows(rg.r, *problem.r_coeffs(tm))
        rows_y = _tridiag_rows(hg.y, *problem.y_coeffs(tm))
        Ly_vold = _apply_rows(rows_y, v_old)

        src = 0.0
        if problem.source is not None:
            pm = None
            if prev_hist is not None:
                pm = 0.5 * (prev_hist[j] + prev_hist[j + 1])
            src = problem.source(tm, pm)
        nl_old = 0.0
        if problem.nonlin is not None:
            prev_old = prev_hist[j + 1] if prev_hist is not None else None
            nl_old = problem.nonlin(v_old, _grad(v_old, dy), prev_old, t_old)

        v_it = v_old
        prev_new = prev_hist[j] if prev_hist is not None else None
        for it in range(cfg.max_picard):
            if problem.nonlin is not None:
                nl = 0.5 * (nl_old + problem.nonlin(
                    v_it, _grad(v_it, dy), prev_new, t_new))
            else:
                nl = 0.0
            g = src + nl
            rhs1 = v_old + 0.5 * dt * (Ly_vold + g)
            v_half = _solve_implicit(rows_r, 0.5 * dt, rhs1.T).T
            rhs2 = v_half + 0.5 * dt * (
                _apply_rows_axis0(rows_r, v_half) + g)
            v_new = _solve_implicit(rows_y, 0.5 * dt, rhs2)
            if problem.nonlin is None:
                v_it = v_new
                break
            resid = float(np.max(np.abs(v_new - v_it)))
            scale = max(1.0, float(np.max(np.abs(v_new))))
            v_it = v_new
            if resid <= cfg.picard_tol * scale:
                max_resid = max(max_resid, resid / scale)
                break
        else:
            raise SolverError(
                f"Picard iteration stalled for {problem.label}",
                label=problem.label, level=problem.level,
                time_index=j, residual=resid,
            )
        hist[j] = v_it
    return hist, max_resid


def _apply_rows_axis0(rows, v):
    return _apply_rows(rows, v.T).T


def _theta_residual_2d(hist, times, problem: _Problem2D, prev_hist, theta):
    """Residual against the unsplit theta scheme (includes splitting error)."""
    rg, hg = problem.rate_grid, problem.hazard_grid
    worst = 0.0

    def full(v, t, prev_slice):
        out = _apply_rows_axis0(_tridiag_rows(rg.r, *problem.r_coeffs(t)), v) \
            + _apply_rows(_tridiag_rows(hg.y, *problem.y_coeffs(t)), v)
        if problem.source is not None:
            out = out + problem.source(t, prev_slice)
        if problem.nonlin is not None:
            out = out + problem.nonlin(v, _grad(v, hg.dy), prev_slice, t)
        return out

    for j in range(len(times) - 1):
        dt = times[j + 1] - times[j]
        prev_new = prev_hist[j] if prev_hist is not None else None
        prev_old = prev_hist[j + 1] if prev_hist is not None else None
        r = (hist[j + 1] - hist[j]) / dt \
            + theta * full(hist[j], times[j], prev_new) \
            + (1 - theta) * full(hist[j + 1], times[j + 1], prev_old)
        worst = max(worst, float(np.max(np.abs(r))))
    return worst


# ---------------------------------------------------------------------------
# deterministic short-rate path (deterministic_rate mode)
# ---------------------------------------------------------------------------

def deterministic_rate_path(rate: ShortRateModel, r0: float, times: np.ndarray):
    """ODE path of the short rate when c == 0; returns r(t) on the mesh."""
    if rate.kind == "constant":
        return lambda t: r0
    sample = np.linspace(0.0, times[-1], 9)
    if np.max(np.abs(rate.c(np.full(9, max(r0, 1e-3)), 0.0))) > 0 or any(
        np.max(np.abs(rate.c(np.full(9, max(r0, 1e-3)), t))) > 0 for t in sample
    ):
        raise DomainError("deterministic_rate mode requires c == 0")
    rs = np.empty(len(times))
    rs[0] = r0
    for j in range(len(times) - 1):
        h = times[j + 1] - times[j]
        t, r = times[j], rs[j]
        k1 = float(rate.b(r, t))
        k2 = float(rate.b(r + 0.5 * h * k1, t + 0.5 * h))
        k3 = float(rate.b(r + 0.5 * h * k2, t + 0.5 * h))
        k4 = float(rate.b(r + h * k3, t + h))
        rs[j + 1] = r + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6
    ts = times.copy()
    return lambda t: float(np.interp(t, ts, rs))


# ---------------------------------------------------------------------------
# equation assemblies
# ---------------------------------------------------------------------------

def _hazard_y_coeffs(hazard: HazardModel, lam: np.ndarray, drift_shift: float = 0.0):
    """(A, B, k=0) on the y axis; drift_shift subtracts alpha*sigma terms."""

    def coeffs(t):
        s = hazard.vol(t)
        A = hazard.drift(lam, t) - drift_shift * s - 0.5 * s * s
        return A, 0.5 * s * s, np.zeros_like(lam)

    return coeffs


@dataclass
class ValuationStack:
    """Levels 0..n of a solved recursion plus solver diagnostics."""

    levels: list
    residuals: list
    sharpe: SharpeConfig | None = None
    hazard: HazardModel | None = None
    rate: ShortRateModel | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.levels:
            raise DomainError("stack needs at least level 0")
        if np.any(self.levels[0].values != 0.0):
            raise DomainError("level 0 of a valuation stack must be identically zero")

    @property
    def n(self) -> int:
        return len(self.levels) - 1

    def level(self, k: int) -> Surface:
        return self.levels[k]


def _compress(surface: Surface, store) -> Surface:
    """Keep only the requested time slices ('all' keeps everything)."""
    if store == "all":
        return surface
    wanted = np.atleast_1d(np.asarray(store, dtype=float))
    idx = sorted({int(np.argmin(np.abs(surface.times - t))) for t in wanted}
                 | {0, len(surface.times) - 1})
    return Surface(label=surface.label, values=surface.values[idx],
                   times=surface.times[idx], hazard_grid=surface.hazard_grid,
                   rate_grid=surface.rate_grid, meta=surface.meta)


def solve_beta(hazard: HazardModel, alpha: float, maturity: float,
               grid: HazardGrid, n_steps: int | None = None,
               solver: SolverConfig = SolverConfig(),
               t_start: float = 0.0) -> Surface:
    """Per-contract limit survival factor under hazard drift ``mu - alpha sigma``.

    Solves the linear terminal-value problem with killing rate ``lam`` and
    terminal value 1 at ``maturity``; the history covers
    [``t_start``, maturity].
    """
    if maturity <= t_start:
        raise DomainError("maturity must exceed t_start")
    n_steps = n_steps or default_time_steps(maturity - t_start)
    times = np.linspace(t_start, maturity, n_steps + 1)
    lam = grid.lam
    base = _hazard_y_coeffs(hazard, lam, drift_shift=alpha)

    def coeffs(t):
        A, B, _ = base(t)
        return A, B, lam

    prob = _Problem1D(x=grid.y, coeffs=coeffs, source=None, nonlin=None,
                      terminal=np.ones(grid.n), label=EQ_BETA)
    hist, resid = _march_1d(prob, times, None, solver)
    return Surface(label="beta", values=hist, times=times, hazard_grid=grid,
                   meta={"equation": EQ_BETA, "alpha": alpha, "maturity": maturity,
                         "theta": solver.theta, "picard_resid": resid})


def solve_pure_endowment(hazard: HazardModel, sharpe: SharpeConfig, n: int,
                         maturity: float, grid: HazardGrid,
                         n_steps: int | None = None,
                         solver: SolverConfig = SolverConfig(),
                         t_start: float = 0.0) -> ValuationStack:
    """Risk-adjusted expected survivor counts, levels 0..n.

    Level k solves the endowment recursion with terminal value k at the
    maturity; the rate factor separates multiplicatively and is not part
    of these surfaces.
    """
    if n < 0:
        raise DomainError("n must be >= 0")
    if maturity <= t_start:
        raise DomainError("maturity must exceed t_start")
    n_steps = n_steps or default_time_steps(maturity - t_start)
    times = np.linspace(t_start, maturity, n_steps + 1)
    lam = grid.lam
    alpha = sharpe.signed_alpha
    base = _hazard_y_coeffs(hazard, lam)

    levels = [Surface(label="phi_0", values=np.zeros((len(times), grid.n)),
                      times=times, hazard_grid=grid,
                      meta={"equation": EQ_ENDOWMENT, "level": 0})]
    residuals = [0.0]
    prev_hist = levels[0].values
    for k in range(1, n + 1):
        kill = k * lam

        def coeffs(t, kill=kill):
            A, B, _ = base(t)
            return A, B, kill

        def source(t, prev, kill=kill):
            return kill * prev

        def nonlin(v, vy, prev, t, k=k):
            s = hazard.vol(t)
            d = v - prev
            return alpha * _ssqrt(s * s * vy * vy + k * lam * d * d)

        prob = _Problem1D(x=grid.y, coeffs=coeffs, source=source,
                          nonlin=nonlin, terminal=np.full(grid.n, float(k)),
                          label=EQ_ENDOWMENT, level=k)
        hist, resid = _march_1d(prob, times, prev_hist, solver)
        levels.append(Surface(
            label=f"phi_{k}", values=hist, times=times, hazard_grid=grid,
            meta={"equation": EQ_ENDOWMENT, "level": k, "alpha": alpha,
                  "maturity": maturity, "theta": solver.theta,
                  "picard_resid": resid}))
        residuals.append(resid)
        prev_hist = hist
    return ValuationStack(levels=levels, residuals=residuals, sharpe=sharpe,
                          hazard=hazard, meta={"equation": EQ_ENDOWMENT})


def _annuity_level_problem_1d(hazard, lam, grid, alpha, k_level, r_of_t,
                              payment_rate):
    base = _hazard_y_coeffs(hazard, lam)
    kill_lam = k_level * lam

    def coeffs(t):
        A, B, _ = base(t)
        return A, B, r_of_t(t) + kill_lam

    def source(t, prev):
        return k_level * payment_rate + kill_lam * prev

    def nonlin(v, vy, prev, t):
        s = hazard.vol(t)
        d = v - prev
        return alpha * _ssqrt(s * s * vy * vy + k_level * lam * d * d)

    return _Problem1D(x=grid.y, coeffs=coeffs, source=source, nonlin=nonlin,
                      terminal=np.zeros(grid.n), label=EQ_ANNUITY, level=k_level)


def _annuity_level_problem_2d(hazard, rate, rg, hg, alpha, k_level, payment_rate):
    lam = hg.lam
    kill_lam = k_level * lam
    base = _hazard_y_coeffs(hazard, lam)

    def r_coeffs(t):
        return drift_under_Q(rate, rg.r, t), 0.5 * rate.c(rg.r, t) ** 2, rg.r

    def y_coeffs(t):
        A, B, _ = base(t)
        return A, B, kill_lam

    def source(t, prev):
        return k_level * payment_rate + kill_lam * prev

    def nonlin(v, vy, prev, t):
        s = hazard.vol(t)
        d = v - prev
        return alpha * _ssqrt(s * s * vy * vy + k_level * lam * d * d)

    return _Problem2D(rate_grid=rg, hazard_grid=hg, r_coeffs=r_coeffs,
                      y_coeffs=y_coeffs, source=source, nonlin=nonlin,
                      terminal=np.zeros((rg.n, hg.n)), label=EQ_ANNUITY,
                      level=k_level)


def solve_annuity(hazard: HazardModel, rate: ShortRateModel,
                  sharpe: SharpeConfig, n: int, horizon: float,
                  hazard_grid: HazardGrid, *, mode: str = "deterministic_rate",
                  rate_grid: RateGrid | None = None, r0: float | None = None,
                  n_steps: int | None = None, payment_rate: float = 1.0,
                  solver: SolverConfig = SolverConfig(),
                  store="all") -> ValuationStack:
    """Annuity portfolio values, levels 0..n of the size recursion.

    ``mode='deterministic_rate'`` treats the rate as the scalar ODE path
    started at ``r0`` (requires c == 0); ``mode='two_factor'`` solves the
    full (rate, hazard) problem on ``rate_grid`` by alternating implicit
    sweeps.  ``store`` is ``'all'`` or a sequence of times whose slices
    are kept per level (terminal and earliest slices always kept).
    """
    if n < 0:
        raise DomainError("n must be >= 0")
    if payment_rate < 0:
        raise DomainError("payment_rate must be >= 0")
    alpha = sharpe.signed_alpha
    lam = hazard_grid.lam

    if mode == "deterministic_rate":
        if r0 is None:
            raise DomainError("deterministic_rate mode requires r0")
        n_steps = n_steps or default_time_steps(horizon)
        times = np.linspace(0.0, horizon, n_steps + 1)
        r_of_t = deterministic_rate_path(rate, r0, times)
        meta_extra = {"mode": mode, "r_fixed": r0}
    elif mode == "two_factor":
        if rate_grid is None:
            raise DomainError("two_factor mode requires a rate_grid")
        n_steps = n_steps or default_time_steps(horizon, per_year=80)
        times = np.linspace(0.0, horizon, n_steps + 1)
        meta_extra = {"mode": mode}
    else:
        raise DomainError(f"unknown mode {mode!r}")

    shape = (len(times), hazard_grid.n) if mode == "deterministic_rate" \
        else (len(times), rate_grid.n, hazard_grid.n)
    levels = [Surface(label="a_0", values=np.zeros(shape), times=times,
                      hazard_grid=hazard_grid,
                      rate_grid=None if mode == "deterministic_rate" else rate_grid,
                      meta={"equation": EQ_ANNUITY, "level": 0, **meta_extra})]
    residuals = [0.0]
    prev_hist = levels[0].values

    for k in range(1, n + 1):
        if mode == "deterministic_rate":
            prob = _annuity_level_problem_1d(hazard, lam, hazard_grid, alpha,
                                             k, r_of_t, payment_rate)
            hist, resid = _march_1d(prob, times, prev_hist, solver)
        else:
            prob = _annuity_level_problem_2d(hazard, rate, rate_grid,
                                             hazard_grid, alpha, k, payment_rate)
            hist, resid = _march_2d(prob, times, prev_hist, solver)
        surf = Surface(
            label=f"a_{k}", values=hist, times=times, hazard_grid=hazard_grid,
            rate_grid=None if mode == "deterministic_rate" else rate_grid,
            meta={"equation": EQ_ANNUITY, "level": k, "alpha": alpha,
                  "horizon": horizon, "payment_rate": payment_rate,
                  "theta": solver.theta, "picard_resid": resid, **meta_extra})
        residuals.append(resid)
        levels.append(surf)
        # compress older levels lazily: the recursion only needs level k-1
        if k >= 2 and store != "all":
            levels[k - 1] = _compress(levels[k - 1], store)
        prev_hist = hist

    if store != "all":
        levels[0] = _compress(levels[0], store)
        if n >= 1:
            levels[n] = _compress(levels[n], store)
    return ValuationStack(levels=levels, residuals=residuals, sharpe=sharpe,
                          hazard=hazard, rate=rate,
                          meta={"equation": EQ_ANNUITY, **meta_extra})


def solve_limit(hazard: HazardModel, rate: ShortRateModel, alpha: float,
                horizon: float, hazard_grid: HazardGrid, *,
                mode: str = "deterministic_rate",
                rate_grid: RateGrid | None = None, r0: float | None = None,
                n_steps: int | None = None,
                solver: SolverConfig = SolverConfig()) -> Surface:
    """Limiting per-contract value: linear equation with drift ``mu - alpha sigma``,
    killing ``r + lam`` and unit payment source."""
    lam = hazard_grid.lam
    base = _hazard_y_coeffs(hazard, lam, drift_shift=alpha)

    if mode == "deterministic_rate":
        if r0 is None:
            raise DomainError("deterministic_rate mode requires r0")
        n_steps = n_steps or default_time_steps(horizon)
        times = np.linspace(0.0, horizon, n_steps + 1)
        r_of_t = deterministic_rate_path(rate, r0, times)

        def coeffs(t):
            A, B, _ = base(t)
            return A, B, r_of_t(t) + lam

        prob = _Problem1D(x=hazard_grid.y, coeffs=coeffs,
                          source=lambda t, prev: 1.0, nonlin=None,
                          terminal=np.zeros(hazard_grid.n), label=EQ_LIMIT)
        hist, resid = _march_1d(prob, times, None, solver)
        return Surface(label="p", values=hist, times=times,
                       hazard_grid=hazard_grid,
                       meta={"equation": EQ_LIMIT, "alpha": alpha, "mode": mode,
                             "r_fixed": r0, "theta": solver.theta,
                             "picard_resid": resid})
    if mode != "two_factor":
        raise DomainError(f"unknown mode {mode!r}")
    if rate_grid is None:
        raise DomainError("two_factor mode requires a rate_grid")
    n_steps = n_steps or default_time_steps(horizon, per_year=80)
    times = np.linspace(0.0, horizon, n_steps + 1)

    def r_coeffs(t):
        return drift_under_Q(rate, rate_grid.r, t), 0.5 * rate.c(rate_grid.r, t) ** 2, rate_grid.r

    def y_coeffs(t):
        A, B, _ = base(t)
        return A, B, lam

    prob = _Problem2D(rate_grid=rate_grid, hazard_grid=hazard_grid,
                      r_coeffs=r_coeffs, y_coeffs=y_coeffs,
                      source=lambda t, prev: 1.0, nonlin=None,
                      terminal=np.zeros((rate_grid.n, hazard_grid.n)),
                      label=EQ_LIMIT)
    hist, resid = _march_2d(prob, times, None, solver)
    return Surface(label="p", values=hist, times=times, hazard_grid=hazard_grid,
                   rate_grid=rate_grid,
                   meta={"equation": EQ_LIMIT, "alpha": alpha, "mode": mode,
                         "theta": solver.theta, "picard_resid": resid})


_ETA_OVERFLOW = 60.0


def solve_indifference(hazard: HazardModel, rate: ShortRateModel, eta: float,
                       horizon: float, hazard_grid: HazardGrid, *,
                       form: str = "exact", mode: str = "deterministic_rate",
                       rate_grid: RateGrid | None = None,
                       r0: float | None = None, n_steps: int | None = None,
                       solver: SolverConfig = SolverConfig()) -> Surface:
    """Exponential-utility indifference price (exact or quadratic form).

    ``eta`` is the absolute risk aversion; ``eta = 0`` degenerates to the
    linear risk-load-free equation.  The horizon bond price enters the
    nonlinear coefficients.
    """
    if eta < 0:
        raise DomainError("eta must be >= 0")
    if form not in ("exact", "quadratic"):
        raise DomainError(f"unknown form {form!r}")
    lam = hazard_grid.lam
    base = _hazard_y_coeffs(hazard, lam)
    label = EQ_INDIFF_EXACT if form == "exact" else EQ_INDIFF_QUAD

    def make_nonlin(F_of_t):
        if eta == 0.0:
            return None

        def nonlin(v, vy, prev, t):
            F = F_of_t(t)
            s = hazard.vol(t)
            x = eta * v / F
            if np.max(np.abs(x)) > _ETA_OVERFLOW:
                raise SolverError(
                    "indifference nonlinearity overflow: eta * value / bond "
                    "price exceeds the exponential range; use a smaller eta",
                    label=label, residual=float(np.max(np.abs(x))),
                )
            grad_term = eta / (2 * F) * s * s * vy * vy
            if form == "quadratic":
                return grad_term + eta / (2 * F) * lam * v * v
            return grad_term + lam * F / eta * (np.expm1(-x) + x)

        return nonlin

    if mode == "deterministic_rate":
        if r0 is None:
            raise DomainError("deterministic_rate mode requires r0")
        n_steps = n_steps or default_time_steps(horizon)
        times = np.linspace(0.0, horizon, n_steps + 1)
        r_of_t = deterministic_rate_path(rate, r0, times)

        def coeffs(t):
            A, B, _ = base(t)
            return A, B, r_of_t(t) + lam

        F_of_t = lambda t: bond_price(rate, r_of_t(t), t, horizon)
        prob = _Problem1D(x=hazard_grid.y, coeffs=coeffs,
                          source=lambda t, prev: 1.0,
                          nonlin=make_nonlin(F_of_t),
                          terminal=np.zeros(hazard_grid.n), label=label)
        hist, resid = _march_1d(prob, times, None, solver)
        return Surface(label=label, values=hist, times=times,
                       hazard_grid=hazard_grid,
                       meta={"equation": label, "eta": eta, "mode": mode,
                             "r_fixed": r0, "horizon": horizon,
                             "theta": solver.theta, "picard_resid": resid})

    if mode != "two_factor":
        raise DomainError(f"unknown mode {mode!r}")
    if rate_grid is None:
        raise DomainError("two_factor mode requires a rate_grid")
    n_steps = n_steps or default_time_steps(horizon, per_year=80)
    times = np.linspace(0.0, horizon, n_steps + 1)

    def r_coeffs(t):
        return drift_under_Q(rate, rate_grid.r, t), 0.5 * rate.c(rate_grid.r, t) ** 2, rate_grid.r

    def y_coeffs(t):
        A, B, _ = base(t)
        return A, B, lam

    F_of_t = lambda t: bond_price(rate, rate_grid.r, t, horizon)[:, None]
    prob = _Problem2D(rate_grid=rate_grid, hazard_grid=hazard_grid,
                      r_coeffs=r_coeffs, y_coeffs=y_coeffs,
                      source=lambda t, prev: 1.0, nonlin=make_nonlin(F_of_t),
                      terminal=np.zeros((rate_grid.n, hazard_grid.n)),
                      label=label)
    hist, resid = _march_2d(prob, times, None, solver)
    return Surface(label=label, values=hist, times=times,
                   hazard_grid=hazard_grid, rate_grid=rate_grid,
                   meta={"equation": label, "eta": eta, "mode": mode,
                         "horizon": horizon, "theta": solver.theta,
                         "picard_resid": resid})


def solve_bond_pde(rate: ShortRateModel, r_query, t: float, maturity: float,
                   n_r: int = 400, n_steps: int | None = None,
                   r_max: float | None = None,
                   solver: SolverConfig = SolverConfig(),
                   return_all: bool = False):
    """Bond price by solving the bond equation on a rate grid.

    Used as the pricing route for custom-coefficient models and as the
    independent oracle for the affine closed forms.  ``return_all`` gives
    the full ``(r_nodes, times, history)`` triple instead of interpolated
    prices at ``r_query``.
    """
    if maturity < t:
        raise DomainError("maturity precedes valuation time")
    r_arr = np.atleast_1d(np.asarray(r_query, dtype=float))
    if maturity == t and not return_all:
        out = np.ones_like(r_arr)
        return float(out[0]) if np.ndim(r_query) == 0 else out
    hi = r_max if r_max is not None else max(0.25, 2.5 * float(r_arr.max()))
    grid = RateGrid.from_bounds(1e-4, hi, n_r)
    n_steps = n_steps or default_time_steps(maturity - t, per_year=400)
    times = np.linspace(t, maturity, n_steps + 1)

    def coeffs(tt):
        return drift_under_Q(rate, grid.r, tt), 0.5 * rate.c(grid.r, tt) ** 2, grid.r

    prob = _Problem1D(x=grid.r, coeffs=coeffs, source=None, nonlin=None,
                      terminal=np.ones(grid.n), label=EQ_BOND)
    hist, _ = _march_1d(prob, times, None, solver)
    if return_all:
        return grid.r, times, hist
    out = np.interp(r_arr, grid.r, hist[0])
    return float(out[0]) if np.ndim(r_query) == 0 else out


# ---------------------------------------------------------------------------
# generator probe and residuals
# ---------------------------------------------------------------------------

def apply_generator(surface: Surface, hazard: HazardModel,
                    rate: ShortRateModel, r: float, lam: float, t: float,
                    drift: str = "physical") -> float:
    """Discretized generator of the killed (rate, hazard) process at a node.

    Central differences in all three directions, so the probe point must
    be strictly interior to the stored grid (in space and time).  The
    drift choice selects the physical or risk-neutral rate drift.
    """
    if not surface.two_factor:
        raise DomainError("apply_generator needs a two-factor surface")
    if drift not in ("physical", "risk_neutral"):
        raise DomainError(f"unknown drift choice {drift!r}")
    rg, hg, ts = surface.rate_grid, surface.hazard_grid, surface.times
    i = int(np.argmin(np.abs(rg.r - r)))
    y = hg.y_of(lam)
    j = int(np.argmin(np.abs(hg.y - y)))
    k = int(np.argmin(np.abs(ts - t)))
    if i in (0, rg.n - 1) or j in (0, hg.n - 1) or k in (0, len(ts) - 1):
        raise DomainError("generator probe must be at an interior node")
    v = surface.values
    dt = ts[k + 1] - ts[k]
    dr, dy = rg.dr, hg.dy
    lam_j = hg.lam[j]
    gap = lam_j - hg.lam_floor
    v_t = (v[k + 1, i, j] - v[k - 1, i, j]) / (2 * dt)
    v_r = (v[k, i + 1, j] - v[k, i - 1, j]) / (2 * dr)
    v_rr = (v[k, i + 1, j] - 2 * v[k, i, j] + v[k, i - 1, j]) / (dr * dr)
    v_y = (v[k, i, j + 1] - v[k, i, j - 1]) / (2 * dy)
    v_yy = (v[k, i, j + 1] - 2 * v[k, i, j] + v[k, i, j - 1]) / (dy * dy)
    v_lam = v_y / gap
    v_lamlam = (v_yy - v_y) / (gap * gap)
    rr = rg.r[i]
    b = float(rate.b(rr, ts[k])) if drift == "physical" \
        else float(drift_under_Q(rate, rr, ts[k]))
    c = float(rate.c(rr, ts[k]))
    mu = float(hazard.drift(lam_j, ts[k]))
    s = hazard.vol(ts[k])
    return float(
        v_t + b * v_r + 0.5 * c * c * v_rr + mu * gap * v_lam
        + 0.5 * s * s * gap * gap * v_lamlam - (rr + lam_j) * v[k, i, j]
    )


def pde_residual(surface: Surface, equation_id: str, hazard: HazardModel,
                 rate: ShortRateModel | None = None, *,
                 sharpe: SharpeConfig | None = None, eta: float | None = None,
                 prev: Surface | None = None, payment_rate: float = 1.0,
                 r0: float | None = None, horizon: float | None = None) -> float:
    """Sup-norm residual of a full-history surface in its discrete equation.

    The surface label (meta) must match ``equation_id``; the residual is
    taken against the same theta scheme the solvers use, so converged
    solves score near the Picard tolerance.
    """
    if surface.meta.get("equation") != equation_id:
        raise ValueError(
            f"surface carries equation {surface.meta.get('equation')!r}, "
            f"probed as {equation_id!r}"
        )
    times = surface.times
    theta = surface.meta.get("theta", 0.5)
    lam = surface.hazard_grid.lam
    grid = surface.hazard_grid
    level = surface.meta.get("level", 1)
    prev_hist = prev.values if prev is not None else (
        np.zeros_like(surface.values) if level == 1 else None)
    if equation_id in (EQ_ENDOWMENT, EQ_ANNUITY) and prev_hist is None:
        raise ValueError("recursion residual needs the previous level")

    if equation_id == EQ_BETA:
        alpha = surface.meta["alpha"]
        base = _hazard_y_coeffs(hazard, lam, drift_shift=alpha)
        prob = _Problem1D(x=grid.y, coeffs=lambda t: base(t)[:2] + (lam,),
                          source=None, nonlin=None, terminal=surface.values[-1],
                          label=EQ_BETA)
        return _theta_residual_1d(surface.values, times, prob, None, theta)

    if equation_id == EQ_ENDOWMENT:
        alpha = surface.meta.get("alpha", sharpe.signed_alpha if sharpe else 0.0)
        base = _hazard_y_coeffs(hazard, lam)
        kill = level * lam

        def coeffs(t):
            A, B, _ = base(t)
            return A, B, kill

        def source(t, prev_slice):
            return kill * prev_slice

        def nonlin(v, vy, prev_slice, t):
            s = hazard.vol(t)
            d = v - prev_slice
            return alpha * _ssqrt(s * s * vy * vy + level * lam * d * d)

        prob = _Problem1D(x=grid.y, coeffs=coeffs, source=source,
                          nonlin=nonlin, terminal=surface.values[-1],
                          label=EQ_ENDOWMENT, level=level)
        return _theta_residual_1d(surface.values, times, prob, prev_hist, theta)

    if equation_id == EQ_ANNUITY:
        alpha = surface.meta.get("alpha", sharpe.signed_alpha if sharpe else 0.0)
        pay = surface.meta.get("payment_rate", payment_rate)
        if surface.two_factor:
            prob = _annuity_level_problem_2d(hazard, rate, surface.rate_grid,
                                             grid, alpha, level, pay)
            return _theta_residual_2d(surface.values, times, prob, prev_hist, theta)
        rr = surface.meta.get("r_fixed", r0)
        if rr is None:
            raise ValueError("deterministic-rate residual needs r0")
        r_of_t = deterministic_rate_path(rate, rr, times)
        prob = _annuity_level_problem_1d(hazard, lam, grid, alpha, level,
                                         r_of_t, pay)
        return _theta_residual_1d(surface.values, times, prob, prev_hist, theta)

    if equation_id == EQ_LIMIT:
        alpha = surface.meta["alpha"]
        base = _hazard_y_coeffs(hazard, lam, drift_shift=alpha)
        if surface.two_factor:
            def r_coeffs(t):
                return (drift_under_Q(rate, surface.rate_grid.r, t),
                        0.5 * rate.c(surface.rate_grid.r, t) ** 2,
                        surface.rate_grid.r)

            prob = _Problem2D(rate_grid=surface.rate_grid, hazard_grid=grid,
                              r_coeffs=r_coeffs,
                              y_coeffs=lambda t: base(t)[:2] + (lam,),
                              source=lambda t, prev_slice: 1.0, nonlin=None,
                              terminal=surface.values[-1], label=EQ_LIMIT)
            return _theta_residual_2d(surface.values, times, prob, None, theta)
        rr = surface.meta.get("r_fixed", r0)
        r_of_t = deterministic_rate_path(rate, rr, times)

        def coeffs(t):
            A, B, _ = base(t)
            return A, B, r_of_t(t) + lam

        prob = _Problem1D(x=grid.y, coeffs=coeffs,
                          source=lambda t, prev_slice: 1.0, nonlin=None,
                          terminal=surface.values[-1], label=EQ_LIMIT)
        return _theta_residual_1d(surface.values, times, prob, None, theta)

    raise ValueError(f"unsupported equation id {equation_id!r}")
