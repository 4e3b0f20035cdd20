"""Hazard-rate and short-rate models plus default-free bond prices.

The hazard rate (force of mortality) follows

    d lam = mu(lam, t) (lam - lam_floor) dt + sigma(t) (lam - lam_floor) dW

so the floor ``lam_floor`` is never crossed.  The short rate follows
``dr = b(r, t) dt + c(r, t) dW`` with a market price of risk ``q(r, t)``;
zero-coupon bond prices discount under the risk-neutral drift
``b_Q = b - q c``.  Closed-form affine bond prices are provided for the
constant, Vasicek and CIR families; custom coefficient functions fall back
to a one-dimensional finite-difference solve of the bond equation.

All rates are per year and times are in years.  Model objects are frozen
dataclasses: coefficient evaluation is pure and safe to share across
threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DomainError

__all__ = [
    "SharpeConfig",
    "HazardModel",
    "BrownianMakehamParams",
    "ShortRateModel",
    "constant_hazard",
    "brownian_makeham",
    "custom_hazard",
    "constant_rate",
    "vasicek",
    "cir",
    "custom_rate",
    "drift_under_Q",
    "bond_price",
    "bond_delta",
    "hazard_coefficients",
]

# Horizon over which coefficient functions are sampled at construction to
# enforce the model hypotheses (volatility bounded away from zero, drift
# positive near the floor).
_VALIDATION_HORIZON = 50.0
_VALIDATION_SAMPLES = 64


@dataclass(frozen=True)
class SharpeConfig:
    """Target instantaneous Sharpe ratio used as the mortality risk loading.

    ``alpha`` must lie in [0, sqrt(lambda_floor)]; larger values admit
    arbitrage because the risk-adjusted hazard could turn negative.  A
    buyer values the contract with the sign of alpha flipped.
    """

    alpha: float
    lambda_floor: float
    buyer: bool = False

    def __post_init__(self):
        if self.lambda_floor < 0:
            raise DomainError(f"lambda_floor must be >= 0, got {self.lambda_floor}")
        bound = math.sqrt(self.lambda_floor)
        if not 0.0 <= self.alpha <= bound:
            raise DomainError(
                f"alpha={self.alpha} outside [0, sqrt(lambda_floor)] = [0, {bound:.6g}]"
            )

    @property
    def signed_alpha(self) -> float:
        return -self.alpha if self.buyer else self.alpha


@dataclass(frozen=True)
class BrownianMakehamParams:
    """Parameters of the mean-reverting Brownian Makeham hazard law."""

    g: float
    m: float
    sigma: float
    lambda0: float
    lambda_floor: float = 0.0

    def __post_init__(self):
        if self.g < 0 or self.m < 0:
            raise DomainError("g and m must be nonnegative")
        if self.sigma <= 0:
            raise DomainError("sigma must be positive")
        if self.lambda_floor < 0:
            raise DomainError("lambda_floor must be nonnegative")
        if self.lambda0 <= self.lambda_floor:
            raise DomainError("lambda0 must exceed lambda_floor")


@dataclass(frozen=True)
class HazardModel:
    """Diffusion model for the mortality intensity.

    ``drift_fn(lam, t)`` is the proportional drift mu and ``vol_fn(t)`` the
    proportional volatility sigma; both multiply ``(lam - lambda_floor)``
    in the SDE.  ``lam_ref`` is a reference initial hazard used for grid
    placement and construction-time validation.
    """

    lambda_floor: float
    drift_fn: Callable[[np.ndarray, float], np.ndarray]
    vol_fn: Callable[[float], float]
    kind: str = "custom"
    lam_ref: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lambda_floor < 0:
            raise DomainError("lambda_floor must be >= 0")
        ts = np.linspace(0.0, _VALIDATION_HORIZON, _VALIDATION_SAMPLES)
        vols = np.array([float(self.vol_fn(t)) for t in ts])
        if np.any(vols < 0):
            raise DomainError("vol_fn must be nonnegative")
        sigma_zero = bool(np.all(vols == 0.0))
        if not sigma_zero and vols.min() <= 0.0:
            raise DomainError(
                "vol_fn must be identically zero or bounded below by a "
                "positive constant on the validation horizon"
            )
        object.__setattr__(self, "sigma_is_zero", sigma_zero)
        # Drift must be positive just above the floor so the floor is never
        # reached; only enforceable (and only needed) when the hazard
        # diffuses and starts strictly above the floor.
        ref = self.lam_ref
        if not sigma_zero and ref is not None and ref > self.lambda_floor:
            eps = 1e-4 * (ref - self.lambda_floor)
            lams = self.lambda_floor + eps * np.array([0.25, 0.5, 1.0])
            for t in (0.0, _VALIDATION_HORIZON / 2, _VALIDATION_HORIZON):
                mu = np.asarray(self.drift_fn(lams, t), dtype=float)
                if np.any(mu <= 0.0):
                    raise DomainError(
                        "drift_fn must be positive near the hazard floor"
                    )

    def drift(self, lam, t):
        return np.asarray(self.drift_fn(np.asarray(lam, dtype=float), t), dtype=float)

    def vol(self, t) -> float:
        return float(self.vol_fn(t))


def constant_hazard(level: float) -> HazardModel:
    """Deterministic hazard frozen at ``level`` (its own floor)."""
    if level < 0:
        raise DomainError("hazard level must be >= 0")
    return HazardModel(
        lambda_floor=level,
        drift_fn=lambda lam, t: np.zeros_like(np.asarray(lam, dtype=float)),
        vol_fn=lambda t: 0.0,
        kind="constant",
        lam_ref=level,
        params={"level": level},
    )


def brownian_makeham(params: BrownianMakehamParams) -> HazardModel:
    """Mean-reverting Brownian Makeham law.

    ``lam_t = floor + (lam0 - floor) exp(g t + Y_t)`` with OU noise
    ``dY = -m Y dt + sigma dW``; the equivalent proportional drift is
    ``mu(lam, t) = g + sigma^2/2 + m ln(lam0 - floor) + m g t
    - m ln(lam - floor)``.
    """
    g, m, s = params.g, params.m, params.sigma
    lf, lam0 = params.lambda_floor, params.lambda0
    log_ref = math.log(lam0 - lf)

    def mu(lam, t):
        lam = np.asarray(lam, dtype=float)
        return g + 0.5 * s * s + m * log_ref + m * g * t - m * np.log(lam - lf)

    return HazardModel(
        lambda_floor=lf,
        drift_fn=mu,
        vol_fn=lambda t: s,
        kind="brownian_makeham",
        lam_ref=lam0,
        params={"g": g, "m": m, "sigma": s, "lambda0": lam0},
    )


def custom_hazard(drift_fn, vol_fn, lambda_floor: float,
                  lam_ref: float | None = None) -> HazardModel:
    return HazardModel(lambda_floor=lambda_floor, drift_fn=drift_fn,
                       vol_fn=vol_fn, kind="custom", lam_ref=lam_ref)


@dataclass(frozen=True)
class ShortRateModel:
    """Short-rate model ``dr = b dt + c dW`` with market price of risk q.

    ``params`` holds the affine parameters for the constant / Vasicek / CIR
    kinds so bond prices have closed forms; the custom kind prices bonds by
    solving the bond PDE numerically.  For the CIR kind the market price of
    risk is the proportional loading ``q(r, t) = mpr * sqrt(r)``, which
    preserves affinity.
    """

    kind: str
    drift_fn: Callable[[np.ndarray, float], np.ndarray]
    vol_fn: Callable[[np.ndarray, float], np.ndarray]
    mpr_fn: Callable[[np.ndarray, float], np.ndarray]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        rs = np.linspace(1e-4, 1.0, 32)
        for t in (0.0, _VALIDATION_HORIZON):
            c = np.asarray(self.vol_fn(rs, t), dtype=float)
            if np.any(c < 0):
                raise DomainError("vol_fn c(r, t) must be nonnegative")

    def b(self, r, t):
        return np.asarray(self.drift_fn(np.asarray(r, dtype=float), t), dtype=float)

    def c(self, r, t):
        return np.asarray(self.vol_fn(np.asarray(r, dtype=float), t), dtype=float)

    def q(self, r, t):
        return np.asarray(self.mpr_fn(np.asarray(r, dtype=float), t), dtype=float)

    @property
    def is_deterministic(self) -> bool:
        return self.kind == "constant" or (
            self.kind == "custom" and self.params.get("deterministic", False)
        )


def constant_rate() -> ShortRateModel:
    """Constant short rate: b = c = q = 0."""
    zero = lambda r, t: np.zeros_like(np.asarray(r, dtype=float))
    return ShortRateModel(kind="constant", drift_fn=zero, vol_fn=zero,
                          mpr_fn=zero, params={})


def vasicek(kappa: float, theta: float, vol: float, mpr: float = 0.0) -> ShortRateModel:
    """Vasicek model ``dr = kappa (theta - r) dt + vol dW`` with constant q."""
    if kappa <= 0 or vol < 0:
        raise DomainError("vasicek requires kappa > 0 and vol >= 0")
    return ShortRateModel(
        kind="vasicek",
        drift_fn=lambda r, t: kappa * (theta - np.asarray(r, dtype=float)),
        vol_fn=lambda r, t: np.full_like(np.asarray(r, dtype=float), vol),
        mpr_fn=lambda r, t: np.full_like(np.asarray(r, dtype=float), mpr),
        params={"kappa": kappa, "theta": theta, "vol": vol, "mpr": mpr},
    )


def cir(kappa: float, theta: float, vol: float, mpr: float = 0.0) -> ShortRateModel:
    """CIR model ``dr = kappa (theta - r) dt + vol sqrt(r) dW``."""
    if kappa <= 0 or theta <= 0 or vol <= 0:
        raise DomainError("cir requires kappa, theta, vol > 0")
    return ShortRateModel(
        kind="cir",
        drift_fn=lambda r, t: kappa * (theta - np.asarray(r, dtype=float)),
        vol_fn=lambda r, t: vol * np.sqrt(np.maximum(np.asarray(r, dtype=float), 0.0)),
        mpr_fn=lambda r, t: mpr * np.sqrt(np.maximum(np.asarray(r, dtype=float), 0.0)),
        params={"kappa": kappa, "theta": theta, "vol": vol, "mpr": mpr},
    )


def custom_rate(drift_fn, vol_fn, mpr_fn=None, *, deterministic=False) -> ShortRateModel:
    if mpr_fn is None:
        mpr_fn = lambda r, t: np.zeros_like(np.asarray(r, dtype=float))
    return ShortRateModel(kind="custom", drift_fn=drift_fn, vol_fn=vol_fn,
                          mpr_fn=mpr_fn, params={"deterministic": deterministic})


def drift_under_Q(model: ShortRateModel, r, t):
    """Risk-neutral short-rate drift ``b - q c``."""
    return model.b(r, t) - model.q(r, t) * model.c(r, t)


def _vasicek_AB(model: ShortRateModel, tau):
    p = model.params
    kappa, vol = p["kappa"], p["vol"]
    theta_q = p["theta"] - p["mpr"] * vol / kappa
    B = (1.0 - np.exp(-kappa * tau)) / kappa
    lnA = (theta_q - vol * vol / (2 * kappa * kappa)) * (B - tau) \
        - vol * vol * B * B / (4 * kappa)
    return np.exp(lnA), B


def _cir_AB(model: ShortRateModel, tau):
    p = model.params
    kappa, theta, vol = p["kappa"], p["theta"], p["vol"]
    kq = kappa + p["mpr"] * vol          # risk-neutral reversion speed
    h = math.sqrt(kq * kq + 2 * vol * vol)
    e = np.exp(h * tau)
    denom = 2 * h + (kq + h) * (e - 1.0)
    A = (2 * h * np.exp((kq + h) * tau / 2) / denom) ** (2 * kappa * theta / (vol * vol))
    B = 2 * (e - 1.0) / denom
    return A, B


def _affine_AB(model: ShortRateModel, tau):
    if model.kind == "constant":
        return np.ones_like(np.asarray(tau, dtype=float)), np.asarray(tau, dtype=float)
    if model.kind == "vasicek":
        return _vasicek_AB(model, tau)
    if model.kind == "cir":
        return _cir_AB(model, tau)
    raise DomainError(f"no affine form for kind {model.kind!r}")


def bond_price(model: ShortRateModel, r, t: float, maturity: float):
    """Price ``F(r, t; maturity)`` of a default-free zero-coupon bond.

    Affine kinds use the closed-form ``A(tau) exp(-B(tau) r)``; custom
    kinds solve the bond PDE on a rate grid and interpolate.
    """
    if maturity < t:
        raise DomainError(f"maturity {maturity} precedes valuation time {t}")
    tau = maturity - t
    r = np.asarray(r, dtype=float)
    if model.kind == "custom":
        from .pde import solve_bond_pde
        return solve_bond_pde(model, r, t, maturity)
    A, B = _affine_AB(model, tau)
    out = A * np.exp(-B * r)
    return float(out) if out.ndim == 0 else out


def bond_delta(model: ShortRateModel, r, t: float, maturity: float):
    """Partial derivative of the bond price in the short rate."""
    if maturity < t:
        raise DomainError(f"maturity {maturity} precedes valuation time {t}")
    r = np.asarray(r, dtype=float)
    if model.kind == "custom":
        h = 1e-5
        up = bond_price(model, r + h, t, maturity)
        dn = bond_price(model, r - h, t, maturity)
        out = (np.asarray(up) - np.asarray(dn)) / (2 * h)
        return float(out) if out.ndim == 0 else out
    tau = maturity - t
    A, B = _affine_AB(model, tau)
    out = -B * A * np.exp(-B * r)
    return float(out) if out.ndim == 0 else out


def hazard_coefficients(model: HazardModel, lam, t: float):
    """Full SDE coefficients ``(mu (lam-floor), sigma (lam-floor))``.

    The hazard domain is ``lam > lambda_floor``; the degenerate constant
    kind sits exactly at its floor and is allowed there.
    """
    lam_arr = np.asarray(lam, dtype=float)
    at_floor_ok = model.kind == "constant"
    if np.any(lam_arr < model.lambda_floor) or (
        not at_floor_ok and np.any(lam_arr <= model.lambda_floor)
    ):
        raise DomainError(
            f"hazard {lam} at or below the floor {model.lambda_floor}"
        )
    gap = lam_arr - model.lambda_floor
    drift = model.drift(lam_arr, t) * gap
    vol = model.vol(t) * gap
    if lam_arr.ndim == 0:
        return float(drift), float(vol)
    return drift, np.broadcast_to(vol, lam_arr.shape)
