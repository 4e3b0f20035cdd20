"""Shared fixtures: the two reference settings used throughout the suite.

The "constant" setting (deterministic 4% hazard at its own floor, 5%
rate, alpha = 0.1, T = 10) has closed forms for everything; the
"stochastic" setting pairs the mean-reverting Brownian Makeham hazard
with a Vasicek rate.
"""

import math

import numpy as np
import pytest

import mortval as mv

# closed-form reference values for the constant setting
R0, LAM0, ALPHA, HORIZON = 0.05, 0.04, 0.1, 10.0
K_SELLER = R0 + LAM0 - ALPHA * math.sqrt(LAM0)          # 0.07
K_BUYER = R0 + LAM0 + ALPHA * math.sqrt(LAM0)           # 0.11
K_ALPHA0 = R0 + LAM0                                    # 0.09
SELLER_CF = (1 - math.exp(-K_SELLER * HORIZON)) / K_SELLER    # 7.191638517265579
BUYER_CF = (1 - math.exp(-K_BUYER * HORIZON)) / K_BUYER       # 6.064808330017459
ALPHA0_CF = (1 - math.exp(-K_ALPHA0 * HORIZON)) / K_ALPHA0    # 6.593670447326676


@pytest.fixture(scope="session")
def const_models():
    return mv.constant_hazard(LAM0), mv.constant_rate()


@pytest.fixture(scope="session")
def const_grid():
    return mv.HazardGrid.from_reference(LAM0, LAM0, 101, anchor_lam=LAM0)


@pytest.fixture(scope="session")
def const_seller(const_models, const_grid):
    hz, rt = const_models
    sh = mv.SharpeConfig(alpha=ALPHA, lambda_floor=LAM0)
    return mv.solve_annuity(hz, rt, sh, 1, horizon=HORIZON,
                            hazard_grid=const_grid, mode="deterministic_rate",
                            r0=R0, n_steps=2000)


@pytest.fixture(scope="session")
def bm_hazard():
    params = mv.BrownianMakehamParams(g=0.01, m=0.5, sigma=0.2,
                                      lambda0=0.05, lambda_floor=0.01)
    return mv.brownian_makeham(params)


@pytest.fixture(scope="session")
def vasicek_rate():
    return mv.vasicek(kappa=0.2, theta=0.05, vol=0.01, mpr=0.2)


@pytest.fixture(scope="session")
def bm_grid():
    return mv.HazardGrid.from_reference(0.01, 0.05, 200, anchor_lam=0.05)


def ode_chain_values(n_max, r, lam, alpha, horizon):
    """Independent oracle: the constant-setting size recursion integrated
    as a stiff ODE system with a high-order adaptive scheme."""
    from scipy.integrate import solve_ivp

    def rhs(tau, b):
        out = np.empty_like(b)
        prev = 0.0
        for k in range(n_max):
            n = k + 1
            d = b[k] - prev
            out[k] = n - r * b[k] - n * lam * d + alpha * math.sqrt(n * lam) * d
            prev = b[k]
        return out

    sol = solve_ivp(rhs, (0.0, horizon), np.zeros(n_max), method="DOP853",
                    rtol=1e-11, atol=1e-12)
    return sol.y[:, -1]
