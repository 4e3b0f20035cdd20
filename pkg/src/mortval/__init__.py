"""Valuation of life-annuity portfolios under stochastic hazard and
interest rates, with non-diversifiable mortality risk priced through an
instantaneous Sharpe-ratio loading.

The package solves the nonlinear portfolio-size recursion and its limit
by finite differences, verifies every solution against independent
Monte Carlo representations, and exposes the qualitative structure of
the values (bounds, monotonicity, risk-charge decomposition) as an
executable property suite.
"""

from .errors import (ConfigError, ControlConstraintError, DegenerateHedgeError,
                     DomainError, MortvalError, SolverError)
from .grids import HazardGrid, RateGrid, SolverConfig, Surface, TimeMesh
from .models import (BrownianMakehamParams, HazardModel, SharpeConfig,
                     ShortRateModel, bond_delta, bond_price, brownian_makeham,
                     cir, constant_hazard, constant_rate, custom_hazard,
                     custom_rate, drift_under_Q, hazard_coefficients, vasicek)
from .montecarlo import (HedgeCheckReport, McEstimate, MeasureSpec, PathConfig,
                         mc_annuity_alpha0, mc_good_deal, mc_limit,
                         mc_survival, simulate_hedged_portfolio, simulate_paths)
from .pde import (ValuationStack, apply_generator, pde_residual, solve_annuity,
                  solve_beta, solve_bond_pde, solve_indifference, solve_limit,
                  solve_pure_endowment)
from .valuation import (ControlField, GridConfig, PropertyReport,
                        RiskChargeReport, Scenario, alpha0_value,
                        annuity_certain, bid_ask, extract_controls,
                        fbeta_quadrature, fphi_quadrature, hedge_ratio,
                        risk_charge_split, run_property_suite, value_portfolio)

__version__ = "0.1.0"
