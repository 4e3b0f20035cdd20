"""Scenario orchestration: portfolio values, controls, hedges, bid/ask,
risk charges and the property suite."""

import dataclasses
import math

import numpy as np
import pytest
from pytest import approx

import mortval as mv
from mortval.errors import DomainError

from conftest import (ALPHA, ALPHA0_CF, BUYER_CF, HORIZON, LAM0, R0,
                      SELLER_CF, ode_chain_values)


@pytest.fixture(scope="module")
def const_scenario():
    return mv.Scenario(
        title="constant", hazard=mv.constant_hazard(LAM0),
        rate=mv.constant_rate(),
        sharpe=mv.SharpeConfig(alpha=ALPHA, lambda_floor=LAM0),
        horizon=HORIZON, r0=R0, lam0=LAM0, sizes=(1, 2, 3),
        grid=mv.GridConfig(mode="deterministic_rate", n_hazard=101,
                           n_time=1000),
        paths=mv.PathConfig(paths=2000, seed=5),
        probes=((R0, LAM0, 0.0),))


@pytest.fixture(scope="module")
def stoch_scenario(bm_hazard, vasicek_rate):
    return mv.Scenario(
        title="stochastic-small", hazard=bm_hazard, rate=vasicek_rate,
        sharpe=mv.SharpeConfig(alpha=0.05, lambda_floor=0.01),
        horizon=5.0, r0=0.04, lam0=0.05, sizes=(1, 2, 5),
        grid=mv.GridConfig(mode="two_factor", n_hazard=60, n_rate=60,
                           n_time=300),
        paths=mv.PathConfig(paths=2000, seed=5),
        probes=((0.04, 0.05, 0.0), (0.05, 0.07, 0.0)))


class TestValuePortfolio:
    def test_n_zero_is_zero_stack(self, const_scenario):
        stack, rows = mv.value_portfolio(const_scenario, 0)
        assert stack.n == 0
        assert np.all(stack.level(0).values == 0.0)
        assert rows == []

    def test_alpha_zero_probes_scale(self, const_scenario):
        scen = dataclasses.replace(
            const_scenario,
            sharpe=mv.SharpeConfig(alpha=0.0, lambda_floor=LAM0))
        _, rows = mv.value_portfolio(scen, 3)
        vals = {k: v for (_, k, v) in rows}
        for n in (2, 3):
            assert vals[n] == approx(n * vals[1], rel=2e-13)
        assert vals[3] == approx(3 * ALPHA0_CF, abs=2e-3 * 3)

    def test_constant_alpha_chain_against_ode_oracle(self, const_scenario):
        _, rows = mv.value_portfolio(const_scenario, 3)
        oracle = ode_chain_values(3, R0, LAM0, ALPHA, HORIZON)
        vals = {k: v for (_, k, v) in rows}
        for n in (1, 2, 3):
            assert vals[n] == approx(oracle[n - 1], rel=2e-4)


class TestExtractControls:
    def test_constant_setting_values(self, const_seller):
        # a_lam = 0 so delta* = 0 and gamma* = -alpha / sqrt(lam) = -0.5
        hz = mv.constant_hazard(LAM0)
        field = mv.extract_controls(const_seller.level(1), hz, ALPHA)
        d = field.delta(None, np.array([LAM0]), 0.0)[0]
        g = field.gamma(None, np.array([LAM0]), 0.0)[0]
        assert d == approx(0.0, abs=1e-12)
        assert g == approx(-0.5, abs=1e-6)

    def test_terminal_slice_flagged(self, const_seller):
        hz = mv.constant_hazard(LAM0)
        field = mv.extract_controls(const_seller.level(1), hz, ALPHA)
        assert np.all(field.flagged[-1])
        assert np.all(field.delta_surface.values[-1] == 0.0)
        assert np.all(field.gamma_surface.values[-1] == 0.0)

    def test_identity_holds_everywhere(self, bm_hazard, bm_grid):
        sh = mv.SharpeConfig(alpha=0.05, lambda_floor=0.01)
        stack = mv.solve_annuity(bm_hazard, mv.constant_rate(), sh, 1,
                                 horizon=5.0, hazard_grid=bm_grid,
                                 mode="deterministic_rate", r0=0.04,
                                 n_steps=500)
        field = mv.extract_controls(stack.level(1), bm_hazard, 0.05)
        worst, frac, gmin = field.identity_stats()
        assert worst <= 1e-10
        assert frac >= 0.999
        assert gmin > -1.0

    def test_level_two_rejected(self, const_scenario):
        stack, _ = mv.value_portfolio(const_scenario, 2, store="all")
        with pytest.raises(DomainError):
            mv.extract_controls(stack.level(2), const_scenario.hazard, ALPHA)

    def test_interpolated_lookup_stays_admissible(self, bm_hazard, bm_grid):
        sh = mv.SharpeConfig(alpha=0.05, lambda_floor=0.01)
        stack = mv.solve_annuity(bm_hazard, mv.constant_rate(), sh, 1,
                                 horizon=5.0, hazard_grid=bm_grid,
                                 mode="deterministic_rate", r0=0.04,
                                 n_steps=500)
        field = mv.extract_controls(stack.level(1), bm_hazard, 0.05)
        rng = np.random.default_rng(3)
        lams = 0.011 + rng.uniform(0, 0.3, size=500)
        for t in (0.0, 1.234, 4.9):
            d, g = field.pair(None, lams, t)
            assert np.all(d * d + lams * g * g <= 0.05 ** 2 * (1 + 1e-9))
            assert np.all(g >= -1.0)


class TestHedgeRatio:
    def test_zero_at_horizon(self, const_seller):
        hz = mv.constant_hazard(LAM0)
        assert mv.hedge_ratio(const_seller.level(1), hz, mv.constant_rate(),
                              R0, LAM0, HORIZON) == 0.0

    def test_deterministic_rate_against_symbolic(self, const_seller):
        # a = (1 - e^{-k tau})/k with k = r + lam - alpha sqrt(lam):
        # a_r = (e^{-k tau}(1 + k tau) - 1)/k^2 and F_r = -tau e^{-r tau}
        hz = mv.constant_hazard(LAM0)
        got = mv.hedge_ratio(const_seller.level(1), hz, mv.constant_rate(),
                             R0, LAM0, 0.0)
        k = R0 + LAM0 - ALPHA * math.sqrt(LAM0)
        a_r = (math.exp(-k * HORIZON) * (1 + k * HORIZON) - 1) / (k * k)
        f_r = -HORIZON * math.exp(-R0 * HORIZON)
        assert got == approx(a_r / f_r, rel=1e-3)

    def test_two_factor_stable_under_refinement(self, bm_hazard, vasicek_rate):
        sh = mv.SharpeConfig(alpha=0.05, lambda_floor=0.01)
        vals = []
        for (ny, nr, nt) in [(50, 50, 200), (100, 100, 400)]:
            hg = mv.HazardGrid.from_reference(0.01, 0.05, ny, anchor_lam=0.05)
            rg = mv.RateGrid.from_bounds(0.001, 0.15, nr, anchor_r=0.04)
            st = mv.solve_annuity(bm_hazard, vasicek_rate, sh, 1, horizon=5.0,
                                  hazard_grid=hg, rate_grid=rg,
                                  mode="two_factor", n_steps=nt)
            vals.append(mv.hedge_ratio(st.level(1), bm_hazard, vasicek_rate,
                                       0.04, 0.05, 0.0))
        assert vals[1] == approx(vals[0], rel=0.01)


class TestBidAsk:
    def test_alpha_zero_collapses(self, const_scenario):
        scen = dataclasses.replace(
            const_scenario,
            sharpe=mv.SharpeConfig(alpha=0.0, lambda_floor=LAM0))
        [(probe, bid, ask)] = mv.bid_ask(scen)
        assert bid == ask

    def test_constant_setting_interval(self, const_scenario):
        [(probe, bid, ask)] = mv.bid_ask(const_scenario)
        assert ask == approx(SELLER_CF, abs=2e-3)
        assert bid == approx(BUYER_CF, abs=2e-3)

    def test_interval_contains_alpha0(self, stoch_scenario):
        rows = mv.bid_ask(stoch_scenario)
        grid = stoch_scenario.hazard_grid()
        for (r, lam, t), bid, ask in rows:
            base = mv.alpha0_value(stoch_scenario.hazard, stoch_scenario.rate,
                                   r, lam, t, stoch_scenario.horizon,
                                   grid=grid)
            assert bid <= base + 1e-3
            assert base <= ask + 1e-3


class TestRiskCharge:
    def test_charges_sum_exactly(self, stoch_scenario):
        rc = mv.risk_charge_split(stoch_scenario, 2,
                                  stoch_scenario.probes[0])
        assert rc.finite_portfolio + rc.stochastic_hazard == approx(
            rc.per_annuity - rc.base_alpha0, abs=1e-15)

    def test_deterministic_hazard_has_no_stochastic_charge(self, const_scenario):
        rc = mv.risk_charge_split(const_scenario, 2, const_scenario.probes[0])
        assert abs(rc.stochastic_hazard) <= 1e-3

    def test_stochastic_charge_positive(self, stoch_scenario):
        rc = mv.risk_charge_split(stoch_scenario, 2, stoch_scenario.probes[0])
        assert rc.stochastic_hazard > 0.0

    def test_finite_charge_decreases_in_n(self, stoch_scenario):
        stack, _ = mv.value_portfolio(stoch_scenario, 5)
        charges = [mv.risk_charge_split(stoch_scenario, n,
                                        stoch_scenario.probes[0],
                                        stack=stack).finite_portfolio
                   for n in (1, 2, 5)]
        assert charges[0] > charges[1] > charges[2] > -1e-3


class TestPropertySuite:
    def test_constant_scenario_all_pass(self, const_scenario):
        report = mv.run_property_suite(const_scenario)
        failing = [c.pid for c in report.checks if c.status == "fail"]
        assert failing == []

    def test_report_serialization(self, tmp_path, const_scenario):
        report = mv.run_property_suite(const_scenario)
        md = report.to_markdown()
        assert "| P1 |" in md and "| T4.4 |" in md
        path = tmp_path / "props.csv"
        report.to_csv(str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == "property,status,worst_violation,tolerance,location"
        assert len(lines) == 1 + len(report.checks)

    def test_mu_comparison_uses_shifted_drift(self, stoch_scenario):
        report = mv.run_property_suite(stoch_scenario)
        by_id = {c.pid: c for c in report.checks}
        assert by_id["P6"].status == "pass"
        assert by_id["P10"].worst <= 1e-12
        failing = [c.pid for c in report.checks if c.status == "fail"]
        assert failing == []


class TestScenarioValidation:
    def test_probe_outside_horizon_rejected(self, bm_hazard):
        with pytest.raises(DomainError):
            mv.Scenario(title="bad", hazard=bm_hazard, rate=mv.constant_rate(),
                        sharpe=mv.SharpeConfig(alpha=0.05, lambda_floor=0.01),
                        horizon=5.0, r0=0.04, lam0=0.05,
                        probes=((0.04, 0.05, 9.0),))

    def test_probe_below_floor_rejected(self, bm_hazard):
        with pytest.raises(DomainError):
            mv.Scenario(title="bad", hazard=bm_hazard, rate=mv.constant_rate(),
                        sharpe=mv.SharpeConfig(alpha=0.05, lambda_floor=0.01),
                        horizon=5.0, r0=0.04, lam0=0.05,
                        probes=((0.04, 0.005, 0.0),))

    def test_grids_anchor_probe_states(self, stoch_scenario):
        hg = stoch_scenario.hazard_grid()
        rg = stoch_scenario.rate_grid()
        assert np.min(np.abs(hg.lam - 0.05)) < 1e-12
        assert np.min(np.abs(rg.r - 0.04)) < 1e-12
