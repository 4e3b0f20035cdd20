"""Model definitions, risk-neutral drift, bond prices and hazard coefficients."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pytest import approx

import mortval as mv
from mortval.errors import DomainError


class TestDriftUnderQ:
    def test_zero_model(self):
        rt = mv.constant_rate()
        assert mv.drift_under_Q(rt, 0.03, 1.7) == 0.0

    def test_vasicek_example(self):
        # b - q c = 0.2 * (0.05 - 0.04) - 0.3 * 0.01 = -0.001
        rt = mv.vasicek(kappa=0.2, theta=0.05, vol=0.01, mpr=0.3)
        assert mv.drift_under_Q(rt, 0.04, 0.0) == approx(-0.001, abs=1e-15)

    def test_q_zero_is_identity(self):
        rt = mv.vasicek(kappa=0.3, theta=0.04, vol=0.02, mpr=0.0)
        rs = np.linspace(0.005, 0.2, 40)
        for t in (0.0, 3.7, 10.0):
            np.testing.assert_allclose(mv.drift_under_Q(rt, rs, t),
                                       rt.b(rs, t), rtol=0, atol=0)


class TestBondPrice:
    def test_constant_rate_closed_form(self):
        rt = mv.constant_rate()
        assert mv.bond_price(rt, 0.05, 0.0, 10.0) == approx(math.exp(-0.5),
                                                            abs=1e-12)

    @pytest.mark.parametrize("factory", [
        mv.constant_rate,
        lambda: mv.vasicek(0.2, 0.05, 0.01, mpr=0.3),
        lambda: mv.cir(0.3, 0.04, 0.05),
    ])
    def test_terminal_condition_is_exact(self, factory):
        rt = factory()
        assert mv.bond_price(rt, 0.037, 4.0, 4.0) == 1.0

    def test_maturity_before_t_rejected(self):
        with pytest.raises(DomainError):
            mv.bond_price(mv.constant_rate(), 0.05, 2.0, 1.0)

    def test_vasicek_matches_pde_solve(self):
        # closed-form affine price vs an independent PDE solve, rel 1e-4
        rt = mv.vasicek(kappa=0.2, theta=0.05, vol=0.01, mpr=0.0)
        got = mv.bond_price(rt, 0.03, 0.0, 5.0)
        oracle = mv.solve_bond_pde(rt, 0.03, 0.0, 5.0)
        assert got == approx(oracle, rel=1e-4)

    @pytest.mark.parametrize("factory", [
        lambda: mv.vasicek(0.2, 0.05, 0.01, mpr=0.2),
        lambda: mv.cir(0.3, 0.04, 0.05, mpr=0.1),
    ])
    def test_affine_forms_match_pde_on_sample(self, factory):
        # time-homogeneous coefficients: one backward solve gives every
        # (r, t) pair of the 50 x 50 sample
        rt = factory()
        maturity = 5.0
        r_nodes, times, hist = mv.solve_bond_pde(rt, 0.05, 0.0, maturity,
                                                 n_r=600, return_all=True)
        rs = np.linspace(0.01, 0.12, 50)
        t_idx = np.linspace(0, len(times) - 2, 50).astype(int)
        worst = 0.0
        for k in t_idx:
            closed = mv.bond_price(rt, rs, float(times[k]), maturity)
            pde = np.interp(rs, r_nodes, hist[k])
            worst = max(worst, float(np.max(np.abs(closed / pde - 1.0))))
        assert worst < 1e-4

    @pytest.mark.parametrize("factory", [
        mv.constant_rate,
        lambda: mv.vasicek(0.2, 0.05, 0.01),
        lambda: mv.cir(0.3, 0.04, 0.05),
    ])
    def test_strictly_decreasing_in_r(self, factory):
        rt = factory()
        rs = np.linspace(0.001, 0.2, 100)
        prices = mv.bond_price(rt, rs, 0.0, 7.0)
        assert np.all(np.diff(prices) < 0)

    @given(t=st.floats(0.0, 10.0), u=st.floats(0.0, 10.0), s=st.floats(0.0, 10.0))
    def test_constant_rate_consistency(self, t, u, s):
        # F(r, t; s) = F(r, t; u) F(r, u; s) for a deterministic rate
        t, u, s = sorted((t, u, s))
        rt = mv.constant_rate()
        lhs = mv.bond_price(rt, 0.06, t, s)
        rhs = mv.bond_price(rt, 0.06, t, u) * mv.bond_price(rt, 0.06, u, s)
        assert lhs == approx(rhs, abs=1e-12)


class TestBondDelta:
    def test_constant_rate_closed_form(self):
        # d/dr e^(-r tau) = -tau e^(-r tau)
        rt = mv.constant_rate()
        assert mv.bond_delta(rt, 0.05, 0.0, 10.0) == approx(
            -10 * math.exp(-0.5), abs=1e-12)

    def test_zero_at_maturity(self):
        rt = mv.vasicek(0.2, 0.05, 0.01)
        assert mv.bond_delta(rt, 0.04, 5.0, 5.0) == 0.0

    def test_vasicek_matches_central_difference(self):
        rt = mv.vasicek(kappa=0.2, theta=0.05, vol=0.01, mpr=0.0)
        h = 1e-5
        fd = (mv.bond_price(rt, 0.03 + h, 0.0, 5.0)
              - mv.bond_price(rt, 0.03 - h, 0.0, 5.0)) / (2 * h)
        assert mv.bond_delta(rt, 0.03, 0.0, 5.0) == approx(fd, abs=1e-6)


class TestHazardCoefficients:
    def test_constant_kind_degenerate(self):
        hz = mv.constant_hazard(0.04)
        assert mv.hazard_coefficients(hz, 0.04, 0.0) == (0.0, 0.0)

    def test_brownian_makeham_example(self):
        # at lam = lam0 and t = 0 the log terms cancel:
        # mu = g + sigma^2/2 = 0.03, so the coefficients are
        # (0.03 * 0.04, 0.2 * 0.04)
        hz = mv.brownian_makeham(mv.BrownianMakehamParams(
            g=0.01, m=0.5, sigma=0.2, lambda0=0.05, lambda_floor=0.01))
        drift, vol = mv.hazard_coefficients(hz, 0.05, 0.0)
        assert drift == approx(0.0012, abs=1e-15)
        assert vol == approx(0.008, abs=1e-15)

    def test_drift_positive_near_floor(self):
        hz = mv.brownian_makeham(mv.BrownianMakehamParams(
            g=0.01, m=0.5, sigma=0.2, lambda0=0.05, lambda_floor=0.01))
        drift, _ = mv.hazard_coefficients(hz, 0.01 + 1e-12, 0.0)
        assert drift > 0.0

    def test_below_floor_rejected(self):
        hz = mv.brownian_makeham(mv.BrownianMakehamParams(
            g=0.01, m=0.5, sigma=0.2, lambda0=0.05, lambda_floor=0.01))
        with pytest.raises(DomainError):
            mv.hazard_coefficients(hz, 0.01, 0.0)
        with pytest.raises(DomainError):
            mv.hazard_coefficients(hz, 0.005, 0.0)

    def test_vectorized_over_lambda(self):
        hz = mv.brownian_makeham(mv.BrownianMakehamParams(
            g=0.01, m=0.5, sigma=0.2, lambda0=0.05, lambda_floor=0.01))
        lams = np.array([0.02, 0.05, 0.3])
        drift, vol = mv.hazard_coefficients(hz, lams, 1.0)
        assert drift.shape == vol.shape == (3,)
        singles = [mv.hazard_coefficients(hz, la, 1.0) for la in lams]
        np.testing.assert_allclose(drift, [s[0] for s in singles])
        np.testing.assert_allclose(vol, [s[1] for s in singles])


class TestSharpeConfig:
    @given(alpha=st.floats(0.0, 1.0), floor=st.floats(0.0, 1.0))
    def test_bound_enforced(self, alpha, floor):
        admissible = alpha <= math.sqrt(floor)
        if admissible:
            cfg = mv.SharpeConfig(alpha=alpha, lambda_floor=floor)
            assert cfg.signed_alpha == alpha
        else:
            with pytest.raises(DomainError):
                mv.SharpeConfig(alpha=alpha, lambda_floor=floor)

    @given(alpha=st.floats(-10.0, -1e-12))
    def test_negative_alpha_rejected(self, alpha):
        with pytest.raises(DomainError):
            mv.SharpeConfig(alpha=alpha, lambda_floor=1.0)

    def test_buyer_flips_sign(self):
        cfg = mv.SharpeConfig(alpha=0.1, lambda_floor=0.04, buyer=True)
        assert cfg.signed_alpha == -0.1

    def test_boundary_alpha_admissible(self):
        mv.SharpeConfig(alpha=0.1, lambda_floor=0.01)   # alpha == sqrt(floor)


class TestModelValidation:
    def test_vol_must_be_bounded_away_from_zero(self):
        with pytest.raises(DomainError):
            mv.custom_hazard(lambda lam, t: np.ones_like(lam),
                             lambda t: max(0.0, 0.1 - 0.01 * t),
                             lambda_floor=0.01, lam_ref=0.05)

    def test_drift_condition_sampled_at_floor(self):
        # diffusive hazard whose drift vanishes near the floor is rejected
        with pytest.raises(DomainError):
            mv.custom_hazard(lambda lam, t: np.zeros_like(lam),
                             lambda t: 0.2, lambda_floor=0.01, lam_ref=0.05)

    def test_brownian_makeham_params_validated(self):
        with pytest.raises(DomainError):
            mv.BrownianMakehamParams(g=-0.01, m=0.5, sigma=0.2,
                                     lambda0=0.05, lambda_floor=0.01)
        with pytest.raises(DomainError):
            mv.BrownianMakehamParams(g=0.01, m=0.5, sigma=0.2,
                                     lambda0=0.01, lambda_floor=0.01)

    def test_negative_rate_vol_rejected(self):
        with pytest.raises(DomainError):
            mv.custom_rate(lambda r, t: np.zeros_like(r),
                           lambda r, t: -np.ones_like(r))
