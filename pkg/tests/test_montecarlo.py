"""Path simulation and estimator oracles: determinism, measure changes,
degenerate closed forms and PDE cross-checks."""

import math

import numpy as np
import pytest
from pytest import approx

import mortval as mv
from mortval.errors import ControlConstraintError, DomainError

from conftest import ALPHA, ALPHA0_CF, HORIZON, LAM0, R0, SELLER_CF


@pytest.fixture(scope="module")
def small_cfg():
    return mv.PathConfig(paths=4000, steps_per_year=126, seed=99)


class TestSimulatePaths:
    def test_deterministic_models_collapse_paths(self, const_models):
        hz, rt = const_models
        cfg = mv.PathConfig(paths=16, steps_per_year=52, seed=1)
        bundle = mv.simulate_paths(hz, rt, mv.MeasureSpec(tag="physical"),
                                   cfg, 0.0, 2.0, R0, LAM0)
        assert np.all(bundle.lam == LAM0)
        assert np.all(bundle.r == R0)
        assert float(np.var(bundle.lam[:, -1])) == 0.0

    def test_same_seed_bitwise_identical(self, bm_hazard, vasicek_rate):
        cfg = mv.PathConfig(paths=1000, steps_per_year=52, seed=7)
        spec = mv.MeasureSpec(tag="hat", alpha=0.05)
        b1 = mv.simulate_paths(bm_hazard, vasicek_rate, spec, cfg, 0.0, 3.0,
                               0.04, 0.05)
        b2 = mv.simulate_paths(bm_hazard, vasicek_rate, spec, cfg, 0.0, 3.0,
                               0.04, 0.05)
        np.testing.assert_array_equal(b1.lam, b2.lam)
        np.testing.assert_array_equal(b1.r, b2.r)

    def test_hazard_floor_never_touched(self, bm_hazard):
        cfg = mv.PathConfig(paths=2000, steps_per_year=252, seed=3)
        bundle = mv.simulate_paths(bm_hazard, mv.constant_rate(),
                                   mv.MeasureSpec(tag="physical"), cfg,
                                   0.0, 5.0, 0.04, 0.05)
        assert np.all(bundle.lam > bm_hazard.lambda_floor)

    def test_initial_hazard_below_floor_rejected(self, bm_hazard):
        cfg = mv.PathConfig(paths=8, steps_per_year=12, seed=0)
        with pytest.raises(DomainError):
            mv.simulate_paths(bm_hazard, mv.constant_rate(),
                              mv.MeasureSpec(tag="physical"), cfg,
                              0.0, 1.0, 0.04, 0.01)

    def test_tilde_drift_shift_exact_without_reversion(self):
        # with m = 0 the proportional drift is state-free, so the same
        # normals give log-paths shifted by exactly -alpha sigma t
        hz = mv.brownian_makeham(mv.BrownianMakehamParams(
            g=0.01, m=0.0, sigma=0.2, lambda0=0.05, lambda_floor=0.01))
        cfg = mv.PathConfig(paths=64, steps_per_year=252, seed=2)
        alpha, t1 = 0.1, 4.0
        phys = mv.simulate_paths(hz, mv.constant_rate(),
                                 mv.MeasureSpec(tag="physical"), cfg,
                                 0.0, t1, R0, 0.05)
        tilde = mv.simulate_paths(hz, mv.constant_rate(),
                                  mv.MeasureSpec(tag="tilde", alpha=alpha),
                                  cfg, 0.0, t1, R0, 0.05)
        shift = np.log(tilde.lam[:, -1] - 0.01) - np.log(phys.lam[:, -1] - 0.01)
        np.testing.assert_allclose(shift, -alpha * 0.2 * t1, atol=1e-9)

    def test_tilde_drift_shift_with_reversion(self, bm_hazard, small_cfg):
        # mean reversion couples the shift back; compare sample means
        phys = mv.simulate_paths(bm_hazard, mv.constant_rate(),
                                 mv.MeasureSpec(tag="physical"), small_cfg,
                                 0.0, 3.0, R0, 0.05)
        tilde = mv.simulate_paths(bm_hazard, mv.constant_rate(),
                                  mv.MeasureSpec(tag="tilde", alpha=0.1),
                                  small_cfg, 0.0, 3.0, R0, 0.05)
        d = np.log(tilde.lam[:, -1] - 0.01) - np.log(phys.lam[:, -1] - 0.01)
        # deterministic shift of the OU mean: -alpha sigma (1-e^{-mt})/m
        expect = -0.1 * 0.2 * (1 - math.exp(-0.5 * 3.0)) / 0.5
        assert np.mean(d) == approx(expect, abs=3 * np.std(d) / math.sqrt(len(d)) + 1e-3)


class TestMcSurvival:
    def test_deterministic_hazard_closed_form(self, const_models):
        hz, _ = const_models
        cfg = mv.PathConfig(paths=8, steps_per_year=252, seed=1)
        est = mv.mc_survival(hz, mv.MeasureSpec(tag="physical"), LAM0,
                             0.0, 10.0, cfg)
        assert est.mean == approx(math.exp(-0.4), abs=1e-12)
        assert est.se == 0.0

    def test_tilde_at_alpha_zero_equals_physical(self, bm_hazard, small_cfg):
        phys = mv.mc_survival(bm_hazard, mv.MeasureSpec(tag="physical"),
                              0.05, 0.0, 4.0, small_cfg)
        tilde = mv.mc_survival(bm_hazard, mv.MeasureSpec(tag="tilde", alpha=0.0),
                               0.05, 0.0, 4.0, small_cfg)
        assert phys.mean == tilde.mean
        assert phys.se == tilde.se

    def test_matches_beta_pde(self, bm_hazard, bm_grid):
        cfg = mv.PathConfig(paths=30_000, steps_per_year=252, seed=17)
        est = mv.mc_survival(bm_hazard, mv.MeasureSpec(tag="tilde", alpha=0.1),
                             0.05, 0.0, 5.0, cfg)
        surf = mv.solve_beta(bm_hazard, 0.1, 5.0, bm_grid, n_steps=1000)
        assert abs(est.mean - surf.value_at(0.05, 0.0)) <= max(3 * est.se, 2e-3)

    def test_wrong_measure_rejected(self, bm_hazard, small_cfg):
        with pytest.raises(DomainError):
            mv.mc_survival(bm_hazard, mv.MeasureSpec(tag="hat", alpha=0.1),
                           0.05, 0.0, 1.0, small_cfg)


class TestMcAnnuityAlpha0:
    def test_constant_setting_quadrature_exact(self, const_models):
        hz, rt = const_models
        cfg = mv.PathConfig(paths=8, steps_per_year=252, seed=1)
        est = mv.mc_annuity_alpha0(hz, rt, R0, LAM0, 0.0, HORIZON, cfg)
        assert est.mean == approx(ALPHA0_CF, abs=1e-5)

    def test_empty_horizon(self, const_models):
        hz, rt = const_models
        cfg = mv.PathConfig(paths=8, steps_per_year=12, seed=1)
        est = mv.mc_annuity_alpha0(hz, rt, R0, LAM0, 3.0, 3.0, cfg)
        assert est.mean == 0.0

    def test_matches_two_factor_alpha0_solve(self, bm_hazard, vasicek_rate):
        cfg = mv.PathConfig(paths=30_000, steps_per_year=126, seed=23)
        est = mv.mc_annuity_alpha0(bm_hazard, vasicek_rate, 0.04, 0.05,
                                   0.0, 5.0, cfg)
        grid = mv.HazardGrid.from_reference(0.01, 0.05, 120, anchor_lam=0.05)
        rg = mv.RateGrid.from_bounds(0.001, 0.15, 80, anchor_r=0.04)
        sh = mv.SharpeConfig(alpha=0.0, lambda_floor=0.01)
        stack = mv.solve_annuity(bm_hazard, vasicek_rate, sh, 1, horizon=5.0,
                                 hazard_grid=grid, rate_grid=rg,
                                 mode="two_factor", n_steps=400)
        pde_val = stack.level(1).value_at(0.05, 0.0, r=0.04)
        assert abs(est.mean - pde_val) <= max(3 * est.se, 2e-3)


class TestMcLimit:
    def test_constant_setting(self, const_models):
        hz, rt = const_models
        cfg = mv.PathConfig(paths=8, steps_per_year=252, seed=1)
        est = mv.mc_limit(hz, rt, ALPHA, R0, LAM0, 0.0, HORIZON, cfg)
        assert est.mean == approx(ALPHA0_CF, abs=1e-4)
        assert est.se == 0.0

    def test_t_equals_horizon(self, const_models):
        hz, rt = const_models
        cfg = mv.PathConfig(paths=8, steps_per_year=12, seed=1)
        assert mv.mc_limit(hz, rt, ALPHA, R0, LAM0, 2.0, 2.0, cfg).mean == 0.0

    def test_matches_limit_pde(self, bm_hazard, vasicek_rate, bm_grid):
        cfg = mv.PathConfig(paths=30_000, steps_per_year=126, seed=31)
        est = mv.mc_limit(bm_hazard, vasicek_rate, 0.05, 0.04, 0.05,
                          0.0, 5.0, cfg)
        surf = mv.solve_limit(bm_hazard, vasicek_rate, 0.05, 5.0, bm_grid,
                              mode="two_factor",
                              rate_grid=mv.RateGrid.from_bounds(
                                  0.001, 0.15, 80, anchor_r=0.04),
                              n_steps=400)
        pde_val = surf.value_at(0.05, 0.0, r=0.04)
        assert abs(est.mean - pde_val) <= max(3 * est.se, 2e-3)


class TestMcGoodDeal:
    def test_zero_controls_reproduce_alpha0(self, const_models):
        hz, rt = const_models
        cfg = mv.PathConfig(paths=8, steps_per_year=252, seed=1)
        est = mv.mc_good_deal(hz, rt, ALPHA, (0.0, 0.0), R0, LAM0, 0.0,
                              HORIZON, cfg)
        assert est.mean == approx(ALPHA0_CF, abs=1e-4)

    def test_optimal_constant_controls_attain_seller(self, const_models):
        # gamma* = -alpha / sqrt(lam) = -0.5 turns the discount into the
        # seller's 0.07 rate
        hz, rt = const_models
        cfg = mv.PathConfig(paths=8, steps_per_year=252, seed=1)
        est = mv.mc_good_deal(hz, rt, ALPHA, (0.0, -0.5), R0, LAM0, 0.0,
                              HORIZON, cfg)
        assert est.mean == approx(SELLER_CF, abs=1e-4)

    def test_suboptimal_controls_stay_below_seller(self, const_models):
        hz, rt = const_models
        cfg = mv.PathConfig(paths=64, steps_per_year=252, seed=5)
        rng = np.random.default_rng(11)
        for _ in range(5):
            u, psi = rng.uniform(0, 1), rng.uniform(0, 2 * math.pi)
            d = ALPHA * u * math.cos(psi)
            g = ALPHA * u * math.sin(psi) / math.sqrt(LAM0)
            est = mv.mc_good_deal(hz, rt, ALPHA, (d, g), R0, LAM0, 0.0,
                                  HORIZON, cfg)
            assert est.mean <= SELLER_CF + 3 * est.se + 1e-9

    def test_inadmissible_controls_raise(self, const_models):
        hz, rt = const_models
        cfg = mv.PathConfig(paths=8, steps_per_year=12, seed=1)
        with pytest.raises(ControlConstraintError):
            mv.mc_good_deal(hz, rt, ALPHA, (0.5, 0.0), R0, LAM0, 0.0, 2.0, cfg)
        with pytest.raises(ControlConstraintError):
            mv.mc_good_deal(hz, rt, 0.2, (0.0, -1.5), R0, LAM0, 0.0, 2.0, cfg)


class TestHedgedPortfolio:
    def test_constant_setting_variance(self, const_models, const_seller):
        hz, rt = const_models
        sh = mv.SharpeConfig(alpha=ALPHA, lambda_floor=LAM0)
        cfg = mv.PathConfig(paths=100_000, seed=13)
        rep = mv.simulate_hedged_portfolio(hz, rt, sh, const_seller.level(1),
                                           R0, LAM0, 0.0, HORIZON, cfg)
        lam_a2 = LAM0 * SELLER_CF ** 2
        assert rep.variance_predicted == approx(lam_a2, rel=1e-4)
        assert abs(rep.variance_empirical - rep.variance_predicted) \
            <= 3 * rep.se_variance
        assert abs(rep.sharpe_realized - ALPHA) <= 3 * rep.se_sharpe

    def test_at_horizon_everything_zero(self, const_models, const_seller):
        hz, rt = const_models
        sh = mv.SharpeConfig(alpha=ALPHA, lambda_floor=LAM0)
        cfg = mv.PathConfig(paths=100, seed=13)
        rep = mv.simulate_hedged_portfolio(hz, rt, sh, const_seller.level(1),
                                           R0, LAM0, HORIZON, HORIZON, cfg)
        assert rep.drift_empirical == 0.0
        assert rep.variance_empirical == 0.0


class TestEstimatorPlumbing:
    def test_se_shrinks_like_sqrt_paths(self, bm_hazard):
        cfg1 = mv.PathConfig(paths=10_000, steps_per_year=52, seed=41)
        cfg4 = mv.PathConfig(paths=40_000, steps_per_year=52, seed=41)
        e1 = mv.mc_survival(bm_hazard, mv.MeasureSpec(tag="physical"),
                            0.05, 0.0, 3.0, cfg1)
        e4 = mv.mc_survival(bm_hazard, mv.MeasureSpec(tag="physical"),
                            0.05, 0.0, 3.0, cfg4)
        assert e4.se == approx(e1.se / 2, rel=0.2)

    def test_antithetic_pairs_cancel_means(self, bm_hazard):
        # antithetic survival estimates keep the mean but reduce variance
        base = mv.PathConfig(paths=20_000, steps_per_year=52, seed=43)
        anti = mv.PathConfig(paths=20_000, steps_per_year=52, seed=43,
                             antithetic=True)
        eb = mv.mc_survival(bm_hazard, mv.MeasureSpec(tag="physical"),
                            0.05, 0.0, 3.0, base)
        ea = mv.mc_survival(bm_hazard, mv.MeasureSpec(tag="physical"),
                            0.05, 0.0, 3.0, anti)
        assert ea.se < eb.se
        assert ea.mean == approx(eb.mean, abs=4 * eb.se)

    def test_estimate_csv_export(self, tmp_path, const_models):
        hz, rt = const_models
        cfg = mv.PathConfig(paths=8, steps_per_year=12, seed=1)
        est = mv.mc_limit(hz, rt, ALPHA, R0, LAM0, 0.0, 2.0, cfg)
        path = tmp_path / "est.csv"
        mv.montecarlo.write_estimates_csv([est], str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == "label,mean,se,paths,seed"
        assert lines[1].startswith("limit,")

    def test_invalid_config_rejected(self):
        with pytest.raises(DomainError):
            mv.PathConfig(paths=0)
        with pytest.raises(DomainError):
            mv.PathConfig(paths=10, steps_per_year=0)
        with pytest.raises(DomainError):
            mv.MeasureSpec(tag="banana")
        with pytest.raises(DomainError):
            mv.MeasureSpec(tag="bar")
