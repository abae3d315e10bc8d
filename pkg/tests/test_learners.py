import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.core.exceptions import (
    FamilyError,
    InvalidDistributionError,
    QueryUnavailableError,
    RegimeError,
)
from app.services.analysis import verify_sandwich
from app.services.generators import gen_family, gen_single_curve
from app.services.learners import (
    LearnerKind,
    ShadeParams,
    choose_params,
    doubling_intervals,
    geometric_probe_count,
    hybrid_schedule,
    hybrid_shade_sf,
    interval_shade_df,
    interval_shade_sf,
    learn_hybrid,
    learn_interval,
    learn_pinpoint,
    pinpoint_bound,
    pinpoints,
    run_learner,
    shade_df,
    shade_f,
    single_concave_search,
    single_grid_geometric,
    single_grid_unit,
)
from app.services.myerson import expected_revenue, opt_revenue, posted_price_revenue
from app.services.oracle import OracleConfig, TargetedOracle
from app.services.quantile_dist import (
    Family,
    ProductPrior,
    QuantileDistribution,
    dominates,
    value_at,
)

GRID = np.linspace(0.0, 1.0, 10_001)


class TestShading:
    def test_query_regime_values(self):
        params = ShadeParams(N=10, n=4)
        assert shade_f(0.5, params) == pytest.approx(0.0525)
        assert shade_df(0.5, params) == pytest.approx(0.395)
        assert shade_f(0.25, params) == pytest.approx(0.0275)
        assert shade_df(0.25, params) == pytest.approx(0.195)
        assert shade_f(0.0, params) == pytest.approx(1.0 / 400)
        assert shade_df(0.0, params) == 0.0

    def test_envelope_is_symmetric(self):
        params = ShadeParams(N=16, n=3)
        assert_allclose(shade_f(GRID, params), shade_f(1.0 - GRID, params))

    @pytest.mark.parametrize("params", [ShadeParams(N=4, n=1), ShadeParams(N=10, n=4),
                                        ShadeParams(N=200, n=16)])
    def test_query_shading_is_monotone(self, params):
        assert np.all(np.diff(shade_df(GRID, params)) >= -1e-15)
        assert np.all(shade_df(GRID, params) <= GRID)

    def test_interval_shading(self):
        params = ShadeParams(N=1000, n=2, L=5.0, delta=0.25)
        sf, df = interval_shade_sf(GRID, params), interval_shade_df(GRID, params)
        assert np.all(np.diff(sf) >= -1e-15)
        assert np.all(np.diff(df) >= -1e-15)
        assert np.all(df <= sf)
        assert np.all(sf <= GRID)
        assert interval_shade_sf(1.0, params) == pytest.approx(1.0 - 4 * 5.0 * 0.25 / 1000)

    def test_hybrid_shading_caps_at_delta(self):
        params = ShadeParams(N=4, n=2, delta=0.01)
        assert hybrid_shade_sf(0.5, params) == pytest.approx(0.49)
        tight = ShadeParams(N=4, n=2, delta=0.5)
        assert hybrid_shade_sf(0.5, tight) == pytest.approx(0.5 - shade_f(0.5, tight))
        assert np.all(np.diff(hybrid_shade_sf(GRID, ShadeParams(N=32, n=4, delta=0.1))) >= -1e-15)

    def test_params_are_validated(self):
        with pytest.raises(InvalidDistributionError):
            ShadeParams(N=1, n=1)
        with pytest.raises(InvalidDistributionError):
            ShadeParams(N=4, n=0)


class TestPinpoints:
    def test_small_grid(self):
        qs = pinpoints(ShadeParams(N=4, n=2))
        assert qs[0] == 1.0
        assert qs[1] == pytest.approx(0.9375)
        assert qs[2] == pytest.approx(0.786612, abs=1e-6)
        assert np.all(np.diff(qs) < 0)
        assert qs[-1] > 0

    @pytest.mark.parametrize("N", [4, 5, 16, 64, 256])
    @pytest.mark.parametrize("n", [1, 2, 7, 64])
    def test_count_bound(self, N, n):
        params = ShadeParams(N=N, n=n)
        assert pinpoints(params).size - 1 <= pinpoint_bound(params)

    def test_point_mass_learns_the_point(self, make_oracle):
        D = QuantileDistribution.point_mass(7.0)
        result = learn_pinpoint(make_oracle(D, D), N=4)
        q1 = 1.0 - 2.0 / (16 * 2)
        for E in result.learned_prior:
            assert_allclose(E.values, [7.0, 0.0])
            assert_allclose(E.masses, [q1, 1.0 - q1])
        assert result.rule.reserves() == [7.0, 7.0]
        assert result.learner is LearnerKind.PINPOINT

    def test_budget_is_pinpoint_count(self, make_oracle, uniform):
        result = learn_pinpoint(make_oracle(uniform, uniform), N=16)
        per_buyer = pinpoints(ShadeParams(N=16, n=2)).size - 1
        assert result.budget.queries == (per_buyer, per_buyer)
        assert result.budget.samples == (0, 0)

    def test_needs_queries(self, make_oracle, uniform):
        with pytest.raises(QueryUnavailableError):
            learn_pinpoint(make_oracle(uniform, delta=0.2), N=8)

    def test_uniform_grid_sandwich(self, make_oracle, uniform):
        result = learn_pinpoint(make_oracle(uniform), N=16)
        assert verify_sandwich(uniform, result.learned_prior[0], result.params).ok

    @pytest.mark.slow
    def test_sandwich_holds_on_random_priors(self):
        failures = []
        for seed in range(200):
            for N in (4, 16, 64):
                prior = gen_family("unit01", support_size=10, n=2, seed=seed)
                result = learn_pinpoint(TargetedOracle(prior, OracleConfig(seed=seed)), N)
                for D, E in zip(prior, result.learned_prior):
                    if not verify_sandwich(D, E, result.params).ok:
                        failures.append((seed, N))
        assert failures == []


class TestIntervalLearner:
    def test_doubling_intervals(self):
        assert doubling_intervals(0.5) == [(0.0, 0.5), (0.5, 1.0)]
        assert doubling_intervals(0.8) == [(0.0, 1.0)]
        ivs = doubling_intervals(0.1)
        assert ivs[0] == (0.0, 0.1)
        assert ivs[-1] == pytest.approx((0.9, 1.0))
        assert all(b - a >= 0.1 - 1e-12 for a, b in ivs)
        assert sum(b - a for a, b in ivs) == pytest.approx(1.0)
        with pytest.raises(RegimeError):
            doubling_intervals(0.0)

    def test_point_mass(self, make_oracle):
        D = QuantileDistribution.point_mass(3.0)
        result = learn_interval(make_oracle(D, D, delta=0.5), N=100, L=2.0)
        for E in result.learned_prior:
            assert_allclose(E.values, [3.0, 0.0])
            assert_allclose(E.masses, [0.96, 0.04])
        assert result.budget.samples == (200, 200)

    def test_regime_check(self, make_oracle, uniform):
        with pytest.raises(RegimeError, match="use learn_hybrid"):
            learn_interval(make_oracle(uniform, uniform, uniform, delta=0.1), N=100)

    def test_single_buyer_wide_window(self, make_oracle):
        D = QuantileDistribution.point_mass(3.0)
        result = learn_interval(make_oracle(D, delta=0.7), N=100, L=2.0)
        E = result.learned_prior[0]
        assert_allclose(E.values, [3.0, 0.0])
        assert_allclose(E.masses, [1.0 - 4.0 * 2.0 * 0.7 / 100, 4.0 * 2.0 * 0.7 / 100])
        assert result.budget.samples == (100,)
        assert dominates(D, E)

    def test_single_buyer_wide_window_is_not_hybrid(self, make_oracle, uniform):
        with pytest.raises(RegimeError, match="use learn_interval"):
            learn_hybrid(make_oracle(uniform, delta=0.7), N=8)

    def test_learned_prior_is_dominated(self):
        passed = 0
        for seed in range(20):
            prior = gen_family("unit01", support_size=10, n=2, seed=seed)
            oracle = TargetedOracle(prior, OracleConfig(delta=0.5, seed=seed))
            result = learn_interval(oracle, N=2000)
            passed += all(dominates(D, E) for D, E in zip(prior, result.learned_prior))
        assert passed >= 19


class TestHybridLearner:
    def test_point_mass(self, make_oracle):
        D = QuantileDistribution.point_mass(7.0)
        oracle = make_oracle(D, D, D, D, delta=0.1)
        result = learn_hybrid(oracle, N=32)
        for E in result.learned_prior:
            assert dominates(D, E)
            assert_allclose(E.values, [7.0, 0.0])
            assert_allclose(E.masses, [1.0 - 1.0 / 4096, 1.0 / 4096])
        assert result.learner is LearnerKind.HYBRID

    def test_schedule_reaches_the_middle(self):
        params = ShadeParams(N=32, n=4, L=9.0, delta=0.1)
        counts = hybrid_schedule(params)
        assert len(counts) == 5
        assert counts[0] == math.ceil(9.0 * 0.1 * 4 * 32 * 32 * 4)

    def test_regime_checks(self, make_oracle, uniform):
        with pytest.raises(RegimeError, match="use learn_pinpoint"):
            learn_hybrid(make_oracle(uniform, uniform), N=8)
        with pytest.raises(RegimeError, match="use learn_interval"):
            learn_hybrid(make_oracle(uniform, uniform, delta=0.5), N=8)

    @pytest.mark.slow
    def test_learned_prior_is_dominated(self):
        passed = 0
        for seed in range(100):
            prior = gen_family("unit01", support_size=10, n=4, seed=seed)
            oracle = TargetedOracle(prior, OracleConfig(delta=0.1, seed=seed))
            result = learn_hybrid(oracle, N=32)
            passed += all(dominates(D, E) for D, E in zip(prior, result.learned_prior))
        assert passed >= 95


class TestSingleBuyer:
    def test_concave_search_on_line(self, make_oracle, line_curve):
        result = single_concave_search(make_oracle(line_curve), Family.REGULAR, 0.05)
        assert result.rounds == 5
        assert result.reserve == pytest.approx(0.5)
        assert result.probes <= 5 * 5 + 1
        assert posted_price_revenue(line_curve, result.reserve) >= 0.95 * 0.25
        widths = [b - a for a, b in result.intervals]
        assert widths[-1] <= 0.05 + 1e-12
        assert all(w2 < w1 for w1, w2 in zip(widths, widths[1:]))

    def test_concave_search_on_point_mass(self, make_oracle):
        result = single_concave_search(make_oracle(QuantileDistribution.point_mass(7.0)),
                                       Family.REGULAR, 0.1)
        assert result.reserve == 7.0

    def test_concave_search_family(self, make_oracle, line_curve):
        with pytest.raises(FamilyError):
            single_concave_search(make_oracle(line_curve), Family.UNIT01, 0.1)

    @pytest.mark.parametrize("eps", [0.0, 0.6, 1.0])
    def test_concave_search_rejects_empty_window(self, make_oracle, line_curve, eps):
        with pytest.raises(InvalidDistributionError):
            single_concave_search(make_oracle(line_curve), Family.REGULAR, eps)

    def test_concave_search_coarse_eps(self, make_oracle, line_curve):
        result = single_concave_search(make_oracle(line_curve), Family.MHR, 0.5)
        assert result.rounds == 0
        assert result.intervals == ((1.0 / math.e, 1.0 - 1.0 / math.e),)
        assert result.reserve == pytest.approx(0.5)

    @pytest.mark.slow
    def test_concave_search_keeps_the_argmax(self, make_oracle):
        eps = 0.05
        grid = np.linspace(eps, 1.0 - eps, 18_001)
        for seed in range(200):
            D = gen_single_curve("regular", seed=seed)
            result = single_concave_search(make_oracle(D), Family.REGULAR, eps)
            a, b = result.intervals[-1]
            revenue = grid * value_at(D, grid)
            inside = (grid >= a - 1e-12) & (grid <= b + 1e-12)
            assert revenue[inside].max() >= revenue.max() - 1e-6

    def test_single_buyer_only(self, make_oracle, uniform):
        with pytest.raises(RegimeError):
            single_grid_unit(make_oracle(uniform, uniform), 0.2)

    def test_grid_unit_on_uniform(self, make_oracle, uniform):
        result = single_grid_unit(make_oracle(uniform), 0.2)
        assert result.budget.queries == (20,)
        assert posted_price_revenue(uniform, result.reserve) == pytest.approx(0.3)

    def test_grid_unit_guarantee(self):
        for seed in range(100):
            prior = gen_family("unit01", support_size=10, seed=seed)
            result = single_grid_unit(TargetedOracle(prior, OracleConfig(seed=seed)), 0.2)
            assert posted_price_revenue(prior[0], result.reserve) >= opt_revenue(prior) - 0.1 - 1e-9
            assert result.budget.total == 20

    def test_grid_unit_with_targeting_power(self, uniform):
        oracle = TargetedOracle(ProductPrior((uniform,)), OracleConfig(delta=0.05, seed=3))
        result = single_grid_unit(oracle, 0.2)
        assert oracle.ledger.snapshot().queries == (0,)
        assert posted_price_revenue(uniform, result.reserve) >= 0.3 - 0.1 - 3 * 0.025 - 1e-9

    def test_geometric_query_count(self):
        assert geometric_probe_count(0.8, 16) == 30

    def test_grid_geometric_on_point_mass(self, make_oracle):
        D = QuantileDistribution.point_mass(16.0)
        result = single_grid_geometric(make_oracle(D), 0.8, 16.0)
        assert result.reserve == 16.0
        assert result.budget.queries == (30,)

    def test_grid_geometric_on_equal_revenue(self, make_oracle):
        k = np.arange(1, 17)
        D = QuantileDistribution.discrete(16.0 / k, np.full(16, 1.0 / 16))
        result = single_grid_geometric(make_oracle(D), 0.2, 16.0)
        assert posted_price_revenue(D, result.reserve) >= 0.8


class TestChooseParams:
    def test_unit01_query_regime(self):
        choice = choose_params("unit01", 0.1, 3, 0.0)
        assert choice.learner is LearnerKind.PINPOINT
        assert choice.log_factor == 4
        assert choice.params.N == 40

    def test_regular_rate(self):
        choice = choose_params(Family.REGULAR, 0.1, 2, 0.0)
        assert choice.rate == pytest.approx(math.sqrt(8) * 0.1 ** -1.5)

    def test_mhr_rate(self):
        choice = choose_params(Family.MHR, 0.1, 2, 0.0)
        assert choice.rate == pytest.approx(math.sqrt(math.log(20)) / 0.1)

    def test_interval_regime_rate_and_budget(self):
        choice = choose_params(Family.UNIT01, 0.1, 5, 0.2)
        assert choice.rate == pytest.approx(100.0)
        assert choice.learner is LearnerKind.INTERVAL
        assert 2 * math.sqrt(choice.params.L / choice.params.N) <= 0.1 / 4 + 1e-12

    def test_interval_budget_for_four_buyers(self):
        choice = choose_params(Family.UNIT01, 0.15, 4, 0.25)
        assert choice.params.N == 45512
        assert choice.params.L == 16.0

    def test_hybrid_regime(self):
        assert choose_params(Family.UNIT01, 0.1, 4, 0.1).learner is LearnerKind.HYBRID

    @pytest.mark.parametrize("family,learner", [
        (Family.REGULAR, LearnerKind.CONCAVE_SEARCH),
        (Family.MHR, LearnerKind.CONCAVE_SEARCH),
        (Family.UNIT01, LearnerKind.GRID_UNIT),
        (Family.ONE_TO_H, LearnerKind.GRID_GEOMETRIC),
    ])
    def test_single_buyer_learners(self, family, learner):
        assert choose_params(family, 0.2, 1, 0.0, H=16.0).learner is learner

    def test_bad_family(self):
        with pytest.raises(FamilyError):
            choose_params("bogus", 0.1, 2, 0.0)
        with pytest.raises(FamilyError):
            choose_params(Family.UNKNOWN, 0.1, 2, 0.0)
        with pytest.raises(FamilyError):
            choose_params(Family.ONE_TO_H, 0.1, 2, 0.0)

    def test_bad_eps(self):
        with pytest.raises(InvalidDistributionError):
            choose_params(Family.UNIT01, 1.5, 2, 0.0)

    def test_run_learner_dispatch(self):
        prior = gen_family("unit01", support_size=5, n=2, seed=4)
        choice = choose_params(Family.UNIT01, 0.3, 2, 0.0)
        result = run_learner(TargetedOracle(prior, OracleConfig(seed=4)), choice)
        assert result.learner is LearnerKind.PINPOINT
        learned = expected_revenue(result.rule, prior).revenue
        assert learned <= opt_revenue(prior) + 1e-9


@pytest.mark.slow
def test_pinpoint_revenue_guarantee():
    for seed in range(100):
        prior = gen_family("unit01", support_size=10, n=3, seed=seed)
        choice = choose_params(Family.UNIT01, 0.1, 3, 0.0)
        result = run_learner(TargetedOracle(prior, OracleConfig(seed=seed)), choice)
        assert expected_revenue(result.rule, prior).revenue >= opt_revenue(prior) - 0.1 - 1e-9


@pytest.mark.slow
def test_interval_revenue_guarantee():
    passed = 0
    for seed in range(100):
        prior = gen_family("unit01", support_size=10, n=4, seed=seed)
        choice = choose_params(Family.UNIT01, 0.15, 4, 0.25)
        result = run_learner(TargetedOracle(prior, OracleConfig(delta=0.25, seed=seed)), choice)
        passed += expected_revenue(result.rule, prior).revenue >= opt_revenue(prior) - 0.15 - 1e-9
    assert passed >= 90
