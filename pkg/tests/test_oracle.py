import numpy as np
import pytest

from app.core.exceptions import (
    InvalidDistributionError,
    QueryUnavailableError,
    TargetingPowerError,
)
from app.services.generators import gen_family, uniform_grid
from app.services.oracle import OracleConfig, OracleMode, TargetedOracle
from app.services.quantile_dist import ProductPrior, QuantileDistribution


PRIORS = {
    "uniform": lambda: uniform_grid(10),
    "regular": lambda: gen_family("regular", support_size=6, seed=3)[0],
    "point_mass_heavy": lambda: QuantileDistribution.discrete([3.0, 1.0, 0.5], [0.8, 0.15, 0.05]),
}


def interval_frequency(D, value, a, b):
    """Probability that a draw conditioned on quantile in [a, b] equals value."""
    cum = np.concatenate(([0.0], D.cum))
    k = int(np.flatnonzero(D.values == value)[0])
    lo, hi = cum[k], cum[k + 1]
    return max(0.0, min(hi, b) - max(lo, a)) / (b - a)


class TestTargetedSample:
    @pytest.mark.parametrize("prior", sorted(PRIORS))
    @pytest.mark.parametrize("interval", [(0.0, 1.0), (0.0, 0.3), (0.25, 0.75), (0.7, 1.0)])
    def test_conditional_law(self, make_oracle, prior, interval):
        D = PRIORS[prior]()
        oracle = make_oracle(D, seed=5)
        a, b = interval
        draws = oracle.targeted_samples(0, interval, 20_000)
        assert set(np.unique(draws).tolist()) <= set(D.values.tolist())
        for v in D.values:
            expected = interval_frequency(D, v, a, b)
            se = np.sqrt(max(expected * (1 - expected), 1e-12) / draws.size)
            assert np.mean(draws == v) == pytest.approx(expected, abs=4.5 * se + 1e-9)

    def test_values_stay_inside_the_interval(self, make_oracle, uniform):
        oracle = make_oracle(uniform, seed=1)
        draws = oracle.targeted_samples(0, (0.3, 0.5), 2_000)
        assert set(np.round(np.unique(draws), 10)) <= {0.8, 0.7, 0.6}

    def test_same_seed_same_answers(self, make_oracle, uniform, two_point):
        first = make_oracle(uniform, two_point, seed=11)
        second = make_oracle(uniform, two_point, seed=11)
        for buyer in (0, 1):
            np.testing.assert_array_equal(first.targeted_samples(buyer, (0.0, 1.0), 50),
                                          second.targeted_samples(buyer, (0.0, 1.0), 50))

    def test_buyer_streams_are_independent(self, make_oracle, uniform):
        first = make_oracle(uniform, uniform, seed=11)
        second = make_oracle(uniform, uniform, seed=11)
        second.targeted_samples(1, (0.0, 1.0), 100)
        np.testing.assert_array_equal(first.targeted_samples(0, (0.0, 1.0), 30),
                                      second.targeted_samples(0, (0.0, 1.0), 30))

    def test_interval_narrower_than_delta(self, make_oracle, uniform):
        oracle = make_oracle(uniform, delta=0.25)
        with pytest.raises(TargetingPowerError, match="narrower than targeting power"):
            oracle.targeted_sample(0, (0.0, 0.1))
        assert oracle.targeted_sample(0, (0.0, 0.25)) in set(uniform.values.tolist())

    @pytest.mark.parametrize("interval", [(0.5, 0.5), (0.6, 0.4), (-0.1, 0.5), (0.5, 1.2)])
    def test_malformed_interval(self, make_oracle, uniform, interval):
        with pytest.raises(TargetingPowerError):
            make_oracle(uniform).targeted_sample(0, interval)

    def test_unknown_buyer(self, make_oracle, uniform):
        with pytest.raises(InvalidDistributionError):
            make_oracle(uniform).targeted_sample(3, (0.0, 1.0))


class TestTargetedQuery:
    def test_exact_values(self, make_oracle, uniform):
        oracle = make_oracle(uniform)
        assert oracle.targeted_query(0, 0.5) == pytest.approx(0.6)
        assert oracle.targeted_query(0, 1.0) == pytest.approx(0.1)
        assert oracle.targeted_query(0, 0.05) == pytest.approx(1.0)

    def test_unavailable_with_targeting_power(self, make_oracle, uniform):
        with pytest.raises(QueryUnavailableError, match="queries unavailable"):
            make_oracle(uniform, delta=0.1).targeted_query(0, 0.5)

    def test_allow_query_overrides(self, make_oracle, uniform):
        assert make_oracle(uniform, delta=0.1, allow_query=True).targeted_query(0, 1.0) == pytest.approx(0.1)

    def test_quantile_range(self, make_oracle, uniform):
        with pytest.raises(InvalidDistributionError):
            make_oracle(uniform).targeted_query(0, 0.0)


class TestBudget:
    def test_ledger_counts_per_buyer(self, make_oracle, uniform, two_point):
        oracle = make_oracle(uniform, two_point)
        oracle.targeted_samples(0, (0.0, 1.0), 7)
        oracle.targeted_query(1, 0.5)
        oracle.targeted_queries(1, np.array([0.2, 0.4]))
        budget = oracle.ledger.snapshot()
        assert budget.samples == (7, 0)
        assert budget.queries == (0, 3)
        assert budget.total == 10
        assert budget.max_per_buyer == 7
        assert budget.as_dict()["total"] == 10

    def test_failed_calls_cost_nothing(self, make_oracle, uniform):
        oracle = make_oracle(uniform, delta=0.5)
        with pytest.raises(TargetingPowerError):
            oracle.targeted_sample(0, (0.0, 0.2))
        assert oracle.ledger.snapshot().total == 0


class TestDataHolder:
    def test_answers_come_from_the_dataset(self, uniform):
        prior = ProductPrior((uniform,))
        oracle = TargetedOracle(prior, OracleConfig(mode=OracleMode.DATA_HOLDER, holder_m=50, seed=2))
        dataset = oracle.answer_distribution(0)
        assert dataset.masses.min() >= 1.0 / 50 - 1e-12
        draws = oracle.targeted_samples(0, (0.0, 1.0), 500)
        assert set(np.unique(draws)) <= set(dataset.values.tolist())

    def test_single_point_dataset(self):
        prior = ProductPrior((QuantileDistribution.point_mass(3.0),))
        oracle = TargetedOracle(prior, OracleConfig(mode="data_holder", holder_m=1))
        assert oracle.targeted_query(0, 0.3) == 3.0

    def test_dataset_is_seeded(self, uniform):
        prior = ProductPrior((uniform,))
        make = lambda: TargetedOracle(prior, OracleConfig(mode="data_holder", holder_m=30, seed=4))  # noqa: E731
        assert make().answer_distribution(0).approx_equal(make().answer_distribution(0))


def test_config_validation():
    with pytest.raises(TargetingPowerError):
        OracleConfig(delta=1.5)
    with pytest.raises(InvalidDistributionError):
        OracleConfig(mode="data_holder", holder_m=0)
