import numpy as np
import pytest

from app.services.generators import uniform_grid
from app.services.oracle import OracleConfig, TargetedOracle
from app.services.quantile_dist import Family, ProductPrior, QuantileDistribution

TOL = 1e-12


@pytest.fixture
def uniform():
    """Values 0.1, 0.2, ..., 1.0 with mass 0.1 each."""
    return uniform_grid(10)


@pytest.fixture
def three_point():
    """Revenue curve (0,0), (0.25,1.25), (0.3,1.2), (1,1); the middle point gets ironed."""
    return QuantileDistribution.discrete([5.0, 4.0, 1.0], [0.25, 0.05, 0.7])


@pytest.fixture
def two_point():
    return QuantileDistribution.discrete([2.0, 1.0], [0.5, 0.5])


@pytest.fixture
def line_curve():
    """v(q) = 1 - q, so R(q) = q (1 - q) peaks at 1/2."""
    return QuantileDistribution.curve([0.0, 1.0], [1.0, 0.0])


@pytest.fixture
def make_oracle():
    def factory(*buyers, delta=0.0, seed=0, family=Family.UNKNOWN, H=None, **kwargs):
        prior = ProductPrior(tuple(buyers), family, H)
        return TargetedOracle(prior, OracleConfig(delta=delta, seed=seed, **kwargs))
    return factory


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(1234)))
