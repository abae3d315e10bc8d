"""
Targeted-sampling access to a product prior.

An oracle answers two kinds of calls for a buyer i:

* ``targeted_sample(i, [a, b])`` draws a value conditioned on its quantile
  lying in [a, b]; the interval must be at least as wide as the targeting
  power ``delta``.
* ``targeted_query(i, q)`` returns the value at quantile q exactly; only
  available when ``delta == 0`` or ``allow_query`` is set.

In data-holder mode both calls are answered from an empirical dataset drawn
once per buyer from the true prior. Every buyer owns its own counter-based
random stream, so results depend only on (seed, buyer, per-buyer call order).
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.core.config import settings
from app.core.exceptions import (
    InvalidDistributionError,
    QueryUnavailableError,
    TargetingPowerError,
)
from app.services.quantile_dist import (
    ProductPrior,
    QuantileDistribution,
    from_samples,
    sample_values,
    value_at,
)

logger = logging.getLogger(__name__)

# smallest quantile handed to value_at when an interval starts at 0
Q_FLOOR = 1e-15
# substream tag separating holder datasets from answer streams
_HOLDER_TAG = 7919


class OracleMode(str, Enum):
    EXACT = "exact"
    DATA_HOLDER = "data_holder"


@dataclass(frozen=True)
class OracleConfig:
    delta: float = 0.0
    mode: OracleMode = OracleMode.EXACT
    holder_m: int = 2000
    seed: int = 0
    allow_query: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", OracleMode(self.mode))
        if not 0.0 <= self.delta <= 1.0:
            raise TargetingPowerError("targeting power must lie in [0, 1]")
        if self.mode is OracleMode.DATA_HOLDER and self.holder_m < 1:
            raise InvalidDistributionError("data holder needs at least one sample per buyer")
        if self.seed < 0:
            raise InvalidDistributionError("seed must be nonnegative")


@dataclass(frozen=True)
class BudgetSnapshot:
    samples: Tuple[int, ...]
    queries: Tuple[int, ...]

    @property
    def per_buyer(self) -> Tuple[int, ...]:
        return tuple(s + q for s, q in zip(self.samples, self.queries))

    @property
    def total(self) -> int:
        return sum(self.per_buyer)

    @property
    def max_per_buyer(self) -> int:
        return max(self.per_buyer) if self.per_buyer else 0

    def as_dict(self) -> Dict[str, object]:
        return {
            "samples": list(self.samples),
            "queries": list(self.queries),
            "total": self.total,
            "max_per_buyer": self.max_per_buyer,
        }


class BudgetLedger:
    """Per-buyer counters of samples and queries; monotone, never reset."""

    def __init__(self, n: int):
        self._samples: List[int] = [0] * n
        self._queries: List[int] = [0] * n
        self._lock = threading.Lock()

    def add_samples(self, buyer: int, count: int = 1) -> None:
        with self._lock:
            self._samples[buyer] += count

    def add_queries(self, buyer: int, count: int = 1) -> None:
        with self._lock:
            self._queries[buyer] += count

    def snapshot(self) -> BudgetSnapshot:
        with self._lock:
            return BudgetSnapshot(tuple(self._samples), tuple(self._queries))


class TargetedOracle:
    """Targeted sampling oracle over a product prior."""

    def __init__(self, prior: ProductPrior, config: Optional[OracleConfig] = None):
        self.prior = prior
        self.config = config or OracleConfig(seed=settings.DEFAULT_SEED)
        self.ledger = BudgetLedger(prior.n)
        self._locks = [threading.Lock() for _ in range(prior.n)]
        self._streams = [self._generator(i) for i in range(prior.n)]
        self._answers: Tuple[QuantileDistribution, ...] = tuple(prior)
        if self.config.mode is OracleMode.DATA_HOLDER:
            self._answers = tuple(self._holder_dataset(i) for i in range(prior.n))
            logger.info("data holder drew %d samples per buyer for %d buyers",
                        self.config.holder_m, prior.n)

    def _generator(self, buyer: int, *tags: int) -> np.random.Generator:
        seq = np.random.SeedSequence([self.config.seed, buyer, *tags])
        return np.random.Generator(np.random.Philox(seq))

    def _holder_dataset(self, buyer: int) -> QuantileDistribution:
        rng = self._generator(buyer, _HOLDER_TAG)
        return from_samples(sample_values(self.prior[buyer], rng, self.config.holder_m))

    @property
    def n(self) -> int:
        return self.prior.n

    @property
    def delta(self) -> float:
        return self.config.delta

    @property
    def can_query(self) -> bool:
        return self.config.delta == 0.0 or self.config.allow_query

    def answer_distribution(self, buyer: int) -> QuantileDistribution:
        """The distribution calls are answered from (true prior or holder dataset)."""
        return self._answers[buyer]

    def _check_buyer(self, buyer: int) -> None:
        if not 0 <= buyer < self.n:
            raise InvalidDistributionError(f"buyer index {buyer} out of range for {self.n} buyers")

    def _check_interval(self, interval: Tuple[float, float]) -> Tuple[float, float]:
        a, b = float(interval[0]), float(interval[1])
        if not (0.0 <= a < b <= 1.0):
            raise TargetingPowerError(f"interval [{a}, {b}] must satisfy 0 <= a < b <= 1")
        if b - a < self.config.delta - settings.TOL:
            raise TargetingPowerError(
                f"interval narrower than targeting power: width {b - a} < delta {self.config.delta}")
        return a, b

    def targeted_samples(self, buyer: int, interval: Tuple[float, float], count: int) -> np.ndarray:
        """``count`` values conditioned on quantile in ``interval``."""
        self._check_buyer(buyer)
        a, b = self._check_interval(interval)
        if count < 1:
            return np.empty(0)
        with self._locks[buyer]:
            q = self._streams[buyer].random(count) * (b - a) + a
            q = np.maximum(q, Q_FLOOR)
            values = np.atleast_1d(value_at(self._answers[buyer], q))
            self.ledger.add_samples(buyer, count)
        return values

    def targeted_sample(self, buyer: int, interval: Tuple[float, float]) -> float:
        return float(self.targeted_samples(buyer, interval, 1)[0])

    def targeted_queries(self, buyer: int, qs: np.ndarray) -> np.ndarray:
        """Exact values at each quantile of ``qs``."""
        if not self.can_query:
            raise QueryUnavailableError(
                f"queries unavailable at this targeting power (delta={self.config.delta})")
        self._check_buyer(buyer)
        qs = np.atleast_1d(np.asarray(qs, dtype=np.float64))
        if np.any(qs <= 0.0) or np.any(qs > 1.0):
            raise InvalidDistributionError("quantile must lie in (0, 1]")
        values = np.atleast_1d(value_at(self._answers[buyer], qs))
        self.ledger.add_queries(buyer, int(qs.size))
        return values

    def targeted_query(self, buyer: int, q: float) -> float:
        """Exact value at quantile ``q``."""
        return float(self.targeted_queries(buyer, np.array([q]))[0])
