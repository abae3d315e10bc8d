"""
Myerson's optimal auction for product priors of point-mass distributions.

Bids are rounded down to the buyer's support before the ironed virtual value
lookup. The item goes to the highest nonnegative ironed virtual value
(lowest index on ties) and the winner pays the smallest support value at which
it would still win.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from app.core.config import settings
from app.core.exceptions import EnumerationLimitError, InvalidDistributionError
from app.services.quantile_dist import (
    ProductPrior,
    QuantileDistribution,
    ironed_virtuals,
    quantile_of,
    require_discrete,
    sample_values,
)

logger = logging.getLogger(__name__)


class TieBreak(str, Enum):
    LOWEST_INDEX = "lowest_index"


class RevenueMode(str, Enum):
    EXACT = "exact"
    MONTE_CARLO = "monte_carlo"


class Outcome(NamedTuple):
    winner: Optional[int]
    payment: float


class RevenueEstimate(NamedTuple):
    revenue: float
    stderr: Optional[float] = None


@dataclass(frozen=True, eq=False)
class BuyerTable:
    """Ascending support of one buyer and the ironed virtual value of each point."""
    values: np.ndarray
    phis: np.ndarray

    def virtual(self, bids: np.ndarray) -> np.ndarray:
        """Ironed virtual value of rounded-down bids; -inf below the support."""
        idx = np.searchsorted(self.values, bids, side="right") - 1
        out = np.full(np.shape(bids), -np.inf)
        ok = idx >= 0
        out[ok] = self.phis[idx[ok]]
        return out

    @property
    def reserve(self) -> Optional[float]:
        """Smallest support value with a nonnegative ironed virtual value."""
        eligible = np.flatnonzero(self.phis >= 0)
        return float(self.values[eligible[0]]) if eligible.size else None


@dataclass(frozen=True, eq=False)
class AuctionRule:
    tables: Tuple[BuyerTable, ...]
    tie_break: TieBreak = TieBreak.LOWEST_INDEX

    @property
    def n(self) -> int:
        return len(self.tables)

    def reserves(self) -> List[Optional[float]]:
        return [t.reserve for t in self.tables]


def build_auction(prior: ProductPrior) -> AuctionRule:
    """Myerson's optimal auction for a prior of Discrete buyers."""
    tables = []
    for D in prior:
        require_discrete(D, "build_auction")
        phis = ironed_virtuals(D)
        tables.append(BuyerTable(D.values[::-1].copy(), phis[::-1].copy()))
    rule = AuctionRule(tuple(tables))
    logger.debug("built auction for %d buyers, reserves %s", rule.n, rule.reserves())
    return rule


def run_auctions(rule: AuctionRule, bids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized auction over a (profiles, buyers) bid matrix.

    Returns:
        winners (-1 when the item is not sold) and payments
    """
    bids = np.asarray(bids, dtype=np.float64)
    B, n = bids.shape
    phi = np.column_stack([t.virtual(bids[:, i]) for i, t in enumerate(rule.tables)])
    masked = np.where(phi >= 0, phi, -np.inf)
    winner = np.argmax(masked, axis=1)
    rows = np.arange(B)
    sold = np.isfinite(masked[rows, winner])

    pad = np.full((B, 1), -np.inf)
    # best rival below / above each index
    lower = np.maximum.accumulate(np.hstack((pad, phi[:, :-1])), axis=1)
    upper = np.maximum.accumulate(np.hstack((phi[:, 1:], pad))[:, ::-1], axis=1)[:, ::-1]
    lo = lower[rows, winner]
    hi = np.maximum(upper[rows, winner], 0.0)

    payments = np.zeros(B)
    for i, table in enumerate(rule.tables):
        sel = sold & (winner == i)
        if not np.any(sel):
            continue
        beat_lower = np.searchsorted(table.phis, lo[sel], side="right")
        match_upper = np.searchsorted(table.phis, hi[sel], side="left")
        idx = np.minimum(np.maximum(beat_lower, match_upper), table.values.size - 1)
        payments[sel] = table.values[idx]
    return np.where(sold, winner, -1), payments


def run_auction(rule: AuctionRule, bids: Sequence[float]) -> Outcome:
    arr = np.asarray(bids, dtype=np.float64).ravel()
    if arr.size != rule.n:
        raise InvalidDistributionError(f"expected {rule.n} bids, got {arr.size}")
    if np.any(arr < 0):
        raise InvalidDistributionError("bids must be nonnegative")
    winners, payments = run_auctions(rule, arr[None, :])
    w = int(winners[0])
    return Outcome(None, 0.0) if w < 0 else Outcome(w, float(payments[0]))


def utility(rule: AuctionRule, bids: Sequence[float], value: float, buyer: int) -> float:
    """Quasi-linear utility of ``buyer`` with true value ``value`` under ``bids``."""
    outcome = run_auction(rule, bids)
    return value - outcome.payment if outcome.winner == buyer else 0.0


def _profiles(prior: ProductPrior) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Chunks of (bid matrix, profile probability) over the full product of supports."""
    for D in prior:
        require_discrete(D, "exact revenue")
    sizes = [D.size for D in prior]
    total = math.prod(sizes)
    cap = settings.ENUMERATION_CAP
    if total > cap:
        raise EnumerationLimitError(
            f"{total} value profiles exceed the enumeration cap of {cap}; use MonteCarlo")
    for start in range(0, total, settings.MC_CHUNK):
        flat = np.arange(start, min(start + settings.MC_CHUNK, total))
        idx = np.unravel_index(flat, sizes)
        bids = np.column_stack([D.values[k] for D, k in zip(prior, idx)])
        probs = np.prod(np.column_stack([D.masses[k] for D, k in zip(prior, idx)]), axis=1)
        yield bids, probs


def _check_shape(rule: AuctionRule, prior: ProductPrior) -> None:
    if rule.n != prior.n:
        raise InvalidDistributionError(f"rule has {rule.n} buyers, prior has {prior.n}")


def expected_revenue(rule: AuctionRule, prior: ProductPrior,
                     mode: RevenueMode = RevenueMode.EXACT,
                     trials: Optional[int] = None,
                     seed: Optional[int] = None) -> RevenueEstimate:
    """Expected revenue of ``rule`` when values are drawn from ``prior``."""
    _check_shape(rule, prior)
    if RevenueMode(mode) is RevenueMode.EXACT:
        revenue = 0.0
        for bids, probs in _profiles(prior):
            revenue += float(probs @ run_auctions(rule, bids)[1])
        return RevenueEstimate(revenue)

    trials = int(trials or settings.MC_TRIALS)
    seed = settings.DEFAULT_SEED if seed is None else int(seed)
    if trials < 1 or seed < 0:
        raise InvalidDistributionError("Monte Carlo needs trials >= 1 and a nonnegative seed")
    chunk = settings.MC_CHUNK
    payments = []
    for c, start in enumerate(range(0, trials, chunk)):
        size = min(chunk, trials - start)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, c])))
        bids = np.column_stack([sample_values(D, rng, size) for D in prior])
        payments.append(run_auctions(rule, bids)[1])
    pay = np.concatenate(payments)
    stderr = float(pay.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return RevenueEstimate(float(pay.mean()), stderr)


def virtual_surplus(rule: AuctionRule, prior: ProductPrior) -> float:
    """Exact expected ironed virtual value of the winner."""
    _check_shape(rule, prior)
    total = 0.0
    for bids, probs in _profiles(prior):
        winners, _ = run_auctions(rule, bids)
        sold = winners >= 0
        phi = np.zeros(bids.shape[0])
        for i, table in enumerate(rule.tables):
            sel = winners == i
            if np.any(sel):
                phi[sel] = table.virtual(bids[sel, i])
        total += float(probs[sold] @ phi[sold])
    return total


def opt_revenue(prior: ProductPrior) -> float:
    """Revenue of the optimal auction on its own prior."""
    return expected_revenue(build_auction(prior), prior).revenue


def posted_price_revenue(D: QuantileDistribution, price: float) -> float:
    """Revenue of posting ``price`` to a single buyer."""
    return float(price) * quantile_of(D, float(price))
