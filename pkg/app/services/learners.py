"""
Learning near-optimal auctions from targeted samples and queries.

Multi-buyer learners build a *dominated empirical* prior for every buyer (a
learned distribution shaded down in quantile space so the true prior
stochastically dominates it) and return Myerson's auction for it:

* ``learn_pinpoint``  exact queries at the pinpoint grid (targeting power 0)
* ``learn_interval``  doubling-interval sampling, for delta >= 1/n
* ``learn_hybrid``    width-delta interval sampling then single samples, for 0 < delta < 1/n

Single-buyer learners return a posted price: ``single_concave_search`` for
regular and MHR priors, ``single_grid_unit`` for [0, 1] values and
``single_grid_geometric`` for [1, H] values. ``choose_params`` picks the
budget scale N and the learner for a (family, eps, n, delta) cell.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.config import settings
from app.core.exceptions import (
    FamilyError,
    InvalidDistributionError,
    QueryUnavailableError,
    RegimeError,
    TargetingPowerError,
)
from app.services.myerson import AuctionRule, build_auction
from app.services.oracle import BudgetSnapshot, TargetedOracle
from app.services.quantile_dist import (
    Family,
    ProductPrior,
    QuantileDistribution,
    remap_quantiles,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[float, Sequence[float], np.ndarray]


class LearnerKind(str, Enum):
    PINPOINT = "pinpoint"
    INTERVAL = "interval"
    HYBRID = "hybrid"
    CONCAVE_SEARCH = "concave_search"
    GRID_UNIT = "grid_unit"
    GRID_GEOMETRIC = "grid_geometric"


@dataclass(frozen=True)
class ShadeParams:
    """Budget scale N, buyers n, log factor L, targeting power delta, constant c_log."""
    N: int
    n: int
    L: float = 1.0
    delta: float = 0.0
    c_log: float = 1.0

    def __post_init__(self):
        if self.N < 2:
            raise InvalidDistributionError("N must be at least 2")
        if self.n < 1:
            raise InvalidDistributionError("n must be at least 1")
        if self.L <= 0:
            raise InvalidDistributionError("L must be positive")
        if not 0.0 <= self.delta <= 1.0:
            raise TargetingPowerError("delta must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class LearnResult:
    learned_prior: ProductPrior
    rule: AuctionRule
    budget: BudgetSnapshot
    params: ShadeParams
    learner: LearnerKind


@dataclass(frozen=True, eq=False)
class SingleBuyerResult:
    reserve: float
    quantile: float
    probes: int
    budget: BudgetSnapshot
    learner: LearnerKind
    rounds: int = 0
    intervals: Tuple[Tuple[float, float], ...] = ()


@dataclass(frozen=True)
class ParamChoice:
    params: ShadeParams
    learner: LearnerKind
    family: Family
    eps: float
    rate: float
    log_factor: int
    n_per_point: int
    H: Optional[float] = None


def default_L(N: int, n: int) -> float:
    if settings.L_OVERRIDE is not None:
        return float(settings.L_OVERRIDE)
    return float(math.ceil(math.log(2.0 * N * n * 20)))


def _scalar(x: np.ndarray):
    return x[()] if isinstance(x, np.ndarray) else x


# -- shading functions ----------------------------------------------------------

def shade_f(q: ArrayLike, params: ShadeParams):
    """Estimation-error envelope of the query regime; symmetric about 1/2."""
    q = np.asarray(q, dtype=np.float64)
    x = np.maximum(np.minimum(q, 1.0 - q), 0.0)
    N, n = params.N, params.n
    f = np.where(x <= 1.0 / n, np.sqrt(x / n) / N, x / N) + 1.0 / (N * N * n)
    return _scalar(f)


def shade_df(q: ArrayLike, params: ShadeParams):
    """d_f(q) = max{0, q - 2 f(q)}."""
    q = np.asarray(q, dtype=np.float64)
    return _scalar(np.maximum(0.0, q - 2.0 * shade_f(q, params)))


def interval_shade_f(q: ArrayLike, params: ShadeParams):
    """Envelope of the interval regime: sqrt-shaped up to delta, linear up to 1/2."""
    q = np.asarray(q, dtype=np.float64)
    x = np.maximum(np.minimum(q, 1.0 - q), 0.0)
    N, L, delta = params.N, params.L, params.delta
    f = np.where(x <= delta, 2.0 * np.sqrt(x * L * delta / N), 2.0 * math.sqrt(L / N) * x)
    return _scalar(f)


def interval_shade_sf(q: ArrayLike, params: ShadeParams):
    q = np.asarray(q, dtype=np.float64)
    slack = 4.0 * params.L * params.delta / params.N
    return _scalar(np.maximum(0.0, q - interval_shade_f(q, params) - slack))


def interval_shade_df(q: ArrayLike, params: ShadeParams):
    q = np.asarray(q, dtype=np.float64)
    slack = 5.0 * params.L * params.delta / params.N
    return _scalar(np.maximum(0.0, q - 2.0 * interval_shade_f(q, params) - slack))


def hybrid_shade_sf(q: ArrayLike, params: ShadeParams):
    """s_f(q) = max{0, q - min{f(q), delta}} with the query-regime f."""
    q = np.asarray(q, dtype=np.float64)
    return _scalar(np.maximum(0.0, q - np.minimum(shade_f(q, params), params.delta)))


# -- pinpoint learner ------------------------------------------------------------

def pinpoints(params: ShadeParams) -> np.ndarray:
    """q_0 = 1, q_{j+1} = q_j - 2 f(q_j) while positive."""
    points = [1.0]
    while True:
        nxt = float(shade_df(points[-1], params))
        if nxt <= 0.0:
            break
        points.append(nxt)
    return np.asarray(points)


def pinpoint_bound(params: ShadeParams, c_bound: Optional[float] = None) -> float:
    c = settings.C_BOUND if c_bound is None else c_bound
    return c * params.N * math.log(params.N ** 2 * params.n)


def learn_pinpoint(oracle: TargetedOracle, N: int) -> LearnResult:
    """Query every buyer at the pinpoints and shade the answers into a dominated prior."""
    if not oracle.can_query:
        raise QueryUnavailableError("learn_pinpoint needs targeted queries (delta = 0)")
    params = ShadeParams(N=N, n=oracle.n)
    qs = pinpoints(params)
    masses = qs - np.append(qs[1:], 0.0)
    buyers = []
    for i in range(oracle.n):
        answers = oracle.targeted_queries(i, qs[1:]) if qs.size > 1 else np.empty(0)
        buyers.append(QuantileDistribution.discrete(np.concatenate(([0.0], answers)), masses))
    logger.info("pinpoint learner: N=%d n=%d, %d queries per buyer", N, oracle.n, qs.size - 1)
    return _result(oracle, buyers, params, LearnerKind.PINPOINT)


def _result(oracle: TargetedOracle, buyers: List[QuantileDistribution],
            params: ShadeParams, kind: LearnerKind) -> LearnResult:
    learned = oracle.prior.with_buyers(buyers)
    return LearnResult(learned, build_auction(learned), oracle.ledger.snapshot(), params, kind)


def _weighted(values: List[np.ndarray], weights: List[np.ndarray]) -> QuantileDistribution:
    return QuantileDistribution.discrete(np.concatenate(values), np.concatenate(weights))


# -- interval learner (delta >= 1/n) ------------------------------------------------

def doubling_intervals(delta: float) -> List[Tuple[float, float]]:
    """[0, d], [d, 2d], [2d, 4d], ... up to 1/2, mirrored onto the top half."""
    if delta <= 0:
        raise RegimeError("doubling intervals need positive targeting power")
    if delta > 0.5:
        return [(0.0, 1.0)]
    pts = [0.0]
    x = delta
    while x < 0.5 - settings.TOL:
        pts.append(x)
        x *= 2.0
    pts.append(0.5)
    if len(pts) > 2 and pts[-1] - pts[-2] < delta - settings.TOL:
        del pts[-2]
    bottom = list(zip(pts[:-1], pts[1:]))
    top = [(1.0 - b, 1.0 - a) for a, b in reversed(bottom)]
    return bottom + top


def learn_interval(oracle: TargetedOracle, N: int, delta: Optional[float] = None,
                   L: Optional[float] = None) -> LearnResult:
    """N samples per doubling interval, aggregated and shaded by s_f."""
    n = oracle.n
    delta = oracle.delta if delta is None else float(delta)
    if delta < oracle.delta - settings.TOL:
        raise TargetingPowerError("learner targeting power below the oracle's")
    if delta < 1.0 / n - settings.TOL and delta <= 0.5:
        raise RegimeError(f"use learn_hybrid: delta={delta} is below 1/n={1.0 / n}")
    params = ShadeParams(N=N, n=n, L=default_L(N, n) if L is None else L, delta=delta)
    intervals = doubling_intervals(delta)
    buyers = []
    for i in range(n):
        values, weights = [], []
        for a, b in intervals:
            values.append(oracle.targeted_samples(i, (a, b), N))
            weights.append(np.full(N, (b - a) / N))
        empirical = _weighted(values, weights)
        buyers.append(remap_quantiles(empirical, lambda c: interval_shade_sf(c, params)))
    logger.info("interval learner: N=%d n=%d delta=%g L=%g, %d intervals per buyer",
                N, n, delta, params.L, len(intervals))
    return _result(oracle, buyers, params, LearnerKind.INTERVAL)


# -- hybrid learner (0 < delta < 1/n) ------------------------------------------------

def hybrid_schedule(params: ShadeParams) -> List[int]:
    """Sample counts N_j of the width-delta phase; its length J fixes a_J = J * delta."""
    N, n, delta = params.N, params.n, params.delta
    r = 1.0 / (4.0 * N * N * n)
    scale = params.c_log * params.L
    counts = []
    j = 1
    while True:
        a_j = j * delta
        if j == 1:
            base = delta / r
        elif a_j <= 1.0 / n:
            base = (delta / r) * (math.sqrt(j) - math.sqrt(j - 1)) ** 2 + math.sqrt(delta / (r * (j - 1)))
        else:
            base = N * N / (j * (j - 1)) + 2.0 * N / (j - 1)
        counts.append(max(1, math.ceil(scale * base)))
        if (a_j >= 0.5 - settings.TOL or (j + 1) * delta > 0.5 + settings.TOL
                or shade_f(a_j, params) >= delta):
            return counts
        j += 1


def learn_hybrid(oracle: TargetedOracle, N: int, delta: Optional[float] = None,
                 L: Optional[float] = None, c_log: Optional[float] = None) -> LearnResult:
    """Width-delta interval sampling on both tails, single samples with step f in the middle."""
    n = oracle.n
    delta = oracle.delta if delta is None else float(delta)
    if delta <= 0.0:
        raise RegimeError("use learn_pinpoint: delta is zero")
    if delta >= 1.0 / n - settings.TOL or delta > 0.5:
        raise RegimeError(f"use learn_interval: delta={delta} is at least 1/n={1.0 / n}")
    if delta < oracle.delta - settings.TOL:
        raise TargetingPowerError("learner targeting power below the oracle's")
    params = ShadeParams(N=N, n=n, L=default_L(N, n) if L is None else L, delta=delta,
                         c_log=settings.C_LOG if c_log is None else c_log)
    counts = hybrid_schedule(params)
    a_J = len(counts) * delta
    width = 1.0 - 2.0 * a_J
    sweep = width > settings.TOL and shade_f(a_J, params) >= delta

    buyers = []
    for i in range(n):
        values, weights = [], []
        for j, count in enumerate(counts, start=1):
            lo, hi = (j - 1) * delta, j * delta
            for a, b in ((lo, hi), (1.0 - hi, 1.0 - lo)):
                values.append(oracle.targeted_samples(i, (a, b), count))
                weights.append(np.full(count, delta / count))
        if sweep:
            q = 1.0 - a_J
            while q > a_J + settings.TOL:
                nxt = max(q - float(shade_f(q, params)), a_J)
                values.append(oracle.targeted_samples(i, (q - delta, q), 1))
                weights.append(np.array([q - nxt]))
                q = nxt
        elif width > settings.TOL:
            count = counts[-1]
            values.append(oracle.targeted_samples(i, (a_J, a_J + max(width, delta)), count))
            weights.append(np.full(count, width / count))
        empirical = _weighted(values, weights)
        buyers.append(remap_quantiles(empirical, lambda c: hybrid_shade_sf(c, params)))
    logger.info("hybrid learner: N=%d n=%d delta=%g, J=%d width-delta intervals, sweep=%s",
                N, n, delta, len(counts), sweep)
    return _result(oracle, buyers, params, LearnerKind.HYBRID)


# -- single-buyer learners ---------------------------------------------------------

def _require_single(oracle: TargetedOracle) -> None:
    if oracle.n != 1:
        raise RegimeError(f"single-buyer learner needs exactly one buyer, got {oracle.n}")


def _window(q: float, width: float) -> Tuple[float, float]:
    """Interval of the given width around q, shifted to fit inside [0, 1]."""
    if width >= 1.0:
        return 0.0, 1.0
    a, b = q - width / 2.0, q + width / 2.0
    if a < 0.0:
        a, b = 0.0, width
    elif b > 1.0:
        a, b = 1.0 - width, 1.0
    return max(a, 0.0), min(b, 1.0)


def _probe(oracle: TargetedOracle, q: float, half_width: float, count: int = 1) -> float:
    """Exact query when half_width is zero, else the median of targeted samples."""
    if half_width == 0.0 and oracle.can_query:
        return oracle.targeted_query(0, q)
    window = _window(q, max(2.0 * half_width, oracle.delta))
    return float(np.median(oracle.targeted_samples(0, window, max(1, count))))


def single_concave_search(oracle: TargetedOracle, family: Family, eps: float,
                          n_per_point: int = 1) -> SingleBuyerResult:
    """Shrinking five-point search for the revenue-maximizing quantile.

    The search starts on [q_t, 1 - q_t] with q_t = eps for regular priors and
    1/e for MHR priors. Raises InvalidDistributionError when eps is outside
    (0, 1) or the starting window is empty (regular priors with eps > 1/2).
    """
    _require_single(oracle)
    family = Family(family)
    if family is Family.REGULAR:
        q_t = eps
    elif family is Family.MHR:
        q_t = 1.0 / math.e
    else:
        raise FamilyError(f"concave search covers regular and mhr priors, not {family.value}")
    if not 0.0 < eps < 1.0:
        raise InvalidDistributionError(f"eps must lie in (0, 1), got {eps}")
    if q_t > 0.5:
        raise InvalidDistributionError(
            f"empty search window [{q_t:g}, {1.0 - q_t:g}]: eps={eps} exceeds 1/2")
    half_width = 0.0 if oracle.can_query else oracle.delta / 2.0
    memo: Dict[float, float] = {}

    def estimate(z: float) -> float:
        key = round(z, 12)
        if key not in memo:
            memo[key] = _probe(oracle, z, half_width, n_per_point)
        return memo[key]

    a, b = q_t, 1.0 - q_t
    intervals = [(a, b)]
    rounds = 0
    while b - a > eps:
        h = (b - a) / 4.0
        zs = [a + k * h for k in range(5)]
        z = zs[int(np.argmax([zk * estimate(zk) for zk in zs]))]
        a, b = max(a, z - h), min(b, z + h)
        intervals.append((a, b))
        rounds += 1
    z_final = min(max(0.5, a), b)
    reserve = estimate(z_final)
    logger.info("concave search: %d rounds, %d probes, reserve %.6g", rounds, len(memo), reserve)
    return SingleBuyerResult(reserve, z_final, len(memo), oracle.ledger.snapshot(),
                             LearnerKind.CONCAVE_SEARCH, rounds, tuple(intervals))


def single_grid_unit(oracle: TargetedOracle, eps: float) -> SingleBuyerResult:
    """Probe quantiles k*eps/4 and post the value with the best estimated revenue."""
    _require_single(oracle)
    d = eps / 4.0
    e = eps / 8.0 if oracle.delta > 0 else 0.0
    count = int(math.floor(1.0 / d + 1e-9))
    best_rev, best_q, best_v = -math.inf, 1.0, 0.0
    for k in range(1, count + 1):
        q = min(k * d, 1.0)
        v = _probe(oracle, q, e)
        if v > 1.0 + settings.TOL or v < -settings.TOL:
            raise FamilyError(f"grid learner needs values in [0, 1], saw {v}")
        if q * v > best_rev:
            best_rev, best_q, best_v = q * v, q, v
    return SingleBuyerResult(best_v, best_q, count, oracle.ledger.snapshot(), LearnerKind.GRID_UNIT)


def geometric_probe_count(eps: float, H: float) -> int:
    return int(math.floor(math.log(H) / math.log(1.0 + eps / 8.0) + 1e-9)) + 1


def single_grid_geometric(oracle: TargetedOracle, eps: float, H: float) -> SingleBuyerResult:
    """Probe the geometric quantile series (1 + eps/8)^(i-1) / H."""
    _require_single(oracle)
    if H <= 1:
        raise FamilyError("geometric grid needs H > 1")
    half_width = eps / (8.0 * H) if oracle.delta > 0 else 0.0
    count = geometric_probe_count(eps, H)
    best_rev, best_q, best_v = -math.inf, 1.0, 0.0
    for i in range(1, count + 1):
        q = min((1.0 + eps / 8.0) ** (i - 1) / H, 1.0)
        v = _probe(oracle, q, half_width)
        if q * v > best_rev:
            best_rev, best_q, best_v = q * v, q, v
    return SingleBuyerResult(best_v, best_q, count, oracle.ledger.snapshot(),
                             LearnerKind.GRID_GEOMETRIC)


# -- parameter choice -------------------------------------------------------------

def _p_substitute(family: Family, eps: float, H: Optional[float]) -> float:
    if family is Family.UNIT01:
        return 1.0
    if family is Family.REGULAR:
        return eps / 8.0
    if family is Family.MHR:
        return 1.0 / math.log(2.0 / eps)
    if family is Family.ONE_TO_H:
        if H is None or H <= 1:
            raise FamilyError("one_to_h parameters need H > 1")
        return 1.0 / H
    raise FamilyError(f"unknown family: {family.value}")


def choose_params(family: Union[Family, str], eps: float, n: int, delta: float,
                  c_log: Optional[float] = None, L: Optional[float] = None,
                  H: Optional[float] = None) -> ParamChoice:
    """Budget scale N and learner for a (family, eps, n, delta) cell."""
    try:
        family = Family(family)
    except ValueError:
        raise FamilyError(f"unknown family: {family}") from None
    if not 0.0 < eps < 1.0:
        raise InvalidDistributionError("eps must lie in (0, 1)")
    if n < 1:
        raise InvalidDistributionError("n must be at least 1")
    if not 0.0 <= delta <= 1.0:
        raise TargetingPowerError("delta must lie in [0, 1]")
    c_log = settings.C_LOG if c_log is None else c_log
    p = _p_substitute(family, eps, H)
    lam = max(1, math.ceil(math.log(n / eps)))
    query_rate = p ** -0.5 / eps
    rate = query_rate if delta == 0 else max(query_rate, n * delta / (p * eps ** 2))
    N = max(2, math.ceil(c_log * rate * lam - 1e-9))

    if n == 1:
        learner = {
            Family.REGULAR: LearnerKind.CONCAVE_SEARCH,
            Family.MHR: LearnerKind.CONCAVE_SEARCH,
            Family.UNIT01: LearnerKind.GRID_UNIT,
            Family.ONE_TO_H: LearnerKind.GRID_GEOMETRIC,
        }[family]
    elif delta == 0:
        learner = LearnerKind.PINPOINT
    elif delta >= 1.0 / n - settings.TOL:
        learner = LearnerKind.INTERVAL
    else:
        learner = LearnerKind.HYBRID

    if learner is LearnerKind.INTERVAL:
        # keep the linear-region shading 2*sqrt(L/N) below eps/4
        for _ in range(64):
            L_now = default_L(N, n) if L is None else L
            need = math.ceil(settings.C_INTERVAL * L_now / eps ** 2)
            if need <= N:
                break
            N = need
    L_final = default_L(N, n) if L is None else float(L)
    n_per_point = 1 if delta == 0 else max(1, math.ceil(c_log * lam))
    params = ShadeParams(N=N, n=n, L=L_final, delta=delta, c_log=c_log)
    logger.info("choose_params: family=%s eps=%g n=%d delta=%g -> N=%d L=%g learner=%s",
                family.value, eps, n, delta, N, L_final, learner.value)
    return ParamChoice(params, learner, family, eps, rate, lam, n_per_point,
                       H if family is Family.ONE_TO_H else None)


def run_learner(oracle: TargetedOracle, choice: ParamChoice) -> Union[LearnResult, SingleBuyerResult]:
    """Run the learner selected by ``choose_params``."""
    p = choice.params
    if choice.learner is LearnerKind.PINPOINT:
        return learn_pinpoint(oracle, p.N)
    if choice.learner is LearnerKind.INTERVAL:
        return learn_interval(oracle, p.N, delta=max(p.delta, oracle.delta), L=p.L)
    if choice.learner is LearnerKind.HYBRID:
        return learn_hybrid(oracle, p.N, delta=max(p.delta, oracle.delta), L=p.L, c_log=p.c_log)
    if choice.learner is LearnerKind.CONCAVE_SEARCH:
        return single_concave_search(oracle, choice.family, choice.eps, choice.n_per_point)
    if choice.learner is LearnerKind.GRID_UNIT:
        return single_grid_unit(oracle, choice.eps)
    return single_grid_geometric(oracle, choice.eps, choice.H)
