"""
Verification toolkit: symmetric KL divergence, interval Bernstein bounds,
revenue-preserving quantile thresholds and sandwich reports.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import rel_entr

from app.core.config import settings
from app.core.exceptions import InvalidDistributionError
from app.services.learners import (
    LearnerKind,
    ShadeParams,
    interval_shade_df,
    shade_df,
)
from app.services.myerson import opt_revenue
from app.services.quantile_dist import (
    ProductPrior,
    QuantileDistribution,
    ironed_virtuals,
    max_dominance_gap,
    remap_quantiles,
    require_discrete,
    truncate_tail,
    value_at,
)

logger = logging.getLogger(__name__)


# -- symmetric KL ----------------------------------------------------------------

def _aligned_masses(P: QuantileDistribution, Q: QuantileDistribution) -> Tuple[np.ndarray, np.ndarray]:
    support = np.union1d(P.values, Q.values)
    p = np.zeros(support.size)
    q = np.zeros(support.size)
    p[np.searchsorted(support, P.values)] = P.masses
    q[np.searchsorted(support, Q.values)] = Q.masses
    return p, q


def dskl(P: QuantileDistribution, Q: QuantileDistribution) -> float:
    """KL(P||Q) + KL(Q||P) over the union of supports.

    A value carrying mass in exactly one of the two distributions makes the
    divergence infinite.
    """
    require_discrete(P, "dskl")
    require_discrete(Q, "dskl")
    p, q = _aligned_masses(P, Q)
    one_sided = (p > 0) != (q > 0)
    if np.any(one_sided):
        logger.warning("dskl is infinite: %d support values carry mass on one side only",
                       int(one_sided.sum()))
        return math.inf
    return float(np.sum(rel_entr(p, q) + rel_entr(q, p)))


def dskl_product(prior1: ProductPrior, prior2: ProductPrior) -> float:
    """Symmetric KL of two product priors; additive over buyers."""
    if prior1.n != prior2.n:
        raise InvalidDistributionError(f"priors have {prior1.n} and {prior2.n} buyers")
    return float(sum(dskl(a, b) for a, b in zip(prior1, prior2)))


# -- Bernstein --------------------------------------------------------------------

def bernstein_bound(q: float, a: float, b: float, N: int, L: float) -> float:
    """Deviation bound for the empirical quantile at q after N samples from [a, b]."""
    if not a <= q <= b:
        raise InvalidDistributionError("q must lie in [a, b]")
    if N < 1:
        raise InvalidDistributionError("N must be at least 1")
    return math.sqrt(2.0 * (q - a) * (b - q) * L / N) + L * (b - a) / N


def bernstein_coverage(D: QuantileDistribution, N: int, L: float, trials: int,
                       seed: Optional[int] = None,
                       interval: Tuple[float, float] = (0.0, 1.0)) -> float:
    """Fraction of (trial, support value) pairs whose empirical quantile lies within the bound."""
    require_discrete(D, "bernstein_coverage")
    a, b = interval
    seed = settings.DEFAULT_SEED if seed is None else seed
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    probes = [(v, c) for v, c in zip(D.values, D.cum) if a < c <= b]
    if not probes:
        return 1.0
    q = np.maximum(rng.random((trials, N)) * (b - a) + a, 1e-15)
    draws = value_at(D, q)
    hits = 0
    for v, c in probes:
        q_emp = a + (b - a) * np.mean(draws >= v, axis=1)
        hits += int(np.sum(np.abs(q_emp - c) <= bernstein_bound(float(c), a, b, N, L)))
    return hits / (trials * len(probes))


# -- thresholds -------------------------------------------------------------------

@dataclass(frozen=True)
class ThetaVector:
    thetas: Tuple[float, ...]
    phi_star: float
    sum: float
    achieved_ratio: float


def _upper_theta(cum: np.ndarray, phis: np.ndarray, phi: float) -> float:
    ok = np.flatnonzero(phis >= phi)
    return float(cum[ok[-1]]) if ok.size else 0.0


def _lower_theta(cum: np.ndarray, phis: np.ndarray, phi: float) -> float:
    ok = np.flatnonzero(phis > phi)
    return float(cum[ok[-1]]) if ok.size else 0.0


def theta_thresholds(prior: ProductPrior, eps: float) -> ThetaVector:
    """Quantile thresholds whose tail truncation keeps a (1 - eps) share of opt.

    phi* is the largest ironed virtual value with prod(1 - theta_upper(phi*)) <= eps;
    buyers are then switched one at a time to theta_lower(phi*) while the product
    stays strictly below eps.
    """
    if not 0.0 < eps <= 1.0:
        raise InvalidDistributionError("eps must lie in (0, 1]")
    tables = []
    for D in prior:
        require_discrete(D, "theta_thresholds")
        tables.append((D.cum, ironed_virtuals(D)))

    def product(phi: float) -> float:
        return float(np.prod([1.0 - _upper_theta(c, p, phi) for c, p in tables]))

    candidates = np.append(np.unique(np.concatenate([p for _, p in tables])), np.inf)
    # product(phi) is nondecreasing in phi and equals 0 at the smallest candidate
    lo, hi = 0, candidates.size - 1
    if product(candidates[hi]) <= eps:
        lo = hi
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if product(candidates[mid]) <= eps:
            lo = mid
        else:
            hi = mid - 1
    phi_star = float(candidates[lo])

    thetas = [_upper_theta(c, p, phi_star) for c, p in tables]
    for i, (c, p) in enumerate(tables):
        trial = list(thetas)
        trial[i] = _lower_theta(c, p, phi_star)
        if float(np.prod([1.0 - t for t in trial])) < eps:
            thetas = trial

    truncated = prior.with_buyers([truncate_tail(D, t) for D, t in zip(prior, thetas)])
    base = opt_revenue(prior)
    ratio = opt_revenue(truncated) / base if base > 0 else 1.0
    logger.info("thresholds: phi*=%g sum=%.6g ratio=%.6g", phi_star, sum(thetas), ratio)
    return ThetaVector(tuple(thetas), phi_star, float(sum(thetas)), float(ratio))


# -- sandwich ---------------------------------------------------------------------

@dataclass(frozen=True)
class SandwichReport:
    dominates_upper: bool
    dominates_lower: bool
    max_violation: float
    upper_gap: float = 0.0
    lower_gap: float = 0.0

    @property
    def ok(self) -> bool:
        return self.dominates_upper and self.dominates_lower


def lower_shading(D: QuantileDistribution, params: ShadeParams,
                  regime: LearnerKind = LearnerKind.PINPOINT) -> QuantileDistribution:
    """D shaded by d_f of the regime (the query-regime d_f for pinpoint and hybrid)."""
    if regime is LearnerKind.INTERVAL:
        return remap_quantiles(D, lambda c: interval_shade_df(c, params))
    return remap_quantiles(D, lambda c: shade_df(c, params))


def verify_sandwich(D: QuantileDistribution, E: QuantileDistribution, params: ShadeParams,
                    regime: LearnerKind = LearnerKind.PINPOINT) -> SandwichReport:
    """Check D >= E >= d_f(D) in first-order dominance."""
    require_discrete(D, "verify_sandwich")
    require_discrete(E, "verify_sandwich")
    upper = max_dominance_gap(D, E)
    lower = max_dominance_gap(E, lower_shading(D, params, regime))
    tol = settings.TOL
    return SandwichReport(upper <= tol, lower <= tol, max(upper, lower), upper, lower)


# -- KL vs revenue ---------------------------------------------------------------

@dataclass(frozen=True)
class KLRevenueReport:
    dskl: float
    threshold: float
    within_threshold: bool
    opt1: float
    opt2: float
    revenue_gap: float
    alpha: float

    @property
    def gap_within_two_alpha(self) -> bool:
        return self.revenue_gap <= 2.0 * self.alpha + 1e-9


def kl_revenue_gap(prior1: ProductPrior, prior2: ProductPrior, K: float, alpha: float,
                   c: float = 1.0) -> KLRevenueReport:
    """Symmetric KL of two priors against c/K, next to the gap in optimal revenue."""
    if K <= 0 or alpha <= 0:
        raise InvalidDistributionError("K and alpha must be positive")
    d = dskl_product(prior1, prior2)
    opt1, opt2 = opt_revenue(prior1), opt_revenue(prior2)
    return KLRevenueReport(d, c / K, d <= c / K, opt1, opt2, abs(opt1 - opt2), alpha)


@dataclass(frozen=True)
class KLGapSweep:
    """KL-vs-revenue reports over many prior pairs.

    A pair passes when its divergence is within c/K and the revenue gap is at
    most 2 alpha; pairs above the threshold carry no claim and are left out
    of the pass rate.
    """
    reports: Tuple[KLRevenueReport, ...]

    @property
    def below_threshold(self) -> int:
        return sum(r.within_threshold for r in self.reports)

    @property
    def passed(self) -> int:
        return sum(r.within_threshold and r.gap_within_two_alpha for r in self.reports)

    @property
    def pass_rate(self) -> float:
        below = self.below_threshold
        return self.passed / below if below else 1.0

    @property
    def max_gap(self) -> float:
        below = [r.revenue_gap for r in self.reports if r.within_threshold]
        return max(below) if below else 0.0


def kl_gap_sweep(pairs: Iterable[Tuple[ProductPrior, ProductPrior]], K: float, alpha: float,
                 c: float = 1.0) -> KLGapSweep:
    reports = tuple(kl_revenue_gap(p1, p2, K, alpha, c) for p1, p2 in pairs)
    if not reports:
        raise InvalidDistributionError("kl gap sweep needs at least one prior pair")
    sweep = KLGapSweep(reports)
    logger.info("kl gap sweep: %d pairs, %d below c/K=%g, pass rate %.4f",
                len(reports), sweep.below_threshold, c / K, sweep.pass_rate)
    return sweep


def kl_scale(theta: float, N: int, n: int) -> float:
    """Predicted order of dskl(D_theta, d_f(D_theta)): theta/N^2 + 1/(N^2 n)."""
    return theta / N ** 2 + 1.0 / (N ** 2 * n)


@dataclass
class KLScalingTable:
    rows: List[Dict[str, float]] = field(default_factory=list)
    ratios: Dict[float, List[float]] = field(default_factory=dict)

    @property
    def fitted_constant(self) -> float:
        """Smallest C with dskl <= C (theta/N^2 + 1/(N^2 n)) on every row."""
        return max((row["C"] for row in self.rows), default=0.0)


def kl_scaling(D: QuantileDistribution, thetas: Sequence[float], Ns: Sequence[int],
               n: int = 1) -> KLScalingTable:
    """dskl(D_theta, d_f(D_theta)) for every (theta, N) with successive ratios per theta."""
    require_discrete(D, "kl_scaling")
    table = KLScalingTable()
    for theta in thetas:
        D_theta = truncate_tail(D, theta)
        values = []
        for N in Ns:
            d = dskl(D_theta, lower_shading(D_theta, ShadeParams(N=N, n=n)))
            table.rows.append({"theta": float(theta), "N": int(N), "dskl": d,
                               "C": d / kl_scale(theta, N, n)})
            values.append(d)
        table.ratios[float(theta)] = [
            prev / cur if cur > 0 else math.inf for prev, cur in zip(values, values[1:])
        ]
    return table
