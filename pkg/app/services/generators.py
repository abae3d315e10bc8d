"""
Prior generators: random family priors and the hard instances behind the
query lower bounds (top triangle, unit hill, geometric hill).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.config import settings
from app.core.exceptions import FamilyError, GenerationError, InvalidDistributionError
from app.services.oracle import TargetedOracle
from app.services.quantile_dist import (
    Family,
    ProductPrior,
    QuantileDistribution,
    is_regular,
    require_discrete,
    value_at,
)

logger = logging.getLogger(__name__)

Point = Tuple[float, float]


class LowerBoundKind(str, Enum):
    TOP_TRIANGLE = "top_triangle"
    UNIT_HILL = "unit_hill"
    GEO_HILL = "geo_hill"


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(entropy))))


# -- random family priors -----------------------------------------------------------

def _bounded(rng: np.random.Generator, k: int, lo: float, hi: float) -> QuantileDistribution:
    values = rng.uniform(lo, hi, size=k)
    return QuantileDistribution.discrete(values, rng.dirichlet(np.ones(k)))


def _regular(rng: np.random.Generator, k: int) -> QuantileDistribution:
    """Points of a random concave revenue curve through the origin."""
    cum = np.cumsum(rng.dirichlet(np.ones(k)))
    cum[-1] = 1.0
    slopes = np.sort(rng.uniform(-0.5, 1.0, size=k))[::-1]
    slopes[0] = 1.0
    r = np.cumsum(slopes * np.diff(cum, prepend=0.0))
    if np.any(r <= 0):
        raise InvalidDistributionError("revenue curve dips to zero")
    return QuantileDistribution.discrete(r / cum, np.diff(cum, prepend=0.0))


def _mhr(rng: np.random.Generator, k: int) -> QuantileDistribution:
    """Shifted exponential read off at the quantiles j/k."""
    rate = rng.uniform(1.0, 4.0)
    shift = rng.uniform(0.0, 1.0)
    q = np.arange(1, k + 1) / k
    return QuantileDistribution.discrete(shift - np.log(q) / rate, np.full(k, 1.0 / k))


def check_family(prior: ProductPrior) -> bool:
    """Family invariant: range checks run in ProductPrior, concavity here."""
    if prior.family in (Family.REGULAR, Family.MHR):
        return all(is_regular(D) for D in prior)
    return True


def gen_family(family: Union[Family, str], support_size: int = 10, n: int = 1,
               H: Optional[float] = None, seed: Optional[int] = None) -> ProductPrior:
    """Random product prior of the given family, verified before return."""
    try:
        family = Family(family)
    except ValueError:
        raise FamilyError(f"unknown family: {family}") from None
    if family is Family.UNKNOWN:
        raise FamilyError("cannot generate a prior of unknown family")
    if support_size < 1 or n < 1:
        raise InvalidDistributionError("support size and n must be positive")
    if family is Family.ONE_TO_H and (H is None or H <= 1):
        raise FamilyError("one_to_h priors need H > 1")
    seed = settings.DEFAULT_SEED if seed is None else seed

    buyers: List[QuantileDistribution] = []
    for i in range(n):
        for attempt in range(settings.GENERATION_ATTEMPTS):
            rng = _rng(seed, i, attempt)
            try:
                if family is Family.UNIT01:
                    D = _bounded(rng, support_size, 0.0, 1.0)
                elif family is Family.ONE_TO_H:
                    D = _bounded(rng, support_size, 1.0, float(H))
                elif family is Family.REGULAR:
                    D = _regular(rng, support_size)
                else:
                    D = _mhr(rng, support_size)
            except InvalidDistributionError:
                continue
            if family in (Family.UNIT01, Family.ONE_TO_H) or is_regular(D):
                buyers.append(D)
                break
            logger.warning("buyer %d attempt %d failed the %s check", i, attempt, family.value)
        else:
            raise GenerationError(
                f"no {family.value} prior after {settings.GENERATION_ATTEMPTS} attempts")
    prior = ProductPrior(tuple(buyers), family, H if family is Family.ONE_TO_H else None)
    if not check_family(prior):
        raise GenerationError(f"generated prior failed the {family.value} check")
    return prior


def gen_single_curve(family: Union[Family, str], seed: Optional[int] = None,
                     points: int = 200) -> QuantileDistribution:
    """Curve prior for single-buyer search.

    regular: v(q) = a (1 - q)^b with the revenue peak at 1 / (1 + b) <= 0.8.
    mhr: shifted exponential v(q) = c - ln(q) / rate, flat below q = 1e-3.
    """
    family = Family(family)
    rng = _rng(settings.DEFAULT_SEED if seed is None else seed)
    if family is Family.REGULAR:
        a, b = rng.uniform(0.5, 1.0), rng.uniform(0.25, 1.0)
        q = np.linspace(0.0, 1.0, points + 1)
        return QuantileDistribution.curve(q, a * (1.0 - q) ** b)
    if family is Family.MHR:
        rate = rng.uniform(1.0, 4.0)
        shift = rng.uniform(0.0, 0.5 / rate)
        q = np.concatenate(([0.0], np.geomspace(1e-3, 1.0, points)))
        v = shift - np.log(np.maximum(q, 1e-3)) / rate
        return QuantileDistribution.curve(q, v)
    raise FamilyError(f"no single-buyer curve generator for {family.value}")


def uniform_grid(k: int = 10) -> QuantileDistribution:
    """Values 1/k, 2/k, ..., 1 with mass 1/k each."""
    return QuantileDistribution.discrete(np.arange(1, k + 1) / k, np.full(k, 1.0 / k))


def perturb_prior(prior: ProductPrior, scale: float, rng: np.random.Generator) -> ProductPrior:
    """Same supports with every mass tilted by exp(scale * z), z standard normal."""
    if scale < 0:
        raise InvalidDistributionError("perturbation scale must be nonnegative")
    buyers = []
    for D in prior:
        require_discrete(D, "perturb_prior")
        masses = D.masses * np.exp(scale * rng.standard_normal(D.size))
        buyers.append(QuantileDistribution.discrete(D.values, masses / masses.sum()))
    return prior.with_buyers(buyers)


def kl_fixture_pairs(family: Union[Family, str], n: int, support_size: int, count: int,
                     scale: float, H: Optional[float] = None,
                     seed: Optional[int] = None) -> List[Tuple[ProductPrior, ProductPrior]]:
    """``count`` (prior, perturbed prior) pairs for the KL-vs-revenue sweep."""
    seed = settings.DEFAULT_SEED if seed is None else seed
    pairs = []
    for j in range(count):
        prior = gen_family(family, support_size, n, H, int(_rng(seed, j).integers(2 ** 31)))
        pairs.append((prior, perturb_prior(prior, scale, _rng(seed, j, 1))))
    return pairs


# -- curve assembly -----------------------------------------------------------------

def _curve_from_pieces(pieces: Sequence[Tuple[float, float, Callable[[np.ndarray], np.ndarray]]],
                       max_step: Optional[float] = None,
                       max_ratio: Optional[float] = None) -> QuantileDistribution:
    """Join (q_start, q_end, v) pieces; gaps between pieces are value jumps.

    Pieces starting above 0 are gridded geometrically when ``max_ratio`` is
    given, otherwise linearly with spacing at most ``max_step``.
    """
    qs: List[float] = []
    vs: List[float] = []
    for q0, q1, fn in pieces:
        if q1 <= q0:
            continue
        if max_ratio and q0 > 0:
            count = max(1, math.ceil(math.log(q1 / q0) / math.log(max_ratio)))
            grid = np.geomspace(q0, q1, count + 1)
        else:
            count = 1 if not max_step else max(1, math.ceil((q1 - q0) / max_step))
            grid = np.linspace(q0, q1, count + 1)
        if qs and qs[-1] == q0:
            # the later piece owns the shared breakpoint
            qs.pop()
            vs.pop()
        qs.extend(grid.tolist())
        vs.extend(np.asarray(fn(grid), dtype=np.float64).tolist())
    return QuantileDistribution.curve(qs, vs)


# -- top triangle -------------------------------------------------------------------

def _intersect(p1: np.ndarray, p2: np.ndarray, p3: np.ndarray, p4: np.ndarray) -> np.ndarray:
    """Intersection of line p1p2 with line p3p4."""
    A = np.column_stack((p2 - p1, p3 - p4))
    t = np.linalg.solve(A, p3 - p1)[0]
    return p1 + t * (p2 - p1)


def _collinear(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> bool:
    cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    return abs(cross) <= 1e-12


def top_triangle_polyline(s: int, index: int) -> List[Point]:
    """Revenue-curve vertices after s top-triangle splits; bit t of index picks the side."""
    if s < 0:
        raise InvalidDistributionError("s must be nonnegative")
    if not 0 <= index < 2 ** s:
        raise InvalidDistributionError(f"index {index} out of range for s={s}")
    pts = [np.array([0.0, 0.0]), np.array([0.5, 1.0]), np.array([1.0, 0.0])]
    k = 0  # the current top triangle is pts[k], pts[k + 1], pts[k + 2]
    for t in range(s):
        left, apex, right = pts[k], pts[k + 1], pts[k + 2]
        mid_l, mid_r = (left + apex) / 2.0, (apex + right) / 2.0
        P = (mid_l + mid_r) / 2.0
        if (index >> (s - 1 - t)) & 1 == 0:
            x_l = _intersect(right, P, left, apex)
            pts[k + 1:k + 2] = [mid_l, x_l, P]
        else:
            x_r = _intersect(left, P, apex, right)
            pts[k + 1:k + 2] = [P, x_r, mid_r]
        k += 1
    out = [pts[0]]
    for i in range(1, len(pts) - 1):
        if not _collinear(out[-1], pts[i], pts[i + 1]):
            out.append(pts[i])
    out.append(pts[-1])
    return [(float(p[0]), float(p[1])) for p in out]


def top_triangle(s: int, index: int, max_step: Optional[float] = None) -> QuantileDistribution:
    poly = np.asarray(top_triangle_polyline(s, index))
    q, r = poly[:, 0], poly[:, 1]
    first_slope = r[1] / q[1]

    def piece(j: int) -> Callable[[np.ndarray], np.ndarray]:
        slope = (r[j + 1] - r[j]) / (q[j + 1] - q[j])

        def v(x: np.ndarray) -> np.ndarray:
            safe = np.where(x > 0, x, 1.0)
            return np.where(x > 0, (r[j] + slope * (x - q[j])) / safe, first_slope)
        return v

    return _curve_from_pieces([(q[j], q[j + 1], piece(j)) for j in range(q.size - 1)], max_step)


# -- unit hill ----------------------------------------------------------------------

def unit_hill_count(eps: float) -> int:
    """Number of hill positions 1/2 + 4 s eps that fit below quantile 1."""
    if not 0.0 < eps < 0.125:
        raise InvalidDistributionError("unit hill needs eps in (0, 1/8)")
    return int(math.floor(1.0 / (8.0 * eps) + 1e-9))


def _unit_hill_span(eps: float, s: int) -> Tuple[float, float, float]:
    count = unit_hill_count(eps)
    if not 0 <= s < count:
        raise InvalidDistributionError(f"hill index {s} out of range [0, {count})")
    q_start = 0.5 + 4.0 * s * eps
    q_end = min(0.5 + 4.0 * (s + 1) * eps, 1.0)
    return q_start, q_end, 0.5 - 4.0 * s * eps


def _hill_value(q, offset: float):
    return (q + offset) / (2.0 * q)


def unit_hill(eps: float, s: int, density: int = 8) -> QuantileDistribution:
    """R(q) = q below 1/2, a slope-1/2 hill of height 2 eps at 1/2 + 4 s eps, 1/2 elsewhere."""
    q_start, q_end, offset = _unit_hill_span(eps, s)
    step = 4.0 * eps / density
    plateau = lambda x: 0.5 / x  # noqa: E731
    pieces = [
        (0.0, 0.5, lambda x: np.ones_like(x)),
        (0.5, q_start, plateau),
        (q_start, q_end, lambda x: _hill_value(x, offset)),
    ]
    if q_end < 1.0:
        pieces.append((q_end + settings.JUMP_EPS, 1.0, plateau))
    return _curve_from_pieces(pieces, step)


def unit_hill_peak(eps: float, s: int) -> float:
    """Value at the top of hill s; posting it earns 1/2 + 2 eps."""
    _, q_end, offset = _unit_hill_span(eps, s)
    return float(_hill_value(np.float64(q_end), offset))


def unit_hill_midpoint(eps: float, s: int) -> float:
    q_start, q_end, _ = _unit_hill_span(eps, s)
    return (q_start + q_end) / 2.0


# -- geometric hill -----------------------------------------------------------------

def geo_hill_count(eps: float, H: float) -> int:
    if H <= 1:
        raise FamilyError("geometric hill needs H > 1")
    if eps <= 0:
        raise InvalidDistributionError("eps must be positive")
    return int(math.floor(math.log(H) / math.log(1.0 + 2.0 * eps) + 1e-9))


def geo_hill(eps: float, H: float, s: int, density: int = 8) -> QuantileDistribution:
    """R(q) = H q below 1/H, a flat-value hill on [(1+2eps)^(s-1)/H, (1+2eps)^s/H), 1 elsewhere."""
    count = geo_hill_count(eps, H)
    if not 1 <= s <= count:
        raise InvalidDistributionError(f"hill index {s} out of range [1, {count}]")
    growth = 1.0 + 2.0 * eps
    q_start = growth ** (s - 1) / H
    q_end = min(growth ** s / H, 1.0)
    v_hill = H * growth ** (1 - s)
    plateau = lambda x: 1.0 / x  # noqa: E731
    pieces = [
        (0.0, 1.0 / H, lambda x: np.full_like(x, float(H))),
        (1.0 / H, q_start, plateau),
        (q_start, q_end, lambda x: np.full_like(x, v_hill)),
    ]
    if q_end < 1.0:
        pieces.append((q_end + settings.JUMP_EPS, 1.0, plateau))
    return _curve_from_pieces(pieces, max_ratio=1.0 + 2.0 * eps / density)


def geo_hill_peak(eps: float, H: float, s: int) -> float:
    """Flat value of hill s; posting it earns 1 + 2 eps."""
    return H * (1.0 + 2.0 * eps) ** (1 - s)


def gen_lowerbound(kind: Union[LowerBoundKind, str], eps: Optional[float] = None, s: int = 0,
                   index: int = 0, H: Optional[float] = None,
                   max_step: Optional[float] = None) -> QuantileDistribution:
    kind = LowerBoundKind(kind)
    if kind is LowerBoundKind.TOP_TRIANGLE:
        return top_triangle(s, index, max_step)
    if eps is None:
        raise InvalidDistributionError(f"{kind.value} needs eps")
    if kind is LowerBoundKind.UNIT_HILL:
        return unit_hill(eps, s)
    if H is None:
        raise FamilyError("geo_hill needs H")
    return geo_hill(eps, H, s)


# -- lower-bound learner ------------------------------------------------------------

@dataclass(frozen=True)
class HillGuess:
    """Posted reserve of a lower-bound learner; ``hill`` is the hill position or curve index."""
    reserve: float
    hill: int
    found: bool
    queries: int


def hill_query_learner(oracle: TargetedOracle, eps: float, k: int,
                       rng: np.random.Generator) -> HillGuess:
    """Query the midpoints of hills 0..k-1; post the hill found or a uniform guess among the rest."""
    count = unit_hill_count(eps)
    probed = min(k, count)
    for s in range(probed):
        q = unit_hill_midpoint(eps, s)
        if q * oracle.targeted_query(0, q) > 0.5 + eps / 2.0:
            return HillGuess(unit_hill_peak(eps, s), s, True, s + 1)
    rest = count - probed
    guess = probed + int(rng.integers(rest)) if rest > 0 else 0
    return HillGuess(unit_hill_peak(eps, guess), guess, False, probed)


def geo_hill_midpoint(eps: float, H: float, s: int) -> float:
    """Geometric middle of hill s in quantile space."""
    growth = 1.0 + 2.0 * eps
    return math.sqrt(growth ** (s - 1) * growth ** s) / H


def geo_hill_query_learner(oracle: TargetedOracle, eps: float, H: float, k: int,
                           rng: np.random.Generator) -> HillGuess:
    """Query the middles of hills 1..k; post the hill found or a uniform guess among the rest."""
    count = geo_hill_count(eps, H)
    probed = min(k, count)
    for s in range(1, probed + 1):
        q = geo_hill_midpoint(eps, H, s)
        if q * oracle.targeted_query(0, q) > 1.0 + eps / 2.0:
            return HillGuess(geo_hill_peak(eps, H, s), s, True, s)
    rest = count - probed
    guess = probed + 1 + int(rng.integers(rest)) if rest > 0 else 1
    return HillGuess(geo_hill_peak(eps, H, guess), guess, False, probed)


@dataclass(frozen=True, eq=False)
class TriangleCandidate:
    curve: QuantileDistribution
    vertices: np.ndarray
    price: float


@lru_cache(maxsize=16)
def triangle_candidates(s: int) -> Tuple[TriangleCandidate, ...]:
    """All 2^s top-triangle curves with their polyline quantiles and apex price."""
    out = []
    for index in range(2 ** s):
        poly = np.asarray(top_triangle_polyline(s, index))
        apex = int(np.argmax(poly[:, 1]))
        out.append(TriangleCandidate(top_triangle(s, index), poly[1:, 0].copy(),
                                     float(poly[apex, 1] / poly[apex, 0])))
    return tuple(out)


def _splitting_quantile(candidates: Sequence[TriangleCandidate]) -> float:
    """Vertex quantile whose largest group of equal answers is smallest."""
    qs = np.unique(np.concatenate([c.vertices for c in candidates]))
    answers = np.round(np.stack([value_at(c.curve, qs) for c in candidates]), 9)
    largest = [np.unique(answers[:, j], return_counts=True)[1].max() for j in range(qs.size)]
    return float(qs[int(np.argmin(largest))])


def triangle_query_learner(oracle: TargetedOracle, s: int, k: int,
                           rng: np.random.Generator) -> HillGuess:
    """Eliminate top-triangle curves with up to k queries, then guess among the survivors."""
    candidates = triangle_candidates(s)
    alive = list(range(len(candidates)))
    queries = 0
    while queries < k and len(alive) > 1:
        q = _splitting_quantile([candidates[i] for i in alive])
        answer = oracle.targeted_query(0, q)
        queries += 1
        misses = np.abs([value_at(candidates[i].curve, q) - answer for i in alive])
        alive = [i for i, miss in zip(alive, misses) if miss <= misses.min() + 1e-9]
    guess = alive[int(rng.integers(len(alive)))]
    return HillGuess(candidates[guess].price, guess, len(alive) == 1, queries)
