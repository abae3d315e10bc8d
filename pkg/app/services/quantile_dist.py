"""
Quantile-space representation of single-buyer value priors.

A distribution is stored either as point masses (``DistKind.DISCRETE``, values
sorted strictly descending) or as a piecewise-linear value curve ``v(q)`` over
quantile breakpoints (``DistKind.CURVE``). Quantiles follow the convention
``q(v) = Pr[V >= v]``: small quantile means high value.

The module also holds the truncation operators, first-order stochastic
dominance checks, revenue curves and ironing (upper concave envelope of the
revenue curve), which is where ironed virtual values come from.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.config import settings
from app.core.exceptions import (
    DiscretizationRequiredError,
    FamilyError,
    InvalidDistributionError,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[float, Sequence[float], np.ndarray]

# Construction accepts masses summing to 1 within this slack and renormalizes.
MASS_CHECK_TOL = 1e-9
# Masses at or below this are floating residue of quantile arithmetic.
MASS_FLOOR = 1e-15
# Slack on revenue-curve slope increases; q * (R / q) round-trips are not exact.
CONCAVITY_TOL = 1e-9


class DistKind(str, Enum):
    """How a distribution is stored."""
    DISCRETE = "discrete"
    CURVE = "curve"


class Family(str, Enum):
    """Distribution family tag of a product prior."""
    REGULAR = "regular"
    MHR = "mhr"
    UNIT01 = "unit01"
    ONE_TO_H = "one_to_h"
    UNKNOWN = "unknown"


@dataclass(frozen=True, eq=False)
class QuantileDistribution:
    """A single buyer's prior as a value/quantile mapping.

    Use the ``discrete``, ``curve`` and ``point_mass`` constructors; they
    normalize and validate their input. Instances are immutable.

    Attributes:
        kind: storage kind
        values: Discrete support (strictly descending) or Curve breakpoint values (nonincreasing)
        masses: point masses aligned with ``values`` (Discrete only)
        qs: breakpoint quantiles, strictly increasing from 0 to 1 (Curve only)
    """
    kind: DistKind
    values: np.ndarray
    masses: Optional[np.ndarray] = None
    qs: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind is DistKind.DISCRETE and self.masses is None:
            raise InvalidDistributionError("discrete distribution needs masses")
        if self.kind is DistKind.CURVE and self.qs is None:
            raise InvalidDistributionError("curve distribution needs breakpoint quantiles")
        self.values.setflags(write=False)
        for arr in (self.masses, self.qs):
            if arr is not None:
                arr.setflags(write=False)

    # -- constructors -----------------------------------------------------

    @classmethod
    def discrete(cls, values: Sequence[float], masses: Sequence[float]) -> "QuantileDistribution":
        v = np.asarray(values, dtype=np.float64).ravel()
        m = np.asarray(masses, dtype=np.float64).ravel()
        if v.shape != m.shape:
            raise InvalidDistributionError("values and masses must have equal length")
        if v.size == 0:
            raise InvalidDistributionError("discrete distribution needs at least one support point")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(m))):
            raise InvalidDistributionError("values and masses must be finite")
        if np.any(v < 0):
            raise InvalidDistributionError("values must be nonnegative")
        if np.any(m < -MASS_CHECK_TOL):
            raise InvalidDistributionError("masses must be nonnegative")
        keep = m > MASS_FLOOR
        v, m = v[keep], m[keep]
        total = float(m.sum())
        if v.size == 0 or abs(total - 1.0) > MASS_CHECK_TOL:
            raise InvalidDistributionError(f"masses sum to {total!r}, expected 1")
        uniq, inverse = np.unique(v, return_inverse=True)
        merged = np.bincount(inverse, weights=m, minlength=uniq.size)
        if abs(total - 1.0) > settings.TOL:
            merged = merged / total
        return cls(DistKind.DISCRETE, uniq[::-1].copy(), merged[::-1].copy())

    @classmethod
    def curve(cls, qs: Sequence[float], values: Sequence[float]) -> "QuantileDistribution":
        q = np.asarray(qs, dtype=np.float64).ravel().copy()
        v = np.asarray(values, dtype=np.float64).ravel().copy()
        if q.shape != v.shape or q.size < 2:
            raise InvalidDistributionError("curve needs at least two (q, v) breakpoints")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(v))):
            raise InvalidDistributionError("breakpoints must be finite")
        if abs(q[0]) > settings.TOL or abs(q[-1] - 1.0) > settings.TOL:
            raise InvalidDistributionError("curve breakpoints must start at q=0 and end at q=1")
        q[0], q[-1] = 0.0, 1.0
        if np.any(np.diff(q) <= 0):
            raise InvalidDistributionError("breakpoint quantiles must be strictly increasing")
        if np.any(v < 0):
            raise InvalidDistributionError("curve values must be nonnegative")
        if np.any(np.diff(v) > settings.TOL * max(1.0, float(v[0]))):
            raise InvalidDistributionError("curve values must be nonincreasing in q")
        return cls(DistKind.CURVE, np.minimum.accumulate(v), qs=q)

    @classmethod
    def point_mass(cls, value: float) -> "QuantileDistribution":
        return cls.discrete([value], [1.0])

    # -- derived views ------------------------------------------------------

    @property
    def is_discrete(self) -> bool:
        return self.kind is DistKind.DISCRETE

    @property
    def size(self) -> int:
        return int(self.values.size)

    @cached_property
    def cum(self) -> np.ndarray:
        """Cumulative quantile of each support value (last entry exactly 1)."""
        require_discrete(self, "cumulative quantiles")
        c = np.cumsum(self.masses)
        c = c / c[-1]
        c.setflags(write=False)
        return c

    def support_range(self) -> Tuple[float, float]:
        return float(self.values.min()), float(self.values.max())

    def pairs(self) -> List[Tuple[float, float]]:
        """(value, mass) pairs for Discrete, (q, v) breakpoints for Curve."""
        if self.is_discrete:
            return list(zip(self.values.tolist(), self.masses.tolist()))
        return list(zip(self.qs.tolist(), self.values.tolist()))

    def approx_equal(self, other: "QuantileDistribution", atol: float = 1e-12) -> bool:
        if self.kind is not other.kind or self.size != other.size:
            return False
        second = self.masses if self.is_discrete else self.qs
        other_second = other.masses if other.is_discrete else other.qs
        return bool(np.allclose(self.values, other.values, rtol=0, atol=atol)
                    and np.allclose(second, other_second, rtol=0, atol=atol))

    def __repr__(self) -> str:
        pairs = ", ".join(f"{a:.6g}:{b:.6g}" for a, b in self.pairs()[:8])
        more = ", ..." if self.size > 8 else ""
        return f"QuantileDistribution({self.kind.value}, {{{pairs}{more}}})"


def require_discrete(D: QuantileDistribution, operation: str = "") -> None:
    if not D.is_discrete:
        raise DiscretizationRequiredError(operation)


@dataclass(frozen=True, eq=False)
class ProductPrior:
    """Ordered per-buyer priors with a family tag."""
    buyers: Tuple[QuantileDistribution, ...]
    family: Family = Family.UNKNOWN
    H: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "buyers", tuple(self.buyers))
        object.__setattr__(self, "family", Family(self.family))
        if not self.buyers:
            raise InvalidDistributionError("a product prior needs at least one buyer")
        tol = settings.TOL
        lo, hi = self.support_range()
        if self.family is Family.UNIT01 and (lo < -tol or hi > 1.0 + tol):
            raise FamilyError(f"unit01 prior has support outside [0, 1]: [{lo}, {hi}]")
        if self.family is Family.ONE_TO_H:
            if self.H is None or self.H <= 1:
                raise FamilyError("one_to_h prior needs H > 1")
            if lo < 1.0 - tol or hi > self.H + tol:
                raise FamilyError(f"one_to_h prior has support outside [1, {self.H}]: [{lo}, {hi}]")

    @property
    def n(self) -> int:
        return len(self.buyers)

    @property
    def is_discrete(self) -> bool:
        return all(d.is_discrete for d in self.buyers)

    def support_range(self) -> Tuple[float, float]:
        ranges = [d.support_range() for d in self.buyers]
        return min(r[0] for r in ranges), max(r[1] for r in ranges)

    def with_buyers(self, buyers: Sequence[QuantileDistribution],
                    family: Family = Family.UNKNOWN) -> "ProductPrior":
        """Derived prior; shading and truncation add value 0, so the tag defaults to unknown."""
        return ProductPrior(tuple(buyers), family, self.H if family is Family.ONE_TO_H else None)

    def __len__(self) -> int:
        return len(self.buyers)

    def __iter__(self) -> Iterator[QuantileDistribution]:
        return iter(self.buyers)

    def __getitem__(self, i: int) -> QuantileDistribution:
        return self.buyers[i]


@dataclass(frozen=True, eq=False)
class RevenueCurve:
    """Points (q, R) with R = q * v(q), starting at (0, 0)."""
    q: np.ndarray
    r: np.ndarray


@dataclass(frozen=True, eq=False)
class IronedCurve:
    """Upper concave envelope of a revenue curve."""
    q: np.ndarray
    r: np.ndarray

    @cached_property
    def slopes(self) -> np.ndarray:
        if self.q.size < 2:
            return np.zeros(1)
        return np.diff(self.r) / np.diff(self.q)

    def value(self, q: ArrayLike) -> np.ndarray:
        return np.interp(q, self.q, self.r)

    def segment_of(self, q: ArrayLike) -> np.ndarray:
        """Index of the segment (q_a, q_b] containing each quantile."""
        idx = np.searchsorted(self.q, q, side="left") - 1
        return np.clip(idx, 0, self.slopes.size - 1)


# -- construction from data ---------------------------------------------------

def from_samples(values: Sequence[float]) -> QuantileDistribution:
    """Empirical distribution: mass of v is multiplicity(v) / m."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise InvalidDistributionError("empty sample set")
    uniq, counts = np.unique(arr, return_counts=True)
    return QuantileDistribution.discrete(uniq, counts / arr.size)


def discretize(D: QuantileDistribution, grid_size: Optional[int] = None) -> QuantileDistribution:
    """Curve to Discrete: mass 1/G at the value of each quantile-grid midpoint."""
    if D.is_discrete:
        return D
    G = int(grid_size or settings.DISCRETIZE_GRID)
    if G < 1:
        raise InvalidDistributionError("grid size must be positive")
    grid = (np.arange(G, dtype=np.float64) + 0.5) / G
    return QuantileDistribution.discrete(value_at(D, grid), np.full(G, 1.0 / G))


# -- quantile <-> value ---------------------------------------------------------

def _quantiles(D: QuantileDistribution, v: np.ndarray) -> np.ndarray:
    # number of support points / breakpoints with value >= v
    count = np.searchsorted(-D.values, -v, side="right")
    if D.is_discrete:
        return np.concatenate(([0.0], D.cum))[count]
    vs, qs = D.values, D.qs
    out = np.where(count >= vs.size, 1.0, 0.0)
    mid = (count > 0) & (count < vs.size)
    if np.any(mid):
        i = count[mid] - 1
        v_hi, v_lo = vs[i], vs[i + 1]
        frac = (v_hi - v[mid]) / (v_hi - v_lo)
        out[mid] = qs[i] + frac * (qs[i + 1] - qs[i])
    return out


def quantile_of(D: QuantileDistribution, v: ArrayLike):
    """Pr[X >= v] for X ~ D; scalar in, float out."""
    arr = np.asarray(v, dtype=np.float64)
    out = _quantiles(D, np.atleast_1d(arr).ravel())
    return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)


def value_at(D: QuantileDistribution, q: ArrayLike):
    """Value whose quantile interval (q_prev, q_this] contains q (Discrete) or v(q) (Curve)."""
    arr = np.asarray(q, dtype=np.float64)
    flat = np.atleast_1d(arr).ravel()
    if np.any(flat == 0):
        raise InvalidDistributionError("quantile zero has no witness value")
    if np.any(flat < 0) or np.any(flat > 1.0 + settings.TOL):
        raise InvalidDistributionError("quantile must lie in (0, 1]")
    flat = np.minimum(flat, 1.0)
    if D.is_discrete:
        idx = np.minimum(np.searchsorted(D.cum, flat, side="left"), D.size - 1)
        out = D.values[idx]
    else:
        out = np.interp(flat, D.qs, D.values)
    return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)


def sample_values(D: QuantileDistribution, rng: np.random.Generator, size: int) -> np.ndarray:
    """I.i.d. draws by inverse-quantile sampling with q uniform on (0, 1]."""
    return np.atleast_1d(value_at(D, 1.0 - rng.random(size)))


# -- truncation operators -------------------------------------------------------

def remap_quantiles(D: QuantileDistribution,
                    g: Callable[[np.ndarray], np.ndarray]) -> QuantileDistribution:
    """Apply a nondecreasing quantile map to every positive support value.

    The new quantile of support value v > 0 is ``g(q_D(v))``; the mass left
    over goes to value 0.
    """
    require_discrete(D, "remap_quantiles")
    positive = D.values > 0
    if not np.any(positive):
        return D
    vals = D.values[positive]
    new_cum = np.clip(np.asarray(g(D.cum[positive]), dtype=np.float64), 0.0, 1.0)
    new_cum = np.maximum.accumulate(new_cum)
    masses = np.diff(new_cum, prepend=0.0)
    rest = max(0.0, 1.0 - float(new_cum[-1]))
    return QuantileDistribution.discrete(np.append(vals, 0.0), np.append(masses, rest))


def truncate_tail(D: QuantileDistribution, theta: float) -> QuantileDistribution:
    """Round every value whose quantile exceeds theta down to 0.

    Discrete only; curves raise DiscretizationRequiredError, run discretize first.
    """
    if not 0.0 <= theta <= 1.0:
        raise InvalidDistributionError("theta must lie in [0, 1]")
    return remap_quantiles(D, lambda c: np.minimum(c, theta))


def truncate_bottom(D: QuantileDistribution, eps: float) -> QuantileDistribution:
    """Zero out the lowest eps of quantile mass. Discrete only, like truncate_tail."""
    if not 0.0 <= eps <= 1.0:
        raise InvalidDistributionError("eps must lie in [0, 1]")
    return remap_quantiles(D, lambda c: np.minimum(c, 1.0 - eps))


def truncate_top(D: QuantileDistribution, vbar: float) -> QuantileDistribution:
    """Move all mass on values above vbar down to vbar."""
    if vbar < 0:
        raise InvalidDistributionError("truncation value must be nonnegative")
    if vbar >= D.values.max():
        return D
    if D.is_discrete:
        return QuantileDistribution.discrete(np.minimum(D.values, vbar), D.masses)
    vs, qs = D.values, D.qs
    i = int(np.flatnonzero(vs > vbar)[-1])
    if i + 1 < vs.size and vs[i + 1] < vbar:
        q_cross = qs[i] + (vs[i] - vbar) / (vs[i] - vs[i + 1]) * (qs[i + 1] - qs[i])
        if qs[i] < q_cross < qs[i + 1]:
            qs = np.concatenate((qs[:i + 1], [q_cross], qs[i + 1:]))
            vs = np.concatenate((vs[:i + 1], [vbar], vs[i + 1:]))
    return QuantileDistribution.curve(qs, np.minimum(vs, vbar))


# -- stochastic dominance ---------------------------------------------------------

def _probe_values(*dists: QuantileDistribution) -> np.ndarray:
    pts = np.unique(np.concatenate([d.values for d in dists] + [np.zeros(1)]))
    return np.unique(np.concatenate((pts, np.nextafter(pts, np.inf))))


def max_dominance_gap(D: QuantileDistribution, D2: QuantileDistribution) -> float:
    """Largest ``q_{D2}(v) - q_D(v)``; nonpositive iff D dominates D2."""
    pts = _probe_values(D, D2)
    return float(np.max(_quantiles(D2, pts) - _quantiles(D, pts)))


def dominates(D: QuantileDistribution, D2: QuantileDistribution,
              tol: Optional[float] = None) -> bool:
    """First-order stochastic dominance of D over D2."""
    return max_dominance_gap(D, D2) <= (settings.TOL if tol is None else tol)


# -- revenue curves and ironing ---------------------------------------------------

def revenue_curve(D: QuantileDistribution) -> RevenueCurve:
    if D.is_discrete:
        q = np.concatenate(([0.0], D.cum))
        r = np.concatenate(([0.0], D.cum * D.values))
    else:
        q = D.qs.copy()
        r = D.qs * D.values
    return RevenueCurve(q, r)


def iron(curve: RevenueCurve) -> IronedCurve:
    """Upper concave envelope by a monotone-chain scan.

    Collinear interior points are dropped, so consecutive segment slopes are
    strictly decreasing.
    """
    q, r = curve.q, curve.r
    hull: List[int] = []
    for i in range(q.size):
        while len(hull) >= 2:
            o, a = hull[-2], hull[-1]
            cross = (q[a] - q[o]) * (r[i] - r[o]) - (r[a] - r[o]) * (q[i] - q[o])
            if cross >= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    idx = np.asarray(hull)
    return IronedCurve(q[idx], r[idx])


def is_regular(D: QuantileDistribution, tol: float = CONCAVITY_TOL) -> bool:
    """True when the revenue curve is already concave (slopes nonincreasing)."""
    curve = revenue_curve(D)
    slopes = np.diff(curve.r) / np.diff(curve.q)
    if slopes.size < 2:
        return True
    scale = max(1.0, float(np.max(np.abs(slopes))))
    return bool(np.all(np.diff(slopes) <= tol * scale))


def ironed_virtuals(D: QuantileDistribution) -> np.ndarray:
    """Ironed virtual value of every support value, aligned with ``D.values``."""
    require_discrete(D, "ironed_virtuals")
    hull = iron(revenue_curve(D))
    return hull.slopes[hull.segment_of(D.cum)]


def ironed_virtual(D: QuantileDistribution, v: float) -> float:
    """Slope of the ironed revenue curve at the quantile of v rounded down to the support."""
    if v < 0:
        raise InvalidDistributionError("value must be nonnegative")
    if D.is_discrete:
        phis = ironed_virtuals(D)
        above = int(np.searchsorted(-D.values, -v, side="left"))  # support values > v
        if above >= D.size:
            return float(phis[-1])
        return float(phis[above])
    hull = iron(revenue_curve(D))
    return float(hull.slopes[hull.segment_of(quantile_of(D, v))])
