import math
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.config import settings
from app.core.exceptions import ExperimentIOError, InvalidDistributionError
from app.services.analysis import KLGapSweep, KLScalingTable
from app.services.learners import LearnerKind, LearnResult, ShadeParams
from app.services.myerson import BuyerTable, RevenueMode
from app.services.oracle import OracleMode
from app.services.quantile_dist import Family, ProductPrior, QuantileDistribution

if TYPE_CHECKING:
    from app.services.bench_service import LearnRun


# ---------------------------------------------------------------------------
# Prior wire format
# ---------------------------------------------------------------------------

class SupportPoint(BaseModel):
    """One point mass of a discrete prior"""
    value: float = Field(..., ge=0, description="Support value", examples=[0.5])
    mass: float = Field(..., ge=0, le=1, description="Probability of the value", examples=[0.25])


class Breakpoint(BaseModel):
    """One (quantile, value) breakpoint of a piecewise-linear value curve"""
    q: float = Field(..., ge=0, le=1, description="Quantile Pr[V >= v]", examples=[0.5])
    v: float = Field(..., ge=0, description="Value at the quantile", examples=[1.0])


class DistributionModel(BaseModel):
    """A single buyer's prior"""
    kind: Literal["discrete", "curve"] = Field(..., description="Storage kind")
    support: Optional[List[SupportPoint]] = Field(
        None, description="Point masses, sorted descending by value (discrete only)")
    breakpoints: Optional[List[Breakpoint]] = Field(
        None, description="Curve breakpoints with increasing q (curve only)")

    @model_validator(mode="after")
    def check_payload(self):
        if self.kind == "discrete" and not self.support:
            raise ValueError("discrete distribution needs a nonempty support")
        if self.kind == "curve" and not self.breakpoints:
            raise ValueError("curve distribution needs breakpoints")
        return self

    def to_domain(self) -> QuantileDistribution:
        if self.kind == "discrete":
            return QuantileDistribution.discrete([p.value for p in self.support],
                                                 [p.mass for p in self.support])
        return QuantileDistribution.curve([b.q for b in self.breakpoints],
                                          [b.v for b in self.breakpoints])

    @classmethod
    def from_domain(cls, D: QuantileDistribution) -> "DistributionModel":
        if D.is_discrete:
            return cls(kind="discrete",
                       support=[SupportPoint(value=v, mass=m) for v, m in D.pairs()])
        return cls(kind="curve", breakpoints=[Breakpoint(q=q, v=v) for q, v in D.pairs()])


class ProductPriorModel(BaseModel):
    """Product prior: one distribution per buyer plus a family tag"""
    family: Family = Field(Family.UNKNOWN, description="Distribution family tag")
    H: Optional[float] = Field(None, gt=1, description="Upper value bound for one_to_h priors")
    buyers: List[DistributionModel] = Field(..., min_length=1, description="Per-buyer priors")

    def to_domain(self) -> ProductPrior:
        return ProductPrior(tuple(b.to_domain() for b in self.buyers), self.family, self.H)

    @classmethod
    def from_domain(cls, prior: ProductPrior) -> "ProductPriorModel":
        return cls(family=prior.family, H=prior.H,
                   buyers=[DistributionModel.from_domain(D) for D in prior])


# ---------------------------------------------------------------------------
# API requests / responses
# ---------------------------------------------------------------------------

class GenerateRequest(BaseModel):
    """Request model for random prior generation"""
    family: Family = Field(..., description="Family to generate", examples=["unit01"])
    support_size: int = Field(10, ge=1, le=1000, description="Support points per buyer")
    n: int = Field(1, ge=1, le=64, description="Number of buyers")
    H: Optional[float] = Field(None, gt=1, description="Upper bound for one_to_h", examples=[16])
    seed: int = Field(settings.DEFAULT_SEED, ge=0, description="Generator seed")


class LowerBoundRequest(BaseModel):
    """Request model for a hard-instance prior"""
    kind: Literal["top_triangle", "unit_hill", "geo_hill"] = Field(..., examples=["unit_hill"])
    eps: Optional[float] = Field(None, gt=0, lt=1, description="Hill height scale")
    s: int = Field(0, ge=0, description="Hill position or number of triangle splits")
    index: int = Field(0, ge=0, description="Top-triangle curve index in [0, 2^s)")
    H: Optional[float] = Field(None, gt=1, description="Upper bound for geo_hill")
    max_step: Optional[float] = Field(None, gt=0, description="Densify top-triangle curves")


class RevenueRequest(BaseModel):
    """Expected revenue of the optimal auction for `rule_prior` when values follow `prior`"""
    prior: ProductPriorModel
    rule_prior: Optional[ProductPriorModel] = Field(
        None, description="Prior the auction is built for; defaults to `prior`")
    mode: RevenueMode = Field(RevenueMode.EXACT, description="exact or monte_carlo")
    trials: Optional[int] = Field(None, ge=1, description="Monte Carlo trials")
    seed: int = Field(settings.DEFAULT_SEED, ge=0)


class RevenueResponse(BaseModel):
    revenue: float
    stderr: Optional[float] = None
    reserves: List[Optional[float]] = Field(..., description="Per-buyer reserve of the rule")


class LearnRequest(BaseModel):
    """Request model for running a learner against a known prior"""
    prior: ProductPriorModel
    family: Family = Field(..., description="Family used to pick the budget", examples=["unit01"])
    eps: float = Field(..., gt=0, lt=1, examples=[0.1])
    delta: float = Field(0.0, ge=0, le=1, description="Targeting power")
    H: Optional[float] = Field(None, gt=1)
    seed: int = Field(settings.DEFAULT_SEED, ge=0)
    oracle_mode: OracleMode = Field(OracleMode.EXACT)
    holder_m: int = Field(settings.HOLDER_M, ge=1)
    allow_query: bool = False
    c_log: Optional[float] = Field(None, gt=0)
    L: Optional[float] = Field(None, gt=0)


class ShadeParamsModel(BaseModel):
    """Shading parameters the learner ran with"""
    N: int
    n: int
    L: float
    delta: float
    c_log: float

    @classmethod
    def from_domain(cls, params: ShadeParams) -> "ShadeParamsModel":
        return cls(N=params.N, n=params.n, L=params.L, delta=params.delta, c_log=params.c_log)


class BudgetModel(BaseModel):
    samples: List[int] = Field(..., description="Targeted samples per buyer")
    queries: List[int] = Field(..., description="Targeted queries per buyer")
    total: int
    max_per_buyer: int


class BuyerAuctionSummary(BaseModel):
    """One buyer's row of the learned Myerson auction"""
    buyer: int
    reserve: Optional[float] = Field(None, description="Lowest bid that can win; null if never")
    support_size: int
    eligible: int = Field(..., description="Support points with nonnegative ironed virtual value")

    @classmethod
    def from_table(cls, buyer: int, table: BuyerTable) -> "BuyerAuctionSummary":
        return cls(buyer=buyer, reserve=table.reserve, support_size=int(table.values.size),
                   eligible=int(np.count_nonzero(table.phis >= 0)))


class LearnResponse(BaseModel):
    """Learner output; multi-buyer runs carry the learned prior and auction, single-buyer runs the search trace"""
    learner: LearnerKind
    family: Family
    eps: float
    N: int
    L: float
    params: ShadeParamsModel
    budget: BudgetModel
    reserves: List[Optional[float]]
    auction: List[BuyerAuctionSummary] = Field(default_factory=list)
    learned_prior: Optional[ProductPriorModel] = None
    quantile: Optional[float] = Field(None, description="Quantile of the posted reserve")
    probes: Optional[int] = Field(None, description="Distinct quantiles probed")
    rounds: Optional[int] = Field(None, description="Shrinking rounds of the concave search")
    learned_revenue: Optional[float] = None
    opt_revenue: Optional[float] = None

    @classmethod
    def from_run(cls, run: "LearnRun") -> "LearnResponse":
        choice, result = run.choice, run.result
        multi = isinstance(result, LearnResult)
        params = result.params if multi else choice.params
        fields = dict(
            learner=result.learner,
            family=choice.family,
            eps=choice.eps,
            N=params.N,
            L=params.L,
            params=ShadeParamsModel.from_domain(params),
            budget=BudgetModel(**result.budget.as_dict()),
            reserves=run.reserves,
            learned_revenue=run.learned,
            opt_revenue=run.opt,
        )
        if multi:
            fields["learned_prior"] = ProductPriorModel.from_domain(result.learned_prior)
            fields["auction"] = [BuyerAuctionSummary.from_table(i, t)
                                 for i, t in enumerate(result.rule.tables)]
        else:
            fields.update(quantile=result.quantile, probes=result.probes, rounds=result.rounds)
        return cls(**fields)


class ThresholdRequest(BaseModel):
    prior: ProductPriorModel
    eps: float = Field(..., gt=0, le=1, examples=[0.25])


class ThresholdResponse(BaseModel):
    thetas: List[float]
    phi_star: float
    sum: float
    achieved_ratio: float


class DSKLRequest(BaseModel):
    p: DistributionModel
    q: DistributionModel


class DSKLResponse(BaseModel):
    """JSON has no infinity: one-sided mass is reported as `finite=false` with `dskl=null`"""
    dskl: Optional[float]
    finite: bool


class SandwichRequest(BaseModel):
    """Check D >= E >= d_f(D) buyer by buyer"""
    prior: ProductPriorModel
    learned: ProductPriorModel
    N: int = Field(..., ge=2)
    L: float = Field(1.0, gt=0)
    delta: float = Field(0.0, ge=0, le=1)
    regime: LearnerKind = Field(LearnerKind.PINPOINT)


class SandwichBuyerReport(BaseModel):
    buyer: int
    dominates_upper: bool
    dominates_lower: bool
    max_violation: float


class KLGapRequest(BaseModel):
    """Either one explicit prior pair or a sweep over generated (prior, perturbed prior) pairs"""
    p: Optional[ProductPriorModel] = None
    q: Optional[ProductPriorModel] = None
    family: Family = Field(Family.UNIT01, description="Family of the generated pairs")
    n: int = Field(2, ge=1, le=16)
    support_size: int = Field(5, ge=1, le=200)
    fixtures: int = Field(100, ge=1, le=1000, description="Generated pairs")
    scale: float = Field(0.05, ge=0, description="Mass perturbation scale")
    H: Optional[float] = Field(None, gt=1)
    K: float = Field(100.0, gt=0, description="Sample count; the divergence threshold is c/K")
    alpha: float = Field(0.05, gt=0)
    c: float = Field(1.0, gt=0)
    seed: int = Field(settings.DEFAULT_SEED, ge=0)

    @model_validator(mode="after")
    def pair_is_complete(self):
        if (self.p is None) != (self.q is None):
            raise ValueError("give both p and q, or neither")
        return self


class KLGapResponse(BaseModel):
    fixtures: int
    threshold: float
    below_threshold: int
    passed: int
    pass_rate: float = Field(..., description="Share of below-threshold pairs with gap <= 2 alpha")
    max_gap: float
    max_dskl: Optional[float] = Field(None, description="Largest finite divergence seen")

    @classmethod
    def from_sweep(cls, sweep: KLGapSweep) -> "KLGapResponse":
        finite = [r.dskl for r in sweep.reports if math.isfinite(r.dskl)]
        return cls(fixtures=len(sweep.reports), threshold=sweep.reports[0].threshold,
                   below_threshold=sweep.below_threshold, passed=sweep.passed,
                   pass_rate=sweep.pass_rate, max_gap=sweep.max_gap,
                   max_dskl=max(finite) if finite else None)


class KLScalingRequest(BaseModel):
    distribution: DistributionModel
    thetas: List[float] = Field(..., min_length=1, examples=[[0.1, 0.5, 1.0]])
    Ns: List[int] = Field(..., min_length=1, examples=[[32, 64, 128]])
    n: int = Field(1, ge=1)

    @field_validator("thetas")
    @classmethod
    def thetas_in_range(cls, v):
        if any(not 0.0 < t <= 1.0 for t in v):
            raise ValueError("thetas must lie in (0, 1]")
        return v

    @field_validator("Ns")
    @classmethod
    def budgets_at_least_two(cls, v):
        if any(N < 2 for N in v):
            raise ValueError("every N must be at least 2")
        return v


class KLScalingRow(BaseModel):
    theta: float
    N: int
    dskl: float
    C: float = Field(..., description="dskl / (theta/N^2 + 1/(N^2 n))")


class KLScalingResponse(BaseModel):
    rows: List[KLScalingRow]
    ratios: Dict[str, List[Optional[float]]] = Field(
        ..., description="Successive dskl ratios per theta; null where the next value is zero")
    fitted_constant: float

    @classmethod
    def from_table(cls, table: KLScalingTable) -> "KLScalingResponse":
        return cls(
            rows=[KLScalingRow(**row) for row in table.rows],
            ratios={repr(theta): [r if math.isfinite(r) else None for r in values]
                    for theta, values in table.ratios.items()},
            fitted_constant=table.fitted_constant,
        )


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

SUITES = (
    "sandwich", "pinpoint", "interval", "hybrid",
    "single-concave", "single-grid", "single-geometric",
    "lowerbound-unit-hill", "lowerbound-geo-hill", "lowerbound-top-triangle",
)


class ExperimentConfig(BaseModel):
    """One bench run; fields may come from CLI flags, a YAML/JSON file or the API"""
    suite: str = Field(..., description="Experiment suite", examples=["sandwich"])
    family: Family = Field(Family.UNIT01)
    eps: float = Field(0.1, gt=0, lt=1)
    delta: float = Field(0.0, ge=0, le=1)
    n: int = Field(1, ge=1)
    trials: int = Field(10, ge=1)
    seed: int = Field(settings.DEFAULT_SEED, ge=0)
    support_size: int = Field(10, ge=1)
    H: Optional[float] = Field(None, gt=1)
    N: Optional[int] = Field(None, ge=2, description="Fixed budget scale; chosen from eps otherwise")
    k: int = Field(10, ge=0, description="Query limit of the lower-bound learner")
    splits: int = Field(3, ge=0, le=8, description="Top-triangle splits s; 2^s candidate curves")
    oracle_mode: OracleMode = Field(OracleMode.EXACT)
    holder_m: int = Field(settings.HOLDER_M, ge=1)
    c_log: Optional[float] = Field(None, gt=0)
    L: Optional[float] = Field(None, gt=0)
    c_bound: Optional[float] = Field(None, gt=0)
    out: Optional[str] = Field(None, description="Output path stem for .csv/.json")

    @field_validator("suite")
    @classmethod
    def known_suite(cls, v):
        if v not in SUITES:
            raise ValueError(f"unknown suite '{v}', expected one of {', '.join(SUITES)}")
        return v

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ExperimentIOError(path, e.strerror or str(e)) from e
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise InvalidDistributionError(f"{path}: not valid YAML/JSON: {e}") from e
        return cls.model_validate(data)


class TrialRecord(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    trial: int
    opt: float
    learned: float
    ratio: float
    gap: float
    budget: int
    passed: bool = Field(..., alias="pass")
    ms: float


class ExperimentSummary(BaseModel):
    trials: int
    pass_rate: float
    mean_ratio: float
    mean_gap: float
    max_gap: float
    mean_budget: float
    max_budget: int


class ExperimentReport(BaseModel):
    config: ExperimentConfig
    records: List[TrialRecord]
    summary: ExperimentSummary
