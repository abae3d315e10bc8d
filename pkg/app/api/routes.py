import logging
import math
from contextlib import contextmanager
from typing import List

from fastapi import APIRouter, HTTPException

from app.core.exceptions import AuctionLearningError
from app.models.schemas import (
    DistributionModel,
    DSKLRequest,
    DSKLResponse,
    ExperimentConfig,
    ExperimentReport,
    GenerateRequest,
    KLGapRequest,
    KLGapResponse,
    KLScalingRequest,
    KLScalingResponse,
    LearnRequest,
    LearnResponse,
    LowerBoundRequest,
    ProductPriorModel,
    RevenueRequest,
    RevenueResponse,
    SandwichBuyerReport,
    SandwichRequest,
    ThresholdRequest,
    ThresholdResponse,
)
from app.services.analysis import dskl, kl_gap_sweep, kl_scaling, theta_thresholds, verify_sandwich
from app.services.bench_service import bench_service
from app.services.generators import gen_family, gen_lowerbound, kl_fixture_pairs
from app.services.learners import ShadeParams
from app.services.myerson import build_auction, expected_revenue
from app.services.oracle import OracleConfig
from app.services.quantile_dist import discretize

logger = logging.getLogger(__name__)

router = APIRouter()

ERROR_RESPONSES = {
    400: {"description": "Invalid prior, parameters or regime"},
    500: {"description": "Server error while computing"},
}


@contextmanager
def service_errors(action: str):
    """Map domain errors to 400 and anything else to 500"""
    try:
        yield
    except HTTPException:
        raise
    except AuctionLearningError as e:
        logger.info("%s rejected: %s", action, e)
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.exception("%s failed", action)
        raise HTTPException(status_code=500, detail=f"Error during {action}: {str(e)}")


@router.post(
    "/priors/generate",
    response_model=ProductPriorModel,
    summary="Generate a random prior",
    description="Random product prior of a family; every buyer passes the family check",
    responses=ERROR_RESPONSES,
)
def generate_prior(request: GenerateRequest):
    with service_errors("prior generation"):
        prior = gen_family(request.family, request.support_size, request.n, request.H, request.seed)
        return ProductPriorModel.from_domain(prior)


@router.post(
    "/priors/lowerbound",
    response_model=DistributionModel,
    summary="Build a hard-instance prior",
    description="Top-triangle, unit-hill or geometric-hill curve prior",
    responses=ERROR_RESPONSES,
)
def lowerbound_prior(request: LowerBoundRequest):
    with service_errors("lower-bound construction"):
        D = gen_lowerbound(request.kind, request.eps, request.s, request.index, request.H,
                           request.max_step)
        return DistributionModel.from_domain(D)


@router.post(
    "/revenue",
    response_model=RevenueResponse,
    summary="Expected revenue of Myerson's auction",
    responses=ERROR_RESPONSES,
)
def revenue(request: RevenueRequest):
    """
    ## Expected revenue

    Builds the optimal auction for `rule_prior` (or `prior`) and evaluates it on
    values drawn from `prior`, by exact enumeration or Monte Carlo.
    """
    with service_errors("revenue evaluation"):
        prior = request.prior.to_domain()
        rule = build_auction(request.rule_prior.to_domain() if request.rule_prior else prior)
        estimate = expected_revenue(rule, prior, request.mode, request.trials, request.seed)
        return RevenueResponse(revenue=estimate.revenue, stderr=estimate.stderr,
                               reserves=rule.reserves())


@router.post(
    "/learn",
    response_model=LearnResponse,
    summary="Learn an auction from targeted samples",
    responses=ERROR_RESPONSES,
)
def learn(request: LearnRequest):
    """
    ## Run a learner against a known prior

    Parameters are chosen from `(family, eps, n, delta)`; the oracle answers from
    `prior` (or from a data-holder dataset drawn from it). The response carries the
    shading parameters, the budget spent and the learned reserves. Multi-buyer
    learners add the learned prior and a per-buyer auction summary; single-buyer
    learners add the posted quantile and their probe count.
    """
    with service_errors("learning"):
        prior = request.prior.to_domain()
        run = bench_service.learn_prior(prior, request.family, request.eps, OracleConfig(
            delta=request.delta,
            mode=request.oracle_mode,
            holder_m=request.holder_m,
            seed=request.seed,
            allow_query=request.allow_query,
        ), c_log=request.c_log, L=request.L, H=request.H)
        return LearnResponse.from_run(run)


@router.post(
    "/analyze/thresholds",
    response_model=ThresholdResponse,
    summary="Quantile thresholds keeping (1 - eps) of opt",
    responses=ERROR_RESPONSES,
)
def thresholds(request: ThresholdRequest):
    with service_errors("threshold search"):
        vec = theta_thresholds(request.prior.to_domain(), request.eps)
        return ThresholdResponse(thetas=list(vec.thetas), phi_star=vec.phi_star, sum=vec.sum,
                                 achieved_ratio=vec.achieved_ratio)


@router.post(
    "/analyze/dskl",
    response_model=DSKLResponse,
    summary="Symmetric KL divergence of two priors",
    responses=ERROR_RESPONSES,
)
def symmetric_kl(request: DSKLRequest):
    with service_errors("dskl"):
        d = dskl(request.p.to_domain(), request.q.to_domain())
        finite = math.isfinite(d)
        return DSKLResponse(dskl=d if finite else None, finite=finite)


@router.post(
    "/analyze/kl-gap",
    response_model=KLGapResponse,
    summary="Revenue gap of priors within c/K symmetric KL",
    description="Checks |opt(p) - opt(q)| <= 2 alpha on one pair or on generated perturbed pairs",
    responses=ERROR_RESPONSES,
)
def kl_gap(request: KLGapRequest):
    with service_errors("kl gap sweep"):
        if request.p is not None:
            pairs = [(request.p.to_domain(), request.q.to_domain())]
        else:
            pairs = kl_fixture_pairs(request.family, request.n, request.support_size,
                                     request.fixtures, request.scale, request.H, request.seed)
        sweep = kl_gap_sweep(pairs, request.K, request.alpha, request.c)
        return KLGapResponse.from_sweep(sweep)


@router.post(
    "/analyze/kl-scaling",
    response_model=KLScalingResponse,
    summary="Divergence of a truncated prior from its shading",
    description="dskl(D_theta, d_f(D_theta)) per (theta, N) with the fitted scaling constant",
    responses=ERROR_RESPONSES,
)
def kl_scaling_table(request: KLScalingRequest):
    with service_errors("kl scaling"):
        D = discretize(request.distribution.to_domain())
        table = kl_scaling(D, request.thetas, request.Ns, request.n)
        return KLScalingResponse.from_table(table)


@router.post(
    "/analyze/sandwich",
    response_model=List[SandwichBuyerReport],
    summary="Check D >= learned >= d_f(D) per buyer",
    responses=ERROR_RESPONSES,
)
def sandwich(request: SandwichRequest):
    with service_errors("sandwich check"):
        prior = request.prior.to_domain()
        learned = request.learned.to_domain()
        if learned.n != prior.n:
            raise HTTPException(status_code=400,
                                detail=f"learned prior has {learned.n} buyers, prior has {prior.n}")
        params = ShadeParams(N=request.N, n=prior.n, L=request.L, delta=request.delta)
        reports = []
        for i, (D, E) in enumerate(zip(prior, learned)):
            r = verify_sandwich(D, E, params, request.regime)
            reports.append(SandwichBuyerReport(buyer=i, dominates_upper=r.dominates_upper,
                                               dominates_lower=r.dominates_lower,
                                               max_violation=r.max_violation))
        return reports


@router.post(
    "/bench",
    response_model=ExperimentReport,
    summary="Run an experiment suite",
    description="Runs every trial and returns the records; files are written only when `out` is set",
    responses=ERROR_RESPONSES,
)
def bench(config: ExperimentConfig):
    with service_errors("bench"):
        report = bench_service.run_experiment(config)
        if config.out:
            bench_service.write_report(report, config.out)
        return report
