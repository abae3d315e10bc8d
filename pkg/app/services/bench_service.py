import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from app.core.config import settings
from app.core.exceptions import EnumerationLimitError, ExperimentIOError, FamilyError, RegimeError
from app.models.schemas import (
    ExperimentConfig,
    ExperimentReport,
    ExperimentSummary,
    TrialRecord,
)
from app.services.analysis import verify_sandwich
from app.services.generators import (
    gen_family,
    gen_single_curve,
    geo_hill,
    geo_hill_count,
    geo_hill_peak,
    geo_hill_query_learner,
    hill_query_learner,
    triangle_candidates,
    triangle_query_learner,
    unit_hill,
    unit_hill_count,
    unit_hill_peak,
)
from app.services.learners import (
    LearnResult,
    ParamChoice,
    SingleBuyerResult,
    choose_params,
    learn_hybrid,
    learn_interval,
    learn_pinpoint,
    pinpoint_bound,
    run_learner,
)
from app.services.myerson import (
    RevenueMode,
    build_auction,
    expected_revenue,
    opt_revenue,
    posted_price_revenue,
)
from app.services.oracle import OracleConfig, TargetedOracle
from app.services.quantile_dist import Family, ProductPrior, QuantileDistribution, discretize

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("trial", "opt", "learned", "ratio", "gap", "budget", "pass", "ms")

# (opt, learned, budget, passed)
Outcome = Tuple[float, float, int, bool]


def trial_seed(seed: int, trial: int) -> int:
    """Per-trial seed derived from (master seed, trial index)."""
    return int(np.random.SeedSequence([seed, trial]).generate_state(1)[0])


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    return repr(float(x)) if isinstance(x, float) else str(x)


def as_discrete(prior: ProductPrior) -> ProductPrior:
    """Curve buyers replaced by their DISCRETIZE_GRID discretization."""
    if prior.is_discrete:
        return prior
    return prior.with_buyers([D if D.is_discrete else discretize(D, settings.DISCRETIZE_GRID)
                              for D in prior])


def revenue_on(rule_prior: ProductPrior, prior: ProductPrior, seed: int = 0) -> float:
    """Exact revenue of Myerson's auction for `rule_prior` on `prior`; Monte Carlo above the cap."""
    rule = build_auction(rule_prior)
    try:
        return expected_revenue(rule, prior).revenue
    except EnumerationLimitError:
        logger.info("revenue above the enumeration cap, using Monte Carlo")
        return expected_revenue(rule, prior, RevenueMode.MONTE_CARLO, seed=seed).revenue


@dataclass(frozen=True, eq=False)
class LearnRun:
    choice: ParamChoice
    result: Union[LearnResult, SingleBuyerResult]
    opt: float
    learned: float

    @property
    def reserves(self) -> List[Optional[float]]:
        if isinstance(self.result, LearnResult):
            return self.result.rule.reserves()
        return [self.result.reserve]


class BenchService:
    """Runs experiment suites and writes their reports"""

    def __init__(self):
        self._suites: Dict[str, Callable[[ExperimentConfig, int], Outcome]] = {
            "sandwich": self._sandwich_trial,
            "pinpoint": self._multi_buyer_trial,
            "interval": self._multi_buyer_trial,
            "hybrid": self._multi_buyer_trial,
            "single-concave": self._single_concave_trial,
            "single-grid": self._single_grid_trial,
            "single-geometric": self._single_geometric_trial,
            "lowerbound-unit-hill": self._unit_hill_trial,
            "lowerbound-geo-hill": self._geo_hill_trial,
            "lowerbound-top-triangle": self._top_triangle_trial,
        }
        self._hills: Dict[tuple, QuantileDistribution] = {}

    # -- helpers ------------------------------------------------------------

    def _oracle(self, config: ExperimentConfig, prior: ProductPrior, seed: int,
                delta: Optional[float] = None) -> TargetedOracle:
        return TargetedOracle(prior, OracleConfig(
            delta=config.delta if delta is None else delta,
            mode=config.oracle_mode,
            holder_m=config.holder_m,
            seed=seed,
        ))

    def _prior(self, config: ExperimentConfig, seed: int, n: Optional[int] = None,
               family: Optional[Family] = None) -> ProductPrior:
        family = family or config.family
        H = config.H if family is Family.ONE_TO_H else None
        if family is Family.ONE_TO_H and H is None:
            H = 16.0
        return gen_family(family, config.support_size, n or config.n, H, seed)

    @staticmethod
    def _passes(family: Family, eps: float, opt: float, learned: float) -> bool:
        if family is Family.UNIT01:
            return learned >= opt - eps - 1e-9
        return learned >= (1.0 - eps) * opt - 1e-9

    # -- suites -------------------------------------------------------------

    def _sandwich_trial(self, config: ExperimentConfig, seed: int) -> Outcome:
        prior = self._prior(config, seed)
        N = config.N or choose_params(config.family, config.eps, prior.n, 0.0,
                                      c_log=config.c_log, H=prior.H).params.N
        result = learn_pinpoint(self._oracle(config, prior, seed, delta=0.0), N)
        ok = all(verify_sandwich(D, E, result.params).ok
                 for D, E in zip(prior, result.learned_prior))
        opt = opt_revenue(prior)
        learned = expected_revenue(result.rule, prior).revenue
        return opt, learned, result.budget.max_per_buyer, ok

    def _multi_buyer_trial(self, config: ExperimentConfig, seed: int) -> Outcome:
        prior = self._prior(config, seed)
        choice = choose_params(config.family, config.eps, prior.n, config.delta,
                               c_log=config.c_log, L=config.L, H=prior.H)
        N = config.N or choice.params.N
        oracle = self._oracle(config, prior, seed)
        if config.suite == "pinpoint":
            result = learn_pinpoint(oracle, N)
        elif config.suite == "interval":
            result = learn_interval(oracle, N, L=config.L)
        else:
            result = learn_hybrid(oracle, N, L=config.L, c_log=config.c_log)
        opt = opt_revenue(prior)
        learned = expected_revenue(result.rule, prior).revenue
        ok = self._passes(config.family, config.eps, opt, learned)
        if config.suite == "pinpoint":
            ok = ok and result.budget.max_per_buyer <= pinpoint_bound(result.params, config.c_bound)
        return opt, learned, result.budget.max_per_buyer, ok

    def _single_concave_trial(self, config: ExperimentConfig, seed: int) -> Outcome:
        if config.family not in (Family.REGULAR, Family.MHR):
            raise FamilyError("single-concave runs on regular or mhr priors")
        D = gen_single_curve(config.family, seed)
        choice = choose_params(config.family, config.eps, 1, config.delta, c_log=config.c_log)
        result = run_learner(self._oracle(config, ProductPrior((D,), config.family), seed), choice)
        opt = opt_revenue(ProductPrior((discretize(D, settings.DISCRETIZE_GRID),)))
        learned = posted_price_revenue(D, result.reserve)
        return opt, learned, result.budget.total, self._passes(config.family, config.eps, opt, learned)

    def _single_grid_trial(self, config: ExperimentConfig, seed: int) -> Outcome:
        prior = self._prior(config, seed, n=1, family=Family.UNIT01)
        choice = choose_params(Family.UNIT01, config.eps, 1, config.delta, c_log=config.c_log)
        result = run_learner(self._oracle(config, prior, seed), choice)
        opt = opt_revenue(prior)
        learned = posted_price_revenue(prior[0], result.reserve)
        d = config.eps / 4.0
        e = config.eps / 8.0 if config.delta > 0 else 0.0
        return opt, learned, result.budget.total, learned >= opt - 2 * d - 3 * e - 1e-9

    def _single_geometric_trial(self, config: ExperimentConfig, seed: int) -> Outcome:
        prior = self._prior(config, seed, n=1, family=Family.ONE_TO_H)
        choice = choose_params(Family.ONE_TO_H, config.eps, 1, config.delta,
                               c_log=config.c_log, H=prior.H)
        result = run_learner(self._oracle(config, prior, seed), choice)
        opt = opt_revenue(prior)
        learned = posted_price_revenue(prior[0], result.reserve)
        return opt, learned, result.budget.total, learned >= (1.0 - config.eps) * opt - 1e-9

    def _hill(self, key: tuple, build: Callable[[], QuantileDistribution]) -> QuantileDistribution:
        if key not in self._hills:
            self._hills[key] = build()
        return self._hills[key]

    def _unit_hill_trial(self, config: ExperimentConfig, seed: int) -> Outcome:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        eps = config.eps
        s = int(rng.integers(unit_hill_count(eps)))
        D = self._hill(("unit", eps, s), lambda: unit_hill(eps, s))
        oracle = self._oracle(config, ProductPrior((D,), Family.UNIT01), seed, delta=0.0)
        guess = hill_query_learner(oracle, eps, config.k, rng)
        opt = posted_price_revenue(D, unit_hill_peak(eps, s))
        learned = posted_price_revenue(D, guess.reserve)
        return opt, learned, guess.queries, learned >= opt - eps

    def _geo_hill_trial(self, config: ExperimentConfig, seed: int) -> Outcome:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        eps, H = config.eps, config.H or 16.0
        s = 1 + int(rng.integers(geo_hill_count(eps, H)))
        D = self._hill(("geo", eps, H, s), lambda: geo_hill(eps, H, s))
        oracle = self._oracle(config, ProductPrior((D,), Family.ONE_TO_H, H), seed, delta=0.0)
        guess = geo_hill_query_learner(oracle, eps, H, config.k, rng)
        opt = posted_price_revenue(D, geo_hill_peak(eps, H, s))
        learned = posted_price_revenue(D, guess.reserve)
        return opt, learned, guess.queries, learned >= (1.0 - eps) * opt - 1e-9

    def _top_triangle_trial(self, config: ExperimentConfig, seed: int) -> Outcome:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        candidates = triangle_candidates(config.splits)
        truth = candidates[int(rng.integers(len(candidates)))]
        oracle = self._oracle(config, ProductPrior((truth.curve,), Family.REGULAR), seed, delta=0.0)
        guess = triangle_query_learner(oracle, config.splits, config.k, rng)
        opt = posted_price_revenue(truth.curve, truth.price)
        learned = posted_price_revenue(truth.curve, guess.reserve)
        return opt, learned, guess.queries, learned >= opt - 1e-9

    # -- orchestration ------------------------------------------------------

    def learn_prior(self, prior: ProductPrior, family: Family, eps: float, oracle_config: OracleConfig,
                    c_log: Optional[float] = None, L: Optional[float] = None,
                    H: Optional[float] = None) -> LearnRun:
        """
        Choose parameters, run the selected learner against `prior` and score it

        Args:
            prior: True prior the oracle answers from
            family: Family used to size the budget
            eps: Target accuracy
            oracle_config: Targeting power, oracle mode and seed
            c_log, L, H: Optional overrides for choose_params

        Returns:
            LearnRun with opt(prior) and the learned mechanism's revenue on prior
        """
        choice = choose_params(family, eps, prior.n, oracle_config.delta,
                               c_log=c_log, L=L, H=H or prior.H)
        result = run_learner(TargetedOracle(prior, oracle_config), choice)
        target = as_discrete(prior)
        opt = revenue_on(target, target, oracle_config.seed)
        if isinstance(result, LearnResult):
            learned = revenue_on(result.learned_prior, target, oracle_config.seed)
        else:
            learned = posted_price_revenue(prior[0], result.reserve)
        return LearnRun(choice, result, opt, learned)

    def run_trial(self, config: ExperimentConfig, trial: int) -> TrialRecord:
        start = time.perf_counter()
        opt, learned, budget, passed = self._suites[config.suite](config, trial_seed(config.seed, trial))
        ms = (time.perf_counter() - start) * 1000.0
        ratio = learned / opt if opt > 0 else 1.0
        return TrialRecord(trial=trial, opt=opt, learned=learned, ratio=ratio, gap=opt - learned,
                           budget=int(budget), passed=bool(passed), ms=ms)

    def run_experiment(self, config: ExperimentConfig,
                       workers: Optional[int] = None) -> ExperimentReport:
        """
        Run every trial of a suite and summarize

        Args:
            config: Experiment configuration
            workers: Thread pool size (defaults to BENCH_WORKERS)

        Returns:
            Report with per-trial records sorted by trial index
        """
        if config.suite in ("interval", "hybrid") and config.delta <= 0:
            raise RegimeError(f"suite {config.suite} needs a positive delta")
        logger.info("bench %s: %d trials, family=%s eps=%g delta=%g n=%d seed=%d",
                    config.suite, config.trials, config.family.value, config.eps,
                    config.delta, config.n, config.seed)
        workers = workers or settings.BENCH_WORKERS
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(lambda t: self.run_trial(config, t), range(config.trials)))
        records.sort(key=lambda r: r.trial)
        summary = self.summarize(records)
        logger.info("bench %s: pass rate %.4f, mean ratio %.6g", config.suite,
                    summary.pass_rate, summary.mean_ratio)
        return ExperimentReport(config=config, records=records, summary=summary)

    @staticmethod
    def summarize(records: List[TrialRecord]) -> ExperimentSummary:
        budgets = [r.budget for r in records]
        return ExperimentSummary(
            trials=len(records),
            pass_rate=float(np.mean([r.passed for r in records])),
            mean_ratio=float(np.mean([r.ratio for r in records])),
            mean_gap=float(np.mean([r.gap for r in records])),
            max_gap=float(np.max([r.gap for r in records])),
            mean_budget=float(np.mean(budgets)),
            max_budget=int(np.max(budgets)),
        )

    def write_csv(self, report: ExperimentReport, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(CSV_COLUMNS)
                for r in report.records:
                    writer.writerow([_fmt(r.trial), _fmt(r.opt), _fmt(r.learned), _fmt(r.ratio),
                                     _fmt(r.gap), _fmt(r.budget), _fmt(r.passed), _fmt(r.ms)])
        except OSError as e:
            raise ExperimentIOError(path, e.strerror or str(e)) from e
        return path

    def write_json(self, report: ExperimentReport, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            data = report.model_dump(mode="json", by_alias=True)
            path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
        except OSError as e:
            raise ExperimentIOError(path, e.strerror or str(e)) from e
        return path

    def write_report(self, report: ExperimentReport,
                     out: Optional[Union[str, Path]] = None) -> Tuple[Path, Path]:
        """Write `<out>.csv` and `<out>.json`; `out` defaults to RESULTS_DIR/<suite>"""
        stem = Path(out) if out else Path(settings.RESULTS_DIR) / report.config.suite
        csv_path = self.write_csv(report, stem.with_suffix(".csv"))
        json_path = self.write_json(report, stem.with_suffix(".json"))
        logger.info("wrote %s and %s", csv_path, json_path)
        return csv_path, json_path


# Create singleton instance
bench_service = BenchService()
