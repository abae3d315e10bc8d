"""Command-line front end: prior generation, learning, analysis and bench suites."""
import json
import math
from pathlib import Path
from typing import Optional

import click
from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import AuctionLearningError, ExperimentIOError
from app.core.logging import configure_logging
from app.models.schemas import (
    SUITES,
    ExperimentConfig,
    KLGapResponse,
    KLScalingResponse,
    LearnResponse,
)
from app.services.analysis import (
    bernstein_bound,
    bernstein_coverage,
    dskl,
    kl_gap_sweep,
    kl_scaling,
    theta_thresholds,
    verify_sandwich,
)
from app.services.bench_service import bench_service
from app.services.generators import LowerBoundKind, gen_family, gen_lowerbound, kl_fixture_pairs
from app.services.learners import LearnerKind, ShadeParams
from app.services.oracle import OracleConfig, OracleMode
from app.services.prior_io import dumps_prior, load_prior, save_prior
from app.services.quantile_dist import Family, discretize

FAMILIES = [f.value for f in Family if f is not Family.UNKNOWN]
SANDWICH_REGIMES = [k.value for k in (LearnerKind.PINPOINT, LearnerKind.INTERVAL, LearnerKind.HYBRID)]


class DomainErrorGroup(click.Group):
    """Reports domain errors as click usage failures instead of tracebacks"""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (AuctionLearningError, ValidationError) as e:
            raise click.ClickException(str(e)) from e


def _emit(data) -> None:
    click.echo(json.dumps(data, indent=2))


def _write_or_echo(prior, out: Optional[str]) -> None:
    if out:
        save_prior(prior, out)
        click.echo(f"wrote {out}")
    else:
        click.echo(dumps_prior(prior))


@click.group(cls=DomainErrorGroup)
@click.option("--log-level", default=None, help="Logging level (defaults to LOG_LEVEL).")
def cli(log_level):
    """Learn near-optimal auctions from targeted samples."""
    configure_logging(log_level)


@cli.command()
@click.option("--family", type=click.Choice(FAMILIES), required=True)
@click.option("--support-size", default=10, show_default=True, type=click.IntRange(min=1))
@click.option("--n", "n", default=1, show_default=True, type=click.IntRange(min=1))
@click.option("--H", "H", default=None, type=float, help="Upper value bound for one_to_h.")
@click.option("--seed", default=settings.DEFAULT_SEED, show_default=True, type=click.IntRange(min=0))
@click.option("--out", default=None, help="Prior JSON path; printed when omitted.")
def gen(family, support_size, n, H, seed, out):
    """Generate a random prior of a family."""
    _write_or_echo(gen_family(family, support_size, n, H, seed), out)


@cli.command()
@click.option("--kind", type=click.Choice([k.value for k in LowerBoundKind]), required=True)
@click.option("--eps", default=None, type=float)
@click.option("--s", "s", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--index", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--H", "H", default=None, type=float)
@click.option("--max-step", default=None, type=float, help="Densify top-triangle curves.")
@click.option("--out", default=None)
def lowerbound(kind, eps, s, index, H, max_step, out):
    """Build a hard-instance curve prior."""
    _write_or_echo(gen_lowerbound(kind, eps, s, index, H, max_step), out)


@cli.command()
@click.option("--prior", "prior_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--family", type=click.Choice(FAMILIES), required=True)
@click.option("--eps", required=True, type=float)
@click.option("--delta", default=0.0, show_default=True, type=click.FloatRange(0.0, 1.0))
@click.option("--n", "n", default=None, type=click.IntRange(min=1),
              help="Expected number of buyers; the prior file fixes n, this only checks it.")
@click.option("--seed", default=settings.DEFAULT_SEED, show_default=True, type=click.IntRange(min=0))
@click.option("--oracle-mode", type=click.Choice([m.value for m in OracleMode]),
              default=OracleMode.EXACT.value, show_default=True)
@click.option("--holder-m", default=settings.HOLDER_M, show_default=True, type=click.IntRange(min=1))
@click.option("--allow-query", is_flag=True, help="Permit exact queries at positive delta.")
@click.option("--c-log", default=None, type=float)
@click.option("--L", "L", default=None, type=float)
@click.option("--H", "H", default=None, type=float)
@click.option("--out", default=None,
              help="Write the full result (params, budget, auction, learned prior) as JSON.")
def learn(prior_path, family, eps, delta, n, seed, oracle_mode, holder_m, allow_query, c_log, L, H,
          out):
    """Run the learner chosen for (family, eps, n, delta) against a prior file."""
    prior = load_prior(prior_path)
    if n is not None and n != prior.n:
        raise click.BadParameter(f"prior has {prior.n} buyers, expected {n}", param_hint="--n")
    config = OracleConfig(delta=delta, mode=OracleMode(oracle_mode), holder_m=holder_m,
                          seed=seed, allow_query=allow_query)
    run = bench_service.learn_prior(prior, Family(family), eps, config, c_log=c_log, L=L, H=H)
    response = LearnResponse.from_run(run)
    if out:
        path = Path(out)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(response.model_dump_json(indent=2) + "\n", encoding="utf-8")
        except OSError as e:
            raise ExperimentIOError(path, e.strerror or str(e)) from e
    _emit(response.model_dump(mode="json", exclude={"learned_prior"}))


@cli.group()
def analyze():
    """Threshold, divergence, concentration, KL-gap and sandwich checks."""


@analyze.command()
@click.option("--prior", "prior_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--eps", required=True, type=float)
def thresholds(prior_path, eps):
    """Quantile thresholds keeping a (1 - eps) share of opt."""
    vec = theta_thresholds(load_prior(prior_path), eps)
    _emit({"thetas": list(vec.thetas), "phi_star": vec.phi_star, "sum": vec.sum,
           "bound": math.log(1.0 / eps) + 1.0, "achieved_ratio": vec.achieved_ratio})


@analyze.command(name="dskl")
@click.option("--p", "p_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--q", "q_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--buyer", default=0, show_default=True, type=click.IntRange(min=0))
def dskl_command(p_path, q_path, buyer):
    """Symmetric KL divergence between one buyer of two prior files."""
    p, q = load_prior(p_path), load_prior(q_path)
    if buyer >= min(p.n, q.n):
        raise click.BadParameter(f"buyer {buyer} not present in both priors", param_hint="--buyer")
    d = dskl(p[buyer], q[buyer])
    _emit({"dskl": d if math.isfinite(d) else None, "finite": math.isfinite(d)})


@analyze.command()
@click.option("--q", "q", required=True, type=float, help="Quantile inside [a, b].")
@click.option("--a", "a", default=0.0, show_default=True, type=float)
@click.option("--b", "b", default=1.0, show_default=True, type=float)
@click.option("--N", "N", required=True, type=click.IntRange(min=1))
@click.option("--L", "L", default=3.0, show_default=True, type=float)
@click.option("--prior", "prior_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Also measure empirical coverage on buyer 0 of this prior.")
@click.option("--trials", default=200, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=settings.DEFAULT_SEED, show_default=True, type=click.IntRange(min=0))
def bernstein(q, a, b, N, L, prior_path, trials, seed):
    """Interval Bernstein deviation bound, optionally with measured coverage."""
    data = {"bound": bernstein_bound(q, a, b, N, L)}
    if prior_path:
        D = load_prior(prior_path)[0]
        data["coverage"] = bernstein_coverage(D, N, L, trials, seed=seed, interval=(a, b))
    _emit(data)


@analyze.command(name="kl-gap")
@click.option("--p", "p_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Check one explicit pair instead of generated fixtures.")
@click.option("--q", "q_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--family", type=click.Choice(FAMILIES), default=Family.UNIT01.value, show_default=True)
@click.option("--n", "n", default=2, show_default=True, type=click.IntRange(min=1))
@click.option("--support-size", default=5, show_default=True, type=click.IntRange(min=1))
@click.option("--fixtures", default=100, show_default=True, type=click.IntRange(min=1))
@click.option("--scale", default=0.05, show_default=True, type=click.FloatRange(min=0.0))
@click.option("--H", "H", default=None, type=float)
@click.option("--K", "K", default=100.0, show_default=True, type=float)
@click.option("--alpha", default=0.05, show_default=True, type=float)
@click.option("--c", "c", default=1.0, show_default=True, type=float)
@click.option("--seed", default=settings.DEFAULT_SEED, show_default=True, type=click.IntRange(min=0))
def kl_gap(p_path, q_path, family, n, support_size, fixtures, scale, H, K, alpha, c, seed):
    """Share of prior pairs within c/K symmetric KL whose opt gap is at most 2 alpha."""
    if (p_path is None) != (q_path is None):
        raise click.UsageError("give both --p and --q, or neither")
    if p_path:
        pairs = [(load_prior(p_path), load_prior(q_path))]
    else:
        pairs = kl_fixture_pairs(family, n, support_size, fixtures, scale, H, seed)
    _emit(KLGapResponse.from_sweep(kl_gap_sweep(pairs, K, alpha, c)).model_dump(mode="json"))


@analyze.command(name="kl-scaling")
@click.option("--prior", "prior_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--buyer", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--theta", "thetas", multiple=True, type=click.FloatRange(0.0, 1.0, min_open=True),
              help="Truncation quantile; repeatable.")
@click.option("--N", "Ns", multiple=True, type=click.IntRange(min=2), help="Budget scale; repeatable.")
@click.option("--n", "n", default=1, show_default=True, type=click.IntRange(min=1))
def kl_scaling_command(prior_path, buyer, thetas, Ns, n):
    """dskl(D_theta, d_f(D_theta)) over a (theta, N) grid with the fitted constant."""
    prior = load_prior(prior_path)
    if buyer >= prior.n:
        raise click.BadParameter(f"prior has {prior.n} buyers", param_hint="--buyer")
    table = kl_scaling(discretize(prior[buyer]), thetas or (0.1, 0.5, 1.0), Ns or (32, 64, 128), n)
    _emit(KLScalingResponse.from_table(table).model_dump(mode="json"))


def _load_learned(path: str):
    """A prior file, or a ``learn --out`` result together with its shading parameters."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except ValueError as e:
        raise click.BadParameter(f"{path}: not valid JSON: {e}", param_hint="--learned") from e
    if isinstance(data, dict) and "learned_prior" in data:
        result = LearnResponse.model_validate(data)
        if result.learned_prior is None:
            raise click.BadParameter("single-buyer results carry no learned prior",
                                     param_hint="--learned")
        return result.learned_prior.to_domain(), result
    return load_prior(path), None


@analyze.command()
@click.option("--prior", "prior_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--learned", "learned_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Learned prior file or the JSON written by learn --out.")
@click.option("--N", "N", default=None, type=click.IntRange(min=2))
@click.option("--L", "L", default=None, type=float)
@click.option("--delta", default=None, type=click.FloatRange(0.0, 1.0))
@click.option("--regime", type=click.Choice(SANDWICH_REGIMES), default=None)
def sandwich(prior_path, learned_path, N, L, delta, regime):
    """Check D >= learned >= d_f(D) for every buyer."""
    prior = load_prior(prior_path)
    learned, result = _load_learned(learned_path)
    if learned.n != prior.n:
        raise click.BadParameter(f"learned prior has {learned.n} buyers, prior has {prior.n}",
                                 param_hint="--learned")
    if result is not None:
        N = N or result.params.N
        L = L or result.params.L
        delta = result.params.delta if delta is None else delta
        regime = regime or result.learner.value
    if N is None:
        raise click.UsageError("give --N or a learn result carrying its parameters")
    params = ShadeParams(N=N, n=prior.n, L=L or 1.0, delta=delta or 0.0)
    reports = [verify_sandwich(D, E, params, LearnerKind(regime or LearnerKind.PINPOINT.value))
               for D, E in zip(prior, learned)]
    _emit({
        "ok": all(r.ok for r in reports),
        "buyers": [{"buyer": i, "dominates_upper": r.dominates_upper,
                    "dominates_lower": r.dominates_lower, "max_violation": r.max_violation}
                   for i, r in enumerate(reports)],
    })


@cli.command()
@click.option("--suite", type=click.Choice(SUITES), default=None)
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="YAML or JSON experiment config; flags override its fields.")
@click.option("--family", type=click.Choice(FAMILIES), default=None)
@click.option("--eps", default=None, type=float)
@click.option("--delta", default=None, type=float)
@click.option("--n", "n", default=None, type=int)
@click.option("--trials", default=None, type=int)
@click.option("--seed", default=None, type=int)
@click.option("--N", "N", default=None, type=int, help="Fixed budget scale.")
@click.option("--k", "k", default=None, type=int, help="Query limit of the lower-bound learner.")
@click.option("--splits", default=None, type=int, help="Top-triangle splits for lowerbound-top-triangle.")
@click.option("--H", "H", default=None, type=float)
@click.option("--oracle-mode", type=click.Choice([m.value for m in OracleMode]), default=None)
@click.option("--holder-m", default=None, type=int)
@click.option("--c-log", default=None, type=float)
@click.option("--L", "L", default=None, type=float)
@click.option("--c-bound", default=None, type=float)
@click.option("--workers", default=None, type=click.IntRange(min=1))
@click.option("--out", default=None, help="Output stem; writes <out>.csv and <out>.json.")
def bench(suite, config_path, workers, **overrides):
    """Run an experiment suite and write its CSV/JSON report."""
    data = {}
    if config_path:
        data = ExperimentConfig.from_file(config_path).model_dump(exclude_unset=True)
    if suite:
        data["suite"] = suite
    if "suite" not in data:
        raise click.UsageError("give --suite or a --config naming one")
    data.update({key: value for key, value in overrides.items() if value is not None})
    config = ExperimentConfig.model_validate(data)
    report = bench_service.run_experiment(config, workers=workers)
    csv_path, json_path = bench_service.write_report(report, config.out)
    summary = report.summary
    click.echo(f"{config.suite}: {summary.trials} trials, pass rate {summary.pass_rate:.4f}, "
               f"mean ratio {summary.mean_ratio:.6g}, max budget {summary.max_budget}")
    click.echo(f"wrote {csv_path} and {json_path}")


@cli.command()
@click.option("--host", default=settings.HOST, show_default=True)
@click.option("--port", default=settings.PORT, show_default=True, type=int)
@click.option("--reload", is_flag=True, default=settings.DEBUG)
def serve(host, port, reload):
    """Start the HTTP service."""
    import uvicorn
    uvicorn.run("main:app", host=host, port=port, reload=reload)


if __name__ == "__main__":
    cli()
