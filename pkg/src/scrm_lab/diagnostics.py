"""Closed-form checks, estimator studies and rate fitting."""
from __future__ import annotations

import math
import statistics
import warnings
from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate
from scipy.stats import norm

from .engine import RUNNERS, RolloutPlan, RunResult, run_many
from .env import EnvSpec, GaussianQuadratic, RiskEstimate, monte_carlo_risk
from .estimators import (
    Variant,
    clipped_ips_value,
    ips_ix_value,
    ips_value,
    order_statistic_clip,
    snips_value,
)
from .objective import ObjectiveConfig
from .optimizer import OptimizerConfig
from .policy import PolicySpec
from .streams import SeedStreams

STUDY_SHIFTS = tuple(i * math.pi / 4 for i in range(5))
STUDY_ESTIMATORS = (Variant.IPS, Variant.SNIPS, Variant.CLIPPED_IPS, Variant.IPS_IX)
SIGMA_GRID = (0.1, 0.3, 1.0, 3.0)
# stand-in grid; the original experiment does not print its distances
DELTA0_GRID = (0.0, 0.5, 1.0, 2.0, 3.0, 4.0)


def gaussian_weight_variance(theta: float, theta_star: float, sigma: float = 1.0) -> float:
    """``Var_{a ~ N(theta, sigma^2)}[pi_theta*(a) / pi_theta(a)] = exp((theta* - theta)^2 / sigma^2) - 1``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return math.expm1((theta_star - theta) ** 2 / sigma**2)


def quadratic_excess_risk(theta: float, theta_star: float) -> float:
    """Excess risk ``(theta - theta*)^2`` of the unclamped quadratic toy loss."""
    return (theta - theta_star) ** 2


@dataclass(frozen=True)
class HolderProbe:
    beta: float
    theta_grid: Tuple[float, ...]
    theta_star: float = 1.0
    sigma: float = 1.0
    gamma: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be positive")
        object.__setattr__(self, "theta_grid", tuple(float(t) for t in self.theta_grid))


def holder_ratio(probe: HolderProbe) -> List[Tuple[float, float]]:
    """``(theta, Var / excess^beta)`` on the probe grid.

    ``1 / max(ratio)`` is the largest admissible gamma for this beta.
    """
    out = []
    for theta in probe.theta_grid:
        excess = quadratic_excess_risk(theta, probe.theta_star)
        if excess <= 0:
            raise ValueError(f"grid point {theta} sits at theta*; the ratio is undefined there")
        var = gaussian_weight_variance(theta, probe.theta_star, probe.sigma)
        out.append((theta, var / excess**probe.beta))
    return out


def holder_gamma(probe: HolderProbe) -> float:
    return 1.0 / max(r for _, r in holder_ratio(probe))


def holder_bound_holds(probe: HolderProbe) -> bool:
    """Whether ``gamma Var <= excess^beta`` on the whole grid."""
    if probe.gamma is None:
        raise ValueError("probe has no gamma to check")
    return all(probe.gamma * r <= 1.0 + 1e-12 for _, r in holder_ratio(probe))


# estimator study on a cosine loss


class StudyRow(NamedTuple):
    shift: float
    estimator: str
    n: int
    replications: int
    bias: float
    variance: float
    truth: float
    bias_stderr: float


def cosine_truth(mean: float, sd: float = 1.0) -> float:
    """``E[cos(a)]`` for ``a ~ N(mean, sd^2)`` by adaptive quadrature over ``+-8 sd``."""
    value, _ = integrate.quad(
        lambda a: math.cos(a) * norm.pdf(a, mean, sd),
        mean - 8 * sd, mean + 8 * sd,
        epsabs=1e-13, epsrel=1e-13, limit=200,
    )
    return value


def _study_estimate(variant: Variant, y, log_w, n: int) -> float:
    w = np.exp(log_w)
    if variant is Variant.IPS:
        return ips_value(y, w)
    if variant is Variant.SNIPS:
        return snips_value(y, w)
    if variant is Variant.CLIPPED_IPS:
        return clipped_ips_value(y, w, order_statistic_clip(w))
    return ips_ix_value(y, log_w, 1.0 / n)


def estimator_study(
    shifts: Sequence[float] = STUDY_SHIFTS,
    estimators: Sequence[Union[str, Variant]] = STUDY_ESTIMATORS,
    n: int = 1000,
    replications: int = 500,
    rng: Union[SeedStreams, int] = 0,
) -> List[StudyRow]:
    """Bias and variance of off-policy estimators of ``E[cos(a)]``.

    Logged actions come from ``N(0, 1)``; the target policy is
    ``N(shift, 1)``. Clipped IPS clips at the 5th largest weight and IPS-IX
    uses ``alpha = 1/n``. Every estimator sees the same draws.
    """
    if replications < 100:
        raise ValueError("the study needs at least 100 replications")
    streams = rng if isinstance(rng, SeedStreams) else SeedStreams(int(rng))
    estimators = [Variant(e) for e in estimators]
    draws = streams.get(0, "study").standard_normal((replications, n))
    y = np.cos(draws)
    rows = []
    for shift in shifts:
        truth = cosine_truth(shift)
        # log N(a; shift, 1) - log N(a; 0, 1)
        log_w = shift * draws - 0.5 * shift**2
        for variant in estimators:
            est = np.array([_study_estimate(variant, y[r], log_w[r], n) for r in range(replications)])
            rows.append(
                StudyRow(
                    shift=shift, estimator=variant.value, n=n, replications=replications,
                    bias=float(est.mean() - truth), variance=float(est.var(ddof=1)), truth=truth,
                    bias_stderr=float(est.std(ddof=1) / math.sqrt(replications)),
                )
            )
    return rows


# rates


def fit_power_law(cum_n: Sequence[float], excess: Sequence[float]) -> Tuple[float, float, float]:
    """Least-squares fit of ``log excess = intercept + slope log n``; returns ``(slope, intercept, r2)``."""
    cum_n = np.asarray(cum_n, dtype=float)
    excess = np.asarray(excess, dtype=float)
    keep = excess > 0
    if not np.all(keep):
        warnings.warn(f"dropping {np.count_nonzero(~keep)} nonpositive excess risks", RuntimeWarning, stacklevel=2)
    lx, ly = np.log(cum_n[keep]), np.log(excess[keep])
    if lx.size < 3:
        raise ValueError("need at least three positive excess risks")
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (intercept + slope * lx)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def rate_slope(results: Union[RunResult, Sequence[RunResult]]) -> Tuple[float, float, float]:
    """Log-log slope of excess risk against cumulative sample size, pooling all given runs."""
    if isinstance(results, RunResult):
        results = [results]
    cum = [rec.cum_n for r in results for rec in r.records]
    exc = [rec.excess_risk for r in results for rec in r.records]
    return fit_power_law(cum, exc)


def mc_risk_oracle(env: EnvSpec, spec: PolicySpec, theta, n: int, rng: np.random.Generator) -> RiskEstimate:
    """On-policy Monte-Carlo risk with standard error."""
    return monte_carlo_risk(env, spec, theta, n, rng)


# distance to the optimum


class SweepCell(NamedTuple):
    delta0: float
    sigma: float
    seed: int
    method: str
    final_loss: float
    final_excess: float


class BestCell(NamedTuple):
    delta0: float
    method: str
    best_sigma: float
    best_final_loss: float


def distance_sweep(
    delta0_grid: Iterable[float] = DELTA0_GRID,
    sigma_grid: Iterable[float] = SIGMA_GRID,
    plan: RolloutPlan = RolloutPlan(rollouts=6),
    seeds: Iterable[int] = range(5),
    methods: Sequence[str] = ("crm", "scrm"),
    theta_star: float = 1.0,
    sigma_star: float = 0.3,
    obj_cfg: ObjectiveConfig = ObjectiveConfig(),
    opt_cfg: OptimizerConfig = OptimizerConfig(),
    threads: int = 1,
) -> Tuple[List[SweepCell], List[BestCell]]:
    """Best final loss of each method as the logging model moves away from theta*.

    The logging model is ``theta* - delta0``. For each ``delta0`` the policy
    width sigma is picked a posteriori: the one with the lowest median final
    loss over seeds (ties to the smaller sigma).
    """
    delta0_grid, sigma_grid, seeds = list(delta0_grid), sorted(sigma_grid), list(seeds)
    if not delta0_grid or not sigma_grid or not seeds:
        raise ValueError("empty sweep grid")
    jobs = {}
    for d0 in delta0_grid:
        for sigma in sigma_grid:
            env = GaussianQuadratic(theta_star=theta_star, sigma_star=sigma_star, theta0=theta_star - d0, policy_sigma=sigma)
            spec = env.default_policy()
            for seed in seeds:
                for method in methods:
                    jobs[(d0, sigma, seed, method)] = (
                        lambda env=env, spec=spec, seed=seed, method=method: RUNNERS[method](
                            env, spec, env.logging_theta(), plan, obj_cfg, opt_cfg, seed
                        )
                    )
    results = run_many(jobs, threads)
    cells = [
        SweepCell(d0, sigma, seed, method, r.final.test_loss, r.final.excess_risk)
        for (d0, sigma, seed, method), r in results.items()
    ]
    best = []
    for d0 in delta0_grid:
        for method in methods:
            medians = [
                (statistics.median(c.final_loss for c in cells if c.delta0 == d0 and c.sigma == s and c.method == method), s)
                for s in sigma_grid
            ]
            loss, sigma = min(medians)
            best.append(BestCell(d0, method, sigma, loss))
    return cells, best
