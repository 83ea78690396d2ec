"""Sequential deploy / collect / learn loops.

``run_scrm`` deploys each freshly learned model to collect the next batch.
``run_crm`` keeps re-deploying the logging model and refits on everything
collected so far. Record ``m`` of a run holds the model learned from the
data available after collecting batch ``m``; that model is the one deployed
on batch ``m + 1``.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, Hashable, Iterable, List, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .env import EnvSpec, RiskEstimate, has_closed_form, monte_carlo_risk, true_risk
from .estimators import Batch, ips_ix_estimate
from .objective import LAMBDA_GRID, ObjectiveConfig, lambda_theoretical
from .optimizer import OptimizerConfig, minimize_objective, project_to_ball, projected_descent
from .policy import PolicySpec, check_params, sample_actions
from .streams import SeedStreams

MAX_BATCH = 2**40


class LambdaRule(str, Enum):
    THEORETICAL = "theoretical"
    FIXED = "fixed"
    CROSS_VALIDATED = "cross_validated"


class AlphaRule(str, Enum):
    INVERSE_N = "inverse_n"
    FIXED = "fixed"


@dataclass(frozen=True)
class RolloutPlan:
    """Batch schedule ``n_m = n0 * growth**m`` for ``m = 0..rollouts`` and learning rules.

    ``pooled`` makes SCRM fit on all batches so far (naive multiple
    importance sampling) instead of the latest one.
    """

    n0: int = 100
    rollouts: int = 10
    growth: int = 2
    lambda_rule: LambdaRule = LambdaRule.THEORETICAL
    lambda_value: float = 0.0
    alpha_rule: AlphaRule = AlphaRule.INVERSE_N
    alpha_value: float = 0.0
    pooled: bool = False
    cv_candidates: tuple = LAMBDA_GRID
    cv_folds: int = 5
    eval_samples: int = 100_000

    def __post_init__(self):
        object.__setattr__(self, "lambda_rule", LambdaRule(self.lambda_rule))
        object.__setattr__(self, "alpha_rule", AlphaRule(self.alpha_rule))
        object.__setattr__(self, "cv_candidates", tuple(float(c) for c in self.cv_candidates))
        if self.n0 < 2:
            raise ValueError("n0 must be at least 2")
        if self.rollouts < 0:
            raise ValueError("rollouts must be nonnegative")
        if self.growth != 2:
            raise ValueError("the batch schedule is geometric with growth 2")
        if self.lambda_value < 0 or self.alpha_value < 0:
            raise ValueError("lambda_value and alpha_value must be nonnegative")
        if self.lambda_rule is LambdaRule.CROSS_VALIDATED and not self.cv_candidates:
            raise ValueError("cross-validation needs candidate lambdas")


def batch_schedule(plan: RolloutPlan) -> List[int]:
    """``[n0, 2 n0, 4 n0, ...]`` of length ``rollouts + 1``."""
    sizes = [plan.n0 * plan.growth**m for m in range(plan.rollouts + 1)]
    if sizes[-1] > MAX_BATCH:
        raise OverflowError(f"batch size {sizes[-1]} exceeds {MAX_BATCH}")
    return sizes


def rollouts_for_budget(n: int, n0: int) -> int:
    """``floor(log2(1 + n / n0))``."""
    m = int(math.floor(math.log2(1 + n / n0)))
    # guard against float rounding at exact powers of two
    while n0 * (2 ** (m + 1)) <= n + n0:
        m += 1
    while m > 0 and n0 * 2**m > n + n0:
        m -= 1
    return m


@dataclass
class RolloutRecord:
    m: int
    n_m: int
    cum_n: int
    lam: float
    alpha: float
    deployed_theta: np.ndarray
    theta: np.ndarray
    test_loss: float
    test_stderr: float
    excess_risk: float
    objective_start: float
    objective_end: float


@dataclass
class RunResult:
    method: str
    seed: int
    records: List[RolloutRecord] = field(default_factory=list)
    reference_loss: float = math.nan
    wall_clock: float = 0.0

    @property
    def total_samples(self) -> int:
        return self.records[-1].cum_n if self.records else 0

    @property
    def final(self) -> RolloutRecord:
        return self.records[-1]

    @property
    def regret(self) -> float:
        return expected_regret(self)

    def regret_partial(self) -> List[float]:
        out, acc = [], 0.0
        for rec in self.records:
            acc += rec.excess_risk * 2 * rec.n_m
            out.append(acc)
        return out


class RunError(RuntimeError):
    """A rollout failed; ``partial`` holds the records gathered so far."""

    def __init__(self, message: str, partial: RunResult):
        super().__init__(message)
        self.partial = partial


def expected_regret(result: RunResult) -> float:
    """``sum_m excess_m * n_{m+1}`` with ``n_{M+1} = 2 n_M``."""
    return math.fsum(rec.excess_risk * 2 * rec.n_m for rec in result.records)


def collect_batch(env: EnvSpec, spec: PolicySpec, theta, n: int, streams: SeedStreams, m: int) -> Batch:
    """Deploy ``theta`` for ``n`` interactions of rollout ``m``.

    Contexts, actions and losses use separate streams so that runs sharing a
    seed see identical context and loss noise whatever ``theta`` is.
    """
    X = env.sample_contexts(n, streams.get(m, "context"))
    A, log_p = sample_actions(spec, theta, X, streams.get(m, "action"))
    y = env.sample_losses(X, A, streams.get(m, "loss"))
    return Batch(X, A, y, log_p, np.asarray(theta, dtype=float).copy(), m)


def evaluate(env: EnvSpec, spec: PolicySpec, theta, streams: SeedStreams, m: int, n: int) -> RiskEstimate:
    """Test risk: closed form when available, else Monte-Carlo on the eval stream."""
    if has_closed_form(env):
        return true_risk(env, spec, theta, "closed_form")
    return monte_carlo_risk(env, spec, theta, n, streams.get(m, "eval"))


def reference_loss(env: EnvSpec, spec: PolicySpec, skyline_theta=None, n: int = 100_000, seed: int = 0) -> float:
    """``L(theta*)``: exact when the optimum is known, else the skyline's risk."""
    theta_star = env.optimal_model()
    if theta_star is not None and has_closed_form(env):
        return true_risk(env, spec, theta_star, "closed_form").value
    if skyline_theta is None:
        return math.nan
    return monte_carlo_risk(env, spec, skyline_theta, n, SeedStreams(seed).get(0, "eval")).value


def excess_risk(env: EnvSpec, spec: PolicySpec, theta, reference: Optional[float] = None) -> float:
    """``L(theta) - L(theta*)`` for environments with a closed-form risk."""
    if reference is None:
        reference = reference_loss(env, spec)
    if not math.isfinite(reference):
        raise ValueError(f"{env.kind}: no reference risk; compute a skyline first")
    return true_risk(env, spec, theta, "closed_form").value - reference


def _alpha(plan: RolloutPlan, n: int) -> float:
    return 1.0 / n if plan.alpha_rule is AlphaRule.INVERSE_N else plan.alpha_value


def _complexity_dim(obj_cfg: ObjectiveConfig, theta) -> int:
    return obj_cfg.complexity_dim if obj_cfg.complexity_dim is not None else int(np.size(theta))


def _run(
    method: str,
    env: EnvSpec,
    spec: PolicySpec,
    theta0,
    plan: RolloutPlan,
    obj_cfg: ObjectiveConfig,
    opt_cfg: OptimizerConfig,
    streams: SeedStreams,
    reference: Optional[float],
) -> RunResult:
    started = time.perf_counter()
    theta0 = check_params(theta0, opt_cfg.radius)
    d = _complexity_dim(obj_cfg, theta0)
    if reference is None:
        reference = reference_loss(env, spec)
    result = RunResult(method=method, seed=streams.seed, reference_loss=reference)
    sequential = method == "scrm"
    deployed = theta0
    warm = theta0
    history: List[Batch] = []
    cum = 0
    try:
        for m, n_m in enumerate(batch_schedule(plan)):
            behavior = deployed if sequential else theta0
            batch = collect_batch(env, spec, behavior, n_m, streams, m)
            history.append(batch)
            cum += n_m
            data = batch if (sequential and not plan.pooled) else Batch.concat(history)
            n_fit = len(data)
            alpha = _alpha(plan, n_fit)
            if plan.lambda_rule is LambdaRule.THEORETICAL:
                lam = lambda_theoretical(n_fit, d, obj_cfg.delta)
            elif plan.lambda_rule is LambdaRule.FIXED:
                lam = plan.lambda_value
            else:
                lam = select_lambda_cv(
                    history, spec, plan.cv_candidates, plan.cv_folds, streams.get(m, "cv"),
                    theta_init=warm, plan=plan, obj_cfg=obj_cfg, opt_cfg=opt_cfg,
                )
            cfg = replace(obj_cfg, lam=lam, alpha=alpha, complexity_dim=d)
            theta, trace = minimize_objective(data, spec, warm, cfg, opt_cfg, streams.get(m, "restart"))
            risk = evaluate(env, spec, theta, streams, m, plan.eval_samples)
            result.records.append(
                RolloutRecord(
                    m=m, n_m=n_m, cum_n=cum, lam=lam, alpha=alpha,
                    deployed_theta=np.asarray(behavior).copy(), theta=theta,
                    test_loss=risk.value, test_stderr=risk.stderr,
                    excess_risk=risk.value - reference,
                    objective_start=trace.entries[0].value,
                    objective_end=trace.entries[-1].value,
                )
            )
            warm = theta
            if sequential:
                deployed = theta
    except Exception as exc:
        result.wall_clock = time.perf_counter() - started
        raise RunError(f"{method} failed at rollout {len(result.records)}: {exc}", result) from exc
    result.wall_clock = time.perf_counter() - started
    return result


def run_scrm(env, spec, theta0, plan, obj_cfg=ObjectiveConfig(), opt_cfg=OptimizerConfig(), rng=None, reference=None) -> RunResult:
    """Sequential counterfactual risk minimization.

    ``rng`` is a :class:`SeedStreams` or an integer seed.
    """
    return _run("scrm", env, spec, theta0, plan, obj_cfg, opt_cfg, _streams(rng), reference)


def run_crm(env, spec, theta0, plan, obj_cfg=ObjectiveConfig(), opt_cfg=OptimizerConfig(), rng=None, reference=None) -> RunResult:
    """Repeated CRM: always log with ``theta0`` and refit on the pooled data."""
    return _run("crm", env, spec, theta0, plan, obj_cfg, opt_cfg, _streams(rng), reference)


RUNNERS = {"scrm": run_scrm, "crm": run_crm}


def _streams(rng) -> SeedStreams:
    if isinstance(rng, SeedStreams):
        return rng
    if rng is None:
        raise ValueError("a seed or SeedStreams is required")
    return SeedStreams(int(rng))


def select_lambda_cv(
    history: Sequence[Batch],
    spec: PolicySpec,
    candidates: Iterable[float],
    folds: int,
    rng: np.random.Generator,
    theta_init=None,
    plan: Optional[RolloutPlan] = None,
    obj_cfg: ObjectiveConfig = ObjectiveConfig(),
    opt_cfg: OptimizerConfig = OptimizerConfig(),
) -> float:
    """Pick lambda by k-fold cross-validation on the pooled history.

    Each candidate is fitted on the training folds and scored by the
    unpenalized IPS-IX estimate on the held-out fold. The lowest mean score
    wins; ties go to the smaller lambda.
    """
    candidates = sorted(float(c) for c in candidates)
    if not candidates:
        raise ValueError("no candidate lambdas")
    if len(candidates) == 1:
        return candidates[0]
    if folds < 2:
        raise ValueError("cross-validation needs at least two folds")
    pool = Batch.concat(list(history))
    n = len(pool)
    if n < 2 * folds:
        raise ValueError(f"cross-validation needs at least {2 * folds} samples, got {n}")
    plan = plan or RolloutPlan()
    if theta_init is None:
        theta_init = history[-1].behavior_theta
    parts = np.array_split(rng.permutation(n), folds)
    d = _complexity_dim(obj_cfg, theta_init)
    best_lam, best_score = candidates[0], math.inf
    for lam in candidates:
        scores = []
        for k in range(folds):
            test = pool.take(parts[k])
            train = pool.take(np.concatenate([parts[j] for j in range(folds) if j != k]))
            cfg = replace(obj_cfg, lam=lam, alpha=_alpha(plan, len(train)), complexity_dim=d)
            theta, _ = minimize_objective(train, spec, theta_init, cfg, opt_cfg)
            scores.append(ips_ix_estimate(test, spec, theta, _alpha(plan, len(test))))
        score = math.fsum(scores) / folds
        if score < best_score:
            best_lam, best_score = lam, score
    return best_lam


def skyline_model(env: EnvSpec, spec: PolicySpec, theta_init, n: int = 20_000, seed: int = 0, radius: float = 10.0) -> np.ndarray:
    """Full-information model minimizing a fixed-sample estimate of the risk.

    Uses the exact per-context expected loss when the environment provides
    one, otherwise a common-random-numbers Monte-Carlo risk optimized with
    Nelder-Mead.
    """
    streams = SeedStreams(seed)
    theta_init = np.asarray(theta_init, dtype=float)
    if hasattr(env, "expected_loss"):
        X = env.sample_contexts(n, streams.get(0, "context"))

        def fun(theta):
            return env.expected_loss(spec, theta, X)

        theta, _ = projected_descent(fun, theta_init, OptimizerConfig(radius=radius, max_iters=500))
        return theta

    def risk(theta):
        theta = project_to_ball(theta, radius)
        return monte_carlo_risk(env, spec, theta, n, streams.get(0, "eval")).value

    res = minimize(risk, theta_init, method="Nelder-Mead", options={"maxiter": 4000, "xatol": 1e-4, "fatol": 1e-7})
    return project_to_ball(res.x, radius)


def run_many(jobs: Dict[Hashable, Callable[[], object]], threads: int = 1) -> Dict[Hashable, object]:
    """Run independent jobs, possibly on threads; results come back sorted by key."""
    keys = sorted(jobs)
    if threads <= 1:
        return {k: jobs[k]() for k in keys}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {k: pool.submit(jobs[k]) for k in keys}
        return {k: futures[k].result() for k in keys}
