"""Projected gradient descent with Armijo backtracking on a norm ball."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Tuple

import numpy as np

from .estimators import Batch
from .objective import ObjectiveConfig, svp_value_and_gradient
from .policy import PolicySpec

ValueAndGrad = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass(frozen=True)
class OptimizerConfig:
    radius: float = 10.0
    max_iters: int = 1000
    step_init: float = 1.0
    armijo_c: float = 1e-4
    shrink: float = 0.5
    grad_tol: float = 1e-6
    min_step: float = 1e-12
    restarts: int = 0

    def __post_init__(self):
        if not (self.radius > 0 and self.step_init > 0 and self.grad_tol > 0 and self.min_step > 0):
            raise ValueError("radius, step_init, grad_tol and min_step must be positive")
        if self.max_iters < 0 or self.restarts < 0:
            raise ValueError("max_iters and restarts must be nonnegative")
        if not (0 < self.armijo_c < 1 and 0 < self.shrink < 1):
            raise ValueError("armijo_c and shrink must lie in (0, 1)")


class TraceEntry(NamedTuple):
    value: float
    grad_norm: float
    step: float


@dataclass
class Trace:
    entries: List[TraceEntry] = field(default_factory=list)
    reason: str = ""
    restart: int = 0

    @property
    def accepted_steps(self) -> int:
        return max(len(self.entries) - 1, 0)

    @property
    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.entries])


class OptimizationError(RuntimeError):
    def __init__(self, message: str, trace: Trace):
        super().__init__(message)
        self.trace = trace


def project_to_ball(theta, radius: float) -> np.ndarray:
    """Euclidean projection onto ``{||theta|| <= radius}``."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    theta = np.asarray(theta, dtype=float)
    norm = np.linalg.norm(theta)
    if norm <= radius:
        return theta.copy()
    return theta * (radius / norm)


def _finite(value, grad) -> bool:
    return math.isfinite(value) and bool(np.all(np.isfinite(grad)))


def projected_descent(fun: ValueAndGrad, theta_init, cfg: OptimizerConfig) -> Tuple[np.ndarray, Trace]:
    """Minimize ``fun`` over the ball from ``theta_init``.

    Stops when the projected-gradient norm drops below ``grad_tol``, after
    ``max_iters`` accepted steps, or when backtracking falls under
    ``min_step``. Accepted values never increase. Each line search starts
    from the previous accepted step divided by ``shrink``.
    """
    trace = Trace()
    theta = project_to_ball(theta_init, cfg.radius)
    value, grad = fun(theta)
    if not _finite(value, grad):
        trace.reason = "non-finite"
        raise OptimizationError("non-finite objective or gradient at the starting point", trace)

    def pg_norm(th, g):
        return float(np.linalg.norm(th - project_to_ball(th - g, cfg.radius)))

    gnorm = pg_norm(theta, grad)
    trace.entries.append(TraceEntry(value, gnorm, 0.0))
    step = cfg.step_init * cfg.shrink
    for _ in range(cfg.max_iters):
        if gnorm < cfg.grad_tol:
            trace.reason = "grad_tol"
            return theta, trace
        step /= cfg.shrink
        while True:
            cand = project_to_ball(theta - step * grad, cfg.radius)
            cand_value, cand_grad = fun(cand)
            if math.isfinite(cand_value) and cand_value <= value + cfg.armijo_c * float(grad @ (cand - theta)):
                break
            step *= cfg.shrink
            if step < cfg.min_step:
                trace.reason = "step_underflow"
                return theta, trace
        if not _finite(cand_value, cand_grad):
            trace.reason = "non-finite"
            raise OptimizationError("non-finite gradient during descent", trace)
        theta, value, grad = cand, cand_value, cand_grad
        gnorm = pg_norm(theta, grad)
        trace.entries.append(TraceEntry(value, gnorm, step))
    trace.reason = "grad_tol" if gnorm < cfg.grad_tol else "max_iters"
    return theta, trace


def uniform_in_ball(dim: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    return direction * radius * rng.random() ** (1.0 / dim)


def minimize_objective(
    batch: Batch,
    spec: PolicySpec,
    theta_init,
    obj_cfg: ObjectiveConfig,
    opt_cfg: OptimizerConfig = OptimizerConfig(),
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, Trace]:
    """Minimize the penalized objective on ``batch`` warm-started at ``theta_init``.

    With ``opt_cfg.restarts > 0`` additional starts are drawn uniformly in the
    ball; the warm start is restart 0, the lowest final value wins and ties go
    to the lower restart index.
    """
    theta_init = np.asarray(theta_init, dtype=float)

    def fun(theta):
        return svp_value_and_gradient(batch, spec, theta, obj_cfg)

    best_theta, best_trace = projected_descent(fun, theta_init, opt_cfg)
    if opt_cfg.restarts:
        if rng is None:
            raise ValueError("restarts need a random generator")
        for r in range(1, opt_cfg.restarts + 1):
            start = uniform_in_ball(theta_init.size, opt_cfg.radius, rng)
            try:
                theta, trace = projected_descent(fun, start, opt_cfg)
            except OptimizationError:
                continue
            trace.restart = r
            if trace.entries[-1].value < best_trace.entries[-1].value:
                best_theta, best_trace = theta, trace
    return best_theta, best_trace
