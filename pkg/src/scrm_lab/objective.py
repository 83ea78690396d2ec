"""Sample-variance-penalized objective built on the IPS-IX estimator."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .estimators import (
    Batch,
    batch_log_weights,
    canonical_mean,
    ix_weights_from_log,
    sample_variance,
)
from .policy import PolicySpec, check_weight_bound, score

LAMBDA_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)


@dataclass(frozen=True)
class ObjectiveConfig:
    """Penalty weight ``lam``, IX smoothing ``alpha``, confidence ``delta``.

    ``complexity_dim`` is the ``d`` of the ``d log n`` complexity bound;
    ``None`` means the dimension of theta.
    """

    lam: float = 0.0
    alpha: float = 0.0
    delta: float = 0.05
    complexity_dim: Optional[int] = None

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be nonnegative")
        if not self.alpha >= 0:
            raise ValueError("alpha must be nonnegative")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.complexity_dim is not None and self.complexity_dim < 0:
            raise ValueError("complexity_dim must be nonnegative")


def _check_size(batch: Batch) -> int:
    n = len(batch)
    if n < 2:
        raise ValueError("the penalized objective needs n >= 2")
    return n


def _terms(batch: Batch, spec: PolicySpec, theta, alpha: float):
    log_w = batch_log_weights(batch, spec, theta)
    check_weight_bound(np.exp(log_w), spec.weight_bound)
    w_ix = ix_weights_from_log(log_w, alpha)
    return log_w, w_ix


def svp_parts(batch: Batch, spec: PolicySpec, theta, cfg: ObjectiveConfig) -> Tuple[float, float]:
    """``(risk_estimate, variance_estimate)`` entering the objective."""
    _check_size(batch)
    _, w_ix = _terms(batch, spec, theta, cfg.alpha)
    risk = canonical_mean(batch.y * w_ix)
    var = sample_variance((w_ix - 1.0) * batch.y)
    return risk, var


def svp_objective(batch: Batch, spec: PolicySpec, theta, cfg: ObjectiveConfig) -> float:
    """IPS-IX risk estimate plus ``lam * sqrt(V / n)``."""
    risk, var = svp_parts(batch, spec, theta, cfg)
    return risk + cfg.lam * math.sqrt(var / len(batch))


def svp_value_and_gradient(batch: Batch, spec: PolicySpec, theta, cfg: ObjectiveConfig):
    """Objective value and its exact gradient in one pass.

    Uses ``d w_ix / d theta = w_ix^2 / w * score``. The penalty contributes
    nothing to the gradient where the variance estimate is exactly zero.
    """
    n = _check_size(batch)
    theta = np.asarray(theta, dtype=float)
    log_w, w_ix = _terms(batch, spec, theta, cfg.alpha)
    y = batch.y
    risk = canonical_mean(y * w_ix)
    zeta = (w_ix - 1.0) * y
    var = sample_variance(zeta)

    dw = (w_ix * w_ix * np.exp(-log_w))[:, None] * score(spec, theta, batch.X, batch.A)
    ydw = y[:, None] * dw
    grad = ydw.mean(axis=0)
    value = risk
    if cfg.lam > 0:
        value += cfg.lam * math.sqrt(var / n)
        if var > 0:
            dev = zeta - zeta.mean()
            dvar = 2.0 * (dev @ ydw) / (n - 1)
            grad = grad + cfg.lam * dvar / (2.0 * math.sqrt(var * n))
    return value, grad


def svp_gradient(batch: Batch, spec: PolicySpec, theta, cfg: ObjectiveConfig) -> np.ndarray:
    return svp_value_and_gradient(batch, spec, theta, cfg)[1]


def lambda_theoretical(n_m: int, d: int, delta: float) -> float:
    """``sqrt(18 (d log n_m + log(2/delta)))``."""
    if n_m < 2:
        raise ValueError("n_m must be at least 2")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return math.sqrt(18.0 * (d * math.log(n_m) + math.log(2.0 / delta)))


def confidence_slack(n: int, delta: float) -> float:
    """``sqrt(log(2/delta) / (2 n))``."""
    return math.sqrt(math.log(2.0 / delta) / (2.0 * n))


def generalization_bound_rhs(batch: Batch, spec: PolicySpec, theta, cfg: ObjectiveConfig) -> float:
    """High-probability upper bound on the true risk of ``theta``.

    ``L_ix + lam sqrt(V/n) + 2 lam^2 W / n + sqrt(log(2/delta) / 2n)`` with
    ``W`` the policy's declared weight bound.
    """
    n = _check_size(batch)
    return (
        svp_objective(batch, spec, theta, cfg)
        + 2.0 * cfg.lam**2 * spec.weight_bound / n
        + confidence_slack(n, cfg.delta)
    )
