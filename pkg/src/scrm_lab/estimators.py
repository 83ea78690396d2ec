"""Off-policy risk and variance estimators on logged bandit batches.

Scalar reductions go through :func:`canonical_sum`, which sums the sorted
terms. Results are then bit-for-bit independent of the order of the
interactions in a batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .policy import PolicySpec, check_weight_bound, log_prob, log_weights, Action


@dataclass(frozen=True)
class Interaction:
    """One logged tuple ``(x, a, y, propensity)``."""

    x: np.ndarray
    a: Action
    y: float
    propensity: float

    def __post_init__(self):
        if not -1.0 <= self.y <= 0.0:
            raise ValueError(f"loss {self.y} outside [-1, 0]")
        if not self.propensity > 0:
            raise ValueError("propensity must be positive")


@dataclass
class Batch:
    """Logged interactions of one rollout, stored column-wise.

    ``log_propensity`` is kept rather than the propensity itself so that
    re-evaluating the behaviour policy reproduces it exactly.
    """

    X: np.ndarray
    A: np.ndarray
    y: np.ndarray
    log_propensity: np.ndarray
    behavior_theta: Optional[np.ndarray] = None
    rollout: int = 0
    source: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.log_propensity = np.asarray(self.log_propensity, dtype=float)
        n = len(self.y)
        if n == 0:
            raise ValueError("a batch must be nonempty")
        if self.X.shape[0] != n or len(self.A) != n or self.log_propensity.shape != (n,):
            raise ValueError("batch columns have inconsistent lengths")
        if np.any(self.y < -1.0) or np.any(self.y > 0.0):
            raise ValueError("losses must lie in [-1, 0]")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def propensity(self) -> np.ndarray:
        return np.exp(self.log_propensity)

    def interactions(self) -> Iterator[Interaction]:
        for i in range(len(self)):
            a = self.A[i]
            yield Interaction(self.X[i], a if np.ndim(a) else float(a), float(self.y[i]), float(np.exp(self.log_propensity[i])))

    @classmethod
    def from_interactions(cls, interactions: Sequence[Interaction], behavior_theta=None, rollout: int = 0) -> "Batch":
        if not interactions:
            raise ValueError("a batch must be nonempty")
        return cls(
            X=np.stack([np.asarray(it.x, dtype=float).reshape(-1) for it in interactions]),
            A=np.asarray([it.a for it in interactions]),
            y=np.array([it.y for it in interactions]),
            log_propensity=np.log([it.propensity for it in interactions]),
            behavior_theta=None if behavior_theta is None else np.asarray(behavior_theta, dtype=float),
            rollout=rollout,
        )

    def take(self, idx) -> "Batch":
        return Batch(
            self.X[idx], self.A[idx], self.y[idx], self.log_propensity[idx],
            self.behavior_theta, self.rollout,
            None if self.source is None else self.source[idx],
        )

    @staticmethod
    def concat(batches: Sequence["Batch"]) -> "Batch":
        """Pool batches; each sample keeps its own logged propensity.

        ``behavior_theta`` is kept only when every batch shares it.
        """
        if not batches:
            raise ValueError("nothing to concatenate")
        thetas = [b.behavior_theta for b in batches]
        shared = thetas[0]
        if any(t is None or shared is None or not np.array_equal(t, shared) for t in thetas):
            shared = None
        return Batch(
            np.concatenate([b.X for b in batches]),
            np.concatenate([b.A for b in batches]),
            np.concatenate([b.y for b in batches]),
            np.concatenate([b.log_propensity for b in batches]),
            shared,
            batches[-1].rollout,
            np.concatenate([np.full(len(b), b.rollout) for b in batches]),
        )

    def check_propensities(self, spec: PolicySpec, n_check: int = 16, atol: float = 1e-9) -> None:
        """Spot-check logged propensities against ``behavior_theta``."""
        if self.behavior_theta is None:
            return
        idx = np.linspace(0, len(self) - 1, min(n_check, len(self))).astype(int)
        recomputed = log_prob(spec, self.behavior_theta, self.X[idx], self.A[idx])
        if not np.allclose(recomputed, self.log_propensity[idx], atol=atol, rtol=0):
            raise ValueError("logged propensities disagree with the behaviour model")


class Variant(str, Enum):
    IPS = "ips"
    CLIPPED_IPS = "clipped_ips"
    SNIPS = "snips"
    IPS_IX = "ips_ix"


class MISWeights(str, Enum):
    NAIVE = "naive"
    BALANCE = "balance"


@dataclass(frozen=True)
class EstimatorConfig:
    variant: Variant = Variant.IPS_IX
    alpha: float = 0.0
    mis_weights: Optional[MISWeights] = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.mis_weights is not None:
            object.__setattr__(self, "mis_weights", MISWeights(self.mis_weights))
        if not self.alpha >= 0:
            raise ValueError("alpha must be nonnegative")
        if self.variant is Variant.CLIPPED_IPS and not self.alpha > 0:
            raise ValueError("clipped IPS needs alpha > 0")


def canonical_sum(values: np.ndarray) -> float:
    """Order-independent float sum (sums the sorted values)."""
    return float(np.sum(np.sort(np.asarray(values, dtype=float).reshape(-1))))


def canonical_mean(values: np.ndarray) -> float:
    return canonical_sum(values) / np.size(values)


def sample_variance(values: np.ndarray) -> float:
    """Unbiased two-pass sample variance with canonical reductions."""
    values = np.asarray(values, dtype=float)
    n = values.size
    if n < 2:
        raise ValueError("sample variance needs at least two samples")
    dev = values - canonical_mean(values)
    return canonical_sum(dev * dev) / (n - 1)


def target_log_prob(batch: Batch, spec: PolicySpec, theta) -> np.ndarray:
    return log_prob(spec, theta, batch.X, batch.A)


def batch_log_weights(batch: Batch, spec: PolicySpec, theta) -> np.ndarray:
    return log_weights(target_log_prob(batch, spec, theta), batch.log_propensity)


def batch_weights(batch: Batch, spec: PolicySpec, theta) -> np.ndarray:
    """``pi_theta(a_i|x_i) / pi_i`` for every interaction."""
    w = np.exp(batch_log_weights(batch, spec, theta))
    check_weight_bound(w, spec.weight_bound)
    return w


def ix_weights_from_log(log_w: np.ndarray, alpha: float) -> np.ndarray:
    """``pi_theta / (pi_i + alpha pi_theta)`` from log weights; capped by ``1/alpha``."""
    return 1.0 / (np.exp(-log_w) + alpha)


def ix_weights(batch: Batch, spec: PolicySpec, theta, alpha: float) -> np.ndarray:
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    log_w = batch_log_weights(batch, spec, theta)
    check_weight_bound(np.exp(log_w), spec.weight_bound)
    return ix_weights_from_log(log_w, alpha)


def ips_value(y, w) -> float:
    return canonical_mean(np.asarray(y) * w)


def clipped_ips_value(y, w, alpha: float) -> float:
    return canonical_mean(np.asarray(y) * np.minimum(w, alpha))


def snips_value(y, w) -> float:
    total = canonical_sum(w)
    if not total > 0:
        raise ValueError("importance weights sum to zero")
    return canonical_sum(np.asarray(y) * w) / total


def ips_ix_value(y, log_w, alpha: float) -> float:
    return canonical_mean(np.asarray(y) * ix_weights_from_log(log_w, alpha))


def ips_estimate(batch: Batch, spec: PolicySpec, theta) -> float:
    """Inverse propensity scoring: ``mean(y_i w_i)``."""
    return ips_value(batch.y, batch_weights(batch, spec, theta))


def clipped_ips_estimate(batch: Batch, spec: PolicySpec, theta, alpha: float) -> float:
    """IPS with weights clipped at ``alpha`` (``math.inf`` disables clipping)."""
    if not alpha > 0:
        raise ValueError("clipping level must be positive")
    return clipped_ips_value(batch.y, batch_weights(batch, spec, theta), alpha)


def snips_estimate(batch: Batch, spec: PolicySpec, theta) -> float:
    """Self-normalized IPS: ``sum(y w) / sum(w)``."""
    return snips_value(batch.y, batch_weights(batch, spec, theta))


def ips_ix_estimate(batch: Batch, spec: PolicySpec, theta, alpha: float) -> float:
    """Implicit-exploration IPS: ``mean(y_i pi_theta,i / (pi_i + alpha pi_theta,i))``."""
    return canonical_mean(batch.y * ix_weights(batch, spec, theta, alpha))


def clipped_terms(batch: Batch, spec: PolicySpec, theta, alpha: float) -> np.ndarray:
    return batch.y * np.minimum(batch_weights(batch, spec, theta), alpha)


def control_variate_terms(batch: Batch, spec: PolicySpec, theta, alpha: float) -> np.ndarray:
    """``zeta_i = (w_ix,i - 1) y_i``."""
    return (ix_weights(batch, spec, theta, alpha) - 1.0) * batch.y


def empirical_variance_ips(batch: Batch, spec: PolicySpec, theta, alpha: float = math.inf) -> float:
    """Sample variance of the clipped terms ``y_i min(w_i, alpha)``."""
    if len(batch) < 2:
        raise ValueError("variance estimate needs n >= 2")
    return sample_variance(clipped_terms(batch, spec, theta, alpha))


def empirical_variance_ips_ix(batch: Batch, spec: PolicySpec, theta, alpha: float) -> float:
    """Sample variance of the control-variate terms ``(w_ix,i - 1) y_i``."""
    if len(batch) < 2:
        raise ValueError("variance estimate needs n >= 2")
    return sample_variance(control_variate_terms(batch, spec, theta, alpha))


def order_statistic_clip(weights: np.ndarray, rank: int = 5) -> float:
    """Clipping level set to the ``rank``-th largest weight (smallest if fewer)."""
    weights = np.asarray(weights, dtype=float)
    rank = min(rank, weights.size)
    return float(np.partition(weights, weights.size - rank)[weights.size - rank])


def estimate(batch: Batch, spec: PolicySpec, theta, cfg: EstimatorConfig) -> float:
    """Dispatch on ``cfg.variant``."""
    if cfg.variant is Variant.IPS:
        return ips_estimate(batch, spec, theta)
    if cfg.variant is Variant.CLIPPED_IPS:
        return clipped_ips_estimate(batch, spec, theta, cfg.alpha)
    if cfg.variant is Variant.SNIPS:
        return snips_estimate(batch, spec, theta)
    return ips_ix_estimate(batch, spec, theta, cfg.alpha)


# multiple importance sampling


def _check_batches(batches: Sequence[Batch]) -> None:
    if not batches:
        raise ValueError("need at least one batch")


def mis_partition(batches: Sequence[Batch], spec: PolicySpec, X, A, weights: MISWeights) -> np.ndarray:
    """Partition-of-unity weights ``omega_t(x, a)``, shape (T, n).

    ``naive`` gives ``n_t / sum(n_l)``; ``balance`` gives
    ``n_t pi_t(a|x) / sum_l n_l pi_l(a|x)``.
    """
    _check_batches(batches)
    weights = MISWeights(weights)
    sizes = np.array([len(b) for b in batches], dtype=float)
    n = np.shape(X)[0]
    if weights is MISWeights.NAIVE:
        return np.repeat((sizes / sizes.sum())[:, None], n, axis=1)
    if any(b.behavior_theta is None for b in batches):
        raise ValueError("balance heuristic needs each batch's behaviour model")
    logs = np.stack([np.log(s) + log_prob(spec, b.behavior_theta, X, A) for s, b in zip(sizes, batches)])
    return np.exp(logs - logsumexp(logs, axis=0))


def mis_estimate(batches: Sequence[Batch], spec: PolicySpec, theta, weights: MISWeights = MISWeights.NAIVE) -> float:
    """``sum_t (1/n_t) sum_i omega_t(a_ti) y_ti w_ti``."""
    _check_batches(batches)
    total = []
    for t, b in enumerate(batches):
        omega = mis_partition(batches, spec, b.X, b.A, weights)[t]
        total.append(canonical_sum(omega * b.y * batch_weights(b, spec, theta)) / len(b))
    return math.fsum(total)


def mis_naive_components(batches: Sequence[Batch], spec: PolicySpec, theta):
    """Per-batch variance terms and pairwise covariance matrix of ``r = w y``.

    Returns ``(sizes, var_terms, cov)`` where ``var_terms[t] = n_t s_t^2``
    estimates ``Var(sum_i r^t_i)`` and ``cov[p, q]`` is the index-paired
    ``(1/n_p) sum_k (r^p_k - rbar_p)(r^q_k - rbar_q)``.
    """
    _check_batches(batches)
    sizes = [len(b) for b in batches]
    if len(set(sizes)) != 1:
        raise ValueError(f"naive MIS variance needs equal batch sizes, got {sizes}")
    if sizes[0] < 2:
        raise ValueError("naive MIS variance needs n_t >= 2")
    r = np.stack([b.y * batch_weights(b, spec, theta) for b in batches])
    dev = r - r.mean(axis=1, keepdims=True)
    n_t = sizes[0]
    var_terms = n_t * np.sum(dev * dev, axis=1) / (n_t - 1)
    cov = dev @ dev.T / n_t
    return np.array(sizes), var_terms, cov


def mis_variance_naive(batches: Sequence[Batch], spec: PolicySpec, theta) -> float:
    """Variance estimate of the naive (concatenated) MIS estimator.

    ``(1/n^2) [sum_t n_t s_t^2 + 2 sum_{p<q} n_p n_q cov_pq]``. With a single
    batch this is the usual ``s^2 / n``.
    """
    sizes, var_terms, cov = mis_naive_components(batches, spec, theta)
    n = sizes.sum()
    cross = 0.0
    for p in range(len(sizes)):
        for q in range(p + 1, len(sizes)):
            cross += sizes[p] * sizes[q] * cov[p, q]
    return float((var_terms.sum() + 2.0 * cross) / n**2)
