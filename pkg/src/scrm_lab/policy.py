"""Parametric stochastic policies.

Three families are supported:

* ``gaussian_linear``: ``a ~ N(theta^T phi(x), sigma^2)``
* ``lognormal``: ``log a ~ N(theta^T phi(x), sigma^2)``
* ``softmax_kronecker``: ``pi(a|x) ∝ exp(theta^T (x ⊗ a))`` over bit vectors
  ``a in {0,1}^K``, mixed with the uniform distribution with weight epsilon.

For the continuous families ``phi(x) = x``; an empty context gives a
non-contextual policy whose location is the single parameter ``theta[0]``.

Every function exists in a batched form working on arrays with a leading
sample axis. Densities are always computed in log space.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Tuple, Union

import numpy as np
from scipy.special import expit, log_expit

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
# smallest denominator density accepted when forming a weight
MIN_DENSITY = 1e-300
LOG_MIN_DENSITY = math.log(MIN_DENSITY)

Action = Union[float, np.ndarray]


class Family(str, Enum):
    GAUSSIAN_LINEAR = "gaussian_linear"
    LOGNORMAL = "lognormal"
    SOFTMAX_KRONECKER = "softmax_kronecker"


class WeightBoundWarning(UserWarning):
    """An importance weight exceeded the declared bound W."""


class PropensityError(ValueError):
    """The behaviour density of an action is too small to form a weight."""


@dataclass(frozen=True)
class PolicySpec:
    """Policy family and its fixed (non-learned) hyper-parameters.

    Parameters
    ----------
    family: Family
        Which parametric family.
    sigma: float, default=1.0
        Standard deviation of the Gaussian (or of ``log a`` for lognormal).
    epsilon: float, default=0.0
        Uniform mixing mass for the discrete family.
    action_bits: int, default=1
        Number of bits K of a discrete action (``2**K`` actions).
    weight_bound: float, default=100.0
        Declared importance weight bound W. Exceeding it only warns.
    """

    family: Family
    sigma: float = 1.0
    epsilon: float = 0.0
    action_bits: int = 1
    weight_bound: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.family is Family.SOFTMAX_KRONECKER:
            if not 0.0 <= self.epsilon < 1.0:
                raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")
            if int(self.action_bits) < 1:
                raise ValueError("action_bits must be a positive integer")
        elif not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.weight_bound >= 1.0:
            raise ValueError(f"weight_bound must be >= 1, got {self.weight_bound}")

    @property
    def discrete(self) -> bool:
        return self.family is Family.SOFTMAX_KRONECKER

    @property
    def n_actions(self) -> int:
        return 2 ** self.action_bits


def lognormal_moment_matched(mean: float = 2.0, var: float = 1.0) -> Tuple[float, float]:
    """Return ``(eta, sigma)`` of the lognormal with the given mean and variance."""
    sigma2 = math.log1p(var / mean**2)
    return math.log(mean) - 0.5 * sigma2, math.sqrt(sigma2)


def param_dim(spec: PolicySpec, context_dim: int) -> int:
    """Dimension of theta for contexts of size ``context_dim``."""
    if spec.discrete:
        return context_dim * spec.action_bits
    return max(context_dim, 1)


def check_params(theta, radius: float | None = None) -> np.ndarray:
    """Validate a parameter vector and return it as a float array."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1:
        raise ValueError(f"theta must be a vector, got shape {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta has non-finite entries")
    if radius is not None and np.linalg.norm(theta) > radius * (1 + 1e-12):
        raise ValueError(f"||theta|| = {np.linalg.norm(theta):.6g} exceeds radius {radius}")
    return theta


def _features(X: np.ndarray) -> np.ndarray:
    if X.shape[1] == 0:
        return np.ones((X.shape[0], 1))
    return X


def _as_batch(spec: PolicySpec, theta, X, A=None):
    theta = np.asarray(theta, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    n, k = X.shape
    expected = param_dim(spec, k)
    if theta.shape != (expected,):
        raise ValueError(
            f"theta has shape {theta.shape}; {spec.family.value} with context dim {k} "
            f"needs ({expected},)"
        )
    if A is None:
        return theta, X, None
    if spec.discrete:
        A = np.asarray(A)
        if A.ndim == 1:
            A = A[None, :]
        if A.shape != (n, spec.action_bits):
            raise ValueError(f"discrete actions must have shape ({n}, {spec.action_bits})")
        if not np.all((A == 0) | (A == 1)):
            raise ValueError("discrete actions must be bit vectors")
        A = A.astype(float)
    else:
        A = np.asarray(A, dtype=float).reshape(-1)
        if A.shape != (n,):
            raise ValueError(f"continuous actions must have shape ({n},)")
    return theta, X, A


def _bit_logits(spec: PolicySpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    # theta[i*K + j] multiplies x_i * a_j, matching np.kron(x, a)
    return X @ theta.reshape(X.shape[1], spec.action_bits)


def log_prob(spec: PolicySpec, theta, X, A) -> np.ndarray:
    """Log density (or log mass) of actions ``A`` at contexts ``X``, shape (n,)."""
    theta, X, A = _as_batch(spec, theta, X, A)
    if spec.family is Family.GAUSSIAN_LINEAR:
        z = (A - _features(X) @ theta) / spec.sigma
        return -0.5 * z * z - LOG_SQRT_2PI - math.log(spec.sigma)
    if spec.family is Family.LOGNORMAL:
        if np.any(A <= 0):
            raise ValueError("lognormal actions must be positive")
        log_a = np.log(A)
        z = (log_a - _features(X) @ theta) / spec.sigma
        return -0.5 * z * z - LOG_SQRT_2PI - math.log(spec.sigma) - log_a
    s = _bit_logits(spec, theta, X)
    # a_j * s_j - log(1 + e^{s_j}) == log_expit(s_j) if a_j else log_expit(-s_j)
    logp = np.sum(np.where(A > 0, log_expit(s), log_expit(-s)), axis=1)
    if spec.epsilon == 0.0:
        return logp
    log_unif = math.log(spec.epsilon) - spec.action_bits * math.log(2.0)
    return np.logaddexp(math.log1p(-spec.epsilon) + logp, log_unif)


def log_density(spec: PolicySpec, theta, x, a) -> float:
    """Log density of a single action ``a`` at context ``x``."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    a = np.asarray(a).reshape(1, -1) if spec.discrete else np.asarray([a], dtype=float)
    return float(log_prob(spec, theta, x, a)[0])


def sample_actions(spec: PolicySpec, theta, X, rng: np.random.Generator):
    """Draw one action per context row.

    Returns
    -------
    A: ndarray
        Shape (n,) for continuous families, (n, K) int8 bit vectors otherwise.
    log_propensity: ndarray, shape (n,)
        ``log_prob(spec, theta, X, A)``; the logged propensity is its exp.
    """
    theta, X, _ = _as_batch(spec, theta, X)
    n = X.shape[0]
    if spec.family is Family.GAUSSIAN_LINEAR:
        A = _features(X) @ theta + spec.sigma * rng.standard_normal(n)
    elif spec.family is Family.LOGNORMAL:
        A = np.exp(_features(X) @ theta + spec.sigma * rng.standard_normal(n))
    else:
        p = expit(_bit_logits(spec, theta, X))
        A = (rng.random((n, spec.action_bits)) < p).astype(np.int8)
        if spec.epsilon > 0:
            explore = rng.random(n) < spec.epsilon
            uniform = rng.integers(0, 2, size=(n, spec.action_bits), dtype=np.int8)
            A[explore] = uniform[explore]
    return A, log_prob(spec, theta, X, A)


def sample_action(spec: PolicySpec, theta, x, rng: np.random.Generator) -> Tuple[Action, float]:
    """Draw a single action; returns ``(action, propensity)``."""
    A, logp = sample_actions(spec, theta, np.asarray(x, dtype=float).reshape(1, -1), rng)
    a = A[0].copy() if spec.discrete else float(A[0])
    return a, math.exp(logp[0])


def score(spec: PolicySpec, theta, X, A) -> np.ndarray:
    """Score function ``grad_theta log pi_theta(a|x)`` per sample, shape (n, d)."""
    theta, X, A = _as_batch(spec, theta, X, A)
    if spec.family is Family.GAUSSIAN_LINEAR:
        phi = _features(X)
        return ((A - phi @ theta) / spec.sigma**2)[:, None] * phi
    if spec.family is Family.LOGNORMAL:
        phi = _features(X)
        return ((np.log(A) - phi @ theta) / spec.sigma**2)[:, None] * phi
    s = _bit_logits(spec, theta, X)
    # d log pi / d theta_{ij} = x_i (a_j - sigmoid(s_j))
    g = (X[:, :, None] * (A - expit(s))[:, None, :]).reshape(X.shape[0], -1)
    if spec.epsilon == 0.0:
        return g
    # mixture: grad log pi_eps = (1 - eps) pi / pi_eps * grad log pi
    logp = np.sum(np.where(A > 0, log_expit(s), log_expit(-s)), axis=1)
    log_unif = math.log(spec.epsilon) - spec.action_bits * math.log(2.0)
    log_mix = np.logaddexp(math.log1p(-spec.epsilon) + logp, log_unif)
    share = np.exp(math.log1p(-spec.epsilon) + logp - log_mix)
    return share[:, None] * g


def grad_log_density(spec: PolicySpec, theta, x, a) -> np.ndarray:
    """Score of a single action, shape (d,)."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    a = np.asarray(a).reshape(1, -1) if spec.discrete else np.asarray([a], dtype=float)
    return score(spec, theta, x, a)[0]


def log_weights(log_num: np.ndarray, log_den: np.ndarray) -> np.ndarray:
    """Log importance weights from numerator and denominator log densities."""
    log_den = np.asarray(log_den, dtype=float)
    if np.any(log_den < LOG_MIN_DENSITY):
        raise PropensityError(
            "behaviour density below 1e-300; the parameter box is too wide for this family"
        )
    return np.asarray(log_num, dtype=float) - log_den


def check_weight_bound(weights: np.ndarray, bound: float) -> None:
    wmax = float(np.max(weights, initial=0.0))
    if wmax > bound:
        warnings.warn(
            f"importance weight {wmax:.4g} exceeds declared bound W={bound:g}",
            WeightBoundWarning,
            stacklevel=3,
        )


def importance_weights(spec: PolicySpec, theta_num, theta_den, X, A) -> np.ndarray:
    """Batched ``pi_num(a|x) / pi_den(a|x)``."""
    w = np.exp(log_weights(log_prob(spec, theta_num, X, A), log_prob(spec, theta_den, X, A)))
    check_weight_bound(w, spec.weight_bound)
    return w


def importance_weight(spec: PolicySpec, theta_num, theta_den, x, a) -> float:
    """Single-sample importance weight computed in log space."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    a = np.asarray(a).reshape(1, -1) if spec.discrete else np.asarray([a], dtype=float)
    return float(importance_weights(spec, theta_num, theta_den, x, a)[0])


def all_actions(action_bits: int) -> np.ndarray:
    """Every bit vector of length ``action_bits``, shape (2**K, K)."""
    idx = np.arange(2**action_bits)
    return ((idx[:, None] >> np.arange(action_bits)[::-1]) & 1).astype(np.int8)
