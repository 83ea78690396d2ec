"""Synthetic logged-bandit environments.

All environments emit losses in ``[-1, 0]``. Raw rewards ``r`` are mapped
with ``y = -(r - r_min) / (r_max - r_min)`` from declared bounds; raw values
outside the bounds are clipped first.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Union

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .policy import Family, PolicySpec, lognormal_moment_matched, sample_actions

logger = logging.getLogger(__name__)


class RiskEstimate(NamedTuple):
    value: float
    stderr: float


def _normalize(r: np.ndarray, r_min: float, r_max: float) -> np.ndarray:
    r = np.clip(r, r_min, r_max)
    return -(r - r_min) / (r_max - r_min)


def clamped_quadratic_risk(shift: float, scale: float) -> float:
    """``E[min(z^2 - 1, 0)]`` for ``z ~ N(shift, scale^2)``.

    Integrates ``z^2 - 1`` over ``|z| < 1`` using the normal cdf/pdf.
    """
    lo, hi = (-1.0 - shift) / scale, (1.0 - shift) / scale
    mass = norm.cdf(hi) - norm.cdf(lo)
    plo, phi = norm.pdf(lo), norm.pdf(hi)
    second = (
        shift**2 * mass
        + 2.0 * shift * scale * (plo - phi)
        + scale**2 * (mass + lo * plo - hi * phi)
    )
    return float(second - mass)


@dataclass(frozen=True)
class GaussianQuadratic:
    """Non-contextual toy problem: ``loss(a) = min((a - y)^2 - 1, 0)``, ``y ~ N(theta*, sigma*^2)``.

    The clamp at zero keeps losses in ``[-1, 0]``; closed-form risks account
    for it exactly.
    """

    theta_star: float = 1.0
    sigma_star: float = 0.3
    theta0: float = 0.0
    policy_sigma: float = 0.3

    kind = "gaussian_quadratic"
    context_dim = 0

    def default_policy(self, weight_bound: float = 100.0) -> PolicySpec:
        return PolicySpec(Family.GAUSSIAN_LINEAR, sigma=self.policy_sigma, weight_bound=weight_bound)

    def logging_theta(self) -> np.ndarray:
        return np.array([self.theta0])

    def sample_contexts(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.empty((n, 0))

    def sample_losses(self, X, A, rng: np.random.Generator) -> np.ndarray:
        targets = self.theta_star + self.sigma_star * rng.standard_normal(len(A))
        raw = (np.asarray(A, dtype=float) - targets) ** 2 - 1.0
        clamped = np.count_nonzero(raw > 0)
        if clamped:
            logger.debug("clamped %d/%d quadratic losses to 0", clamped, len(raw))
        return np.minimum(raw, 0.0)

    def closed_form_risk(self, spec: PolicySpec, theta) -> float:
        if spec.family is not Family.GAUSSIAN_LINEAR:
            raise ValueError("closed form needs a gaussian_linear policy")
        theta = np.asarray(theta, dtype=float).reshape(-1)
        scale = math.hypot(spec.sigma, self.sigma_star)
        return clamped_quadratic_risk(float(theta[0]) - self.theta_star, scale)

    def optimal_model(self) -> Optional[np.ndarray]:
        return np.array([self.theta_star])


@dataclass(frozen=True)
class Pricing:
    """Personalized pricing: revenue ``p (a(xbar) - b(xbar) p + eps)``.

    Contexts are uniform on ``[1, 2]^k``; only the first ``l`` coordinates
    enter the demand through their mean ``xbar``. Prices are clipped to
    ``[0, price_max]`` before computing revenue.
    """

    k: int = 10
    l: int = 3
    noise_sd: float = 1.0
    price_max: float = 5.0
    policy_sigma: float = 1.0
    r_min: float = field(init=False, repr=False, compare=False)
    r_max: float = field(init=False, repr=False, compare=False)

    kind = "pricing"

    def __post_init__(self):
        if not 0 < self.l < self.k:
            raise ValueError("pricing needs 0 < l < k")
        xb, p = np.meshgrid(np.linspace(1, 2, 201), np.linspace(0, self.price_max, 501))
        r = self._revenue(xb, p, 0.0)
        slack = 3.0 * self.noise_sd * self.price_max
        object.__setattr__(self, "r_min", float(r.min()) - slack)
        object.__setattr__(self, "r_max", float(r.max()) + slack)

    @property
    def context_dim(self) -> int:
        return self.k

    @staticmethod
    def _revenue(xbar, price, noise):
        return price * (2.0 * xbar**2 - 0.6 * xbar * price + noise)

    def default_policy(self, weight_bound: float = 100.0) -> PolicySpec:
        return PolicySpec(Family.GAUSSIAN_LINEAR, sigma=self.policy_sigma, weight_bound=weight_bound)

    def logging_theta(self) -> np.ndarray:
        # N(xbar, 1) is linear in x
        theta = np.zeros(self.k)
        theta[: self.l] = 1.0 / self.l
        return theta

    def sample_contexts(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(1.0, 2.0, size=(n, self.k))

    def raw_revenue(self, X, A, noise) -> np.ndarray:
        xbar = np.asarray(X)[:, : self.l].mean(axis=1)
        price = np.clip(np.asarray(A, dtype=float), 0.0, self.price_max)
        return self._revenue(xbar, price, noise)

    def sample_losses(self, X, A, rng: np.random.Generator) -> np.ndarray:
        noise = self.noise_sd * rng.standard_normal(len(A))
        return _normalize(self.raw_revenue(X, A, noise), self.r_min, self.r_max)

    def optimal_model(self) -> Optional[np.ndarray]:
        return None


@dataclass(frozen=True)
class Potential:
    """Advertising with latent user potential.

    A group ``g`` in {low, high} is drawn with equal probability, then the
    potential ``p | g ~ N(mu_g, sd^2)`` (floored at ``p_floor``). The context
    is ``(p, 1)``. Reward ``max(r_l(p, a), -0.1)`` where ``r_l = a/p`` below
    the potential and ``(p - a)/2 + 1`` above it.
    """

    mu_low: float = 1.0
    mu_high: float = 3.0
    sd: float = 0.5
    p_floor: float = 0.05

    kind = "potential"
    context_dim = 2
    r_min = -0.1
    r_max = 1.0

    def default_policy(self, weight_bound: float = 100.0) -> PolicySpec:
        _, sigma = lognormal_moment_matched(2.0, 1.0)
        return PolicySpec(Family.LOGNORMAL, sigma=sigma, weight_bound=weight_bound)

    def logging_theta(self) -> np.ndarray:
        eta, _ = lognormal_moment_matched(2.0, 1.0)
        return np.array([0.0, eta])

    def sample_contexts(self, n: int, rng: np.random.Generator) -> np.ndarray:
        high = rng.random(n) < 0.5
        mu = np.where(high, self.mu_high, self.mu_low)
        p = np.maximum(mu + self.sd * rng.standard_normal(n), self.p_floor)
        return np.column_stack([p, np.ones(n)])

    def reward(self, X, A) -> np.ndarray:
        p = np.asarray(X)[:, 0]
        a = np.asarray(A, dtype=float)
        r = np.where(a < p, a / p, 0.5 * (p - a) + 1.0)
        return np.maximum(r, -0.1)

    def sample_losses(self, X, A, rng: np.random.Generator) -> np.ndarray:
        return _normalize(self.reward(X, A), self.r_min, self.r_max)

    def optimal_model(self) -> Optional[np.ndarray]:
        return None


@dataclass(frozen=True)
class SyntheticMultilabel:
    """Multilabel classification turned into a combinatorial bandit.

    Labels are ``1{W x + b > 0}`` for a random linear teacher drawn from
    ``generator_seed``. Contexts are standard normal with a trailing constant
    coordinate. The loss is ``hamming - 1`` with ``hamming`` the fraction of
    wrong bits.
    """

    n_labels: int = 4
    dim: int = 20
    generator_seed: int = 0
    epsilon: float = 0.1
    teacher: np.ndarray = field(init=False, repr=False, compare=False)

    kind = "synthetic_multilabel"

    def __post_init__(self):
        if self.n_labels < 1 or self.dim < 2:
            raise ValueError("need n_labels >= 1 and dim >= 2")
        rng = np.random.default_rng(self.generator_seed)
        object.__setattr__(self, "teacher", rng.standard_normal((self.dim, self.n_labels)))

    @property
    def context_dim(self) -> int:
        return self.dim

    def default_policy(self, weight_bound: float = 100.0) -> PolicySpec:
        return PolicySpec(
            Family.SOFTMAX_KRONECKER,
            epsilon=self.epsilon,
            action_bits=self.n_labels,
            weight_bound=weight_bound,
        )

    def logging_theta(self) -> np.ndarray:
        return np.zeros(self.dim * self.n_labels)

    def sample_contexts(self, n: int, rng: np.random.Generator) -> np.ndarray:
        X = rng.standard_normal((n, self.dim))
        X[:, -1] = 1.0
        return X

    def labels(self, X) -> np.ndarray:
        return (np.asarray(X) @ self.teacher > 0).astype(np.int8)

    def hamming(self, X, A) -> np.ndarray:
        return np.mean(np.asarray(A) != self.labels(X), axis=1)

    def sample_losses(self, X, A, rng: np.random.Generator) -> np.ndarray:
        return self.hamming(X, A) - 1.0

    def expected_loss(self, spec: PolicySpec, theta, X):
        """Exact mean loss over contexts ``X`` and its gradient in theta.

        Bits are independent under the Kronecker policy, so the expected
        Hamming loss is an average of per-bit error probabilities.
        """
        X = np.asarray(X, dtype=float)
        theta = np.asarray(theta, dtype=float)
        s = X @ theta.reshape(self.dim, self.n_labels)
        sig = expit(s)
        p_on = (1.0 - spec.epsilon) * sig + 0.5 * spec.epsilon
        sign = 1.0 - 2.0 * self.labels(X)
        value = float(np.mean(p_on * sign + self.labels(X))) - 1.0
        dp = (1.0 - spec.epsilon) * sig * (1.0 - sig) * sign / (self.n_labels * len(X))
        return value, (X.T @ dp).reshape(-1)

    def optimal_model(self) -> Optional[np.ndarray]:
        return None


EnvSpec = Union[GaussianQuadratic, Pricing, Potential, SyntheticMultilabel]

ENV_KINDS = {
    cls.kind: cls for cls in (GaussianQuadratic, Pricing, Potential, SyntheticMultilabel)
}


def make_env(kind: str, **params) -> EnvSpec:
    try:
        cls = ENV_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown env kind {kind!r}; expected one of {sorted(ENV_KINDS)}") from None
    return cls(**params)


def sample_context(env: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    return env.sample_contexts(1, rng)[0]


def sample_loss(env: EnvSpec, x, a, rng: np.random.Generator) -> float:
    X = np.asarray(x, dtype=float).reshape(1, -1)
    A = np.asarray(a).reshape(1, -1) if np.ndim(a) else np.asarray([a], dtype=float)
    y = float(env.sample_losses(X, A, rng)[0])
    assert -1.0 <= y <= 0.0, y
    return y


def monte_carlo_risk(env: EnvSpec, spec: PolicySpec, theta, n: int, rng: np.random.Generator) -> RiskEstimate:
    """On-policy Monte-Carlo estimate of ``L(theta)`` with its standard error."""
    if n < 1:
        raise ValueError("need at least one sample")
    X = env.sample_contexts(n, rng)
    A, _ = sample_actions(spec, theta, X, rng)
    y = env.sample_losses(X, A, rng)
    stderr = float(np.std(y, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return RiskEstimate(float(np.mean(y)), stderr)


def true_risk(
    env: EnvSpec,
    spec: PolicySpec,
    theta,
    mode: str = "closed_form",
    n: int = 100_000,
    rng: Optional[np.random.Generator] = None,
) -> RiskEstimate:
    """Risk of ``theta``, exact (``closed_form``) or sampled (``monte_carlo``)."""
    if mode == "closed_form":
        if not hasattr(env, "closed_form_risk"):
            raise ValueError(f"{env.kind} has no closed-form risk")
        return RiskEstimate(env.closed_form_risk(spec, theta), 0.0)
    if mode == "monte_carlo":
        if rng is None:
            raise ValueError("monte_carlo mode needs a random generator")
        return monte_carlo_risk(env, spec, theta, n, rng)
    raise ValueError(f"unknown risk mode {mode!r}")


def has_closed_form(env: EnvSpec) -> bool:
    return hasattr(env, "closed_form_risk")


def optimal_model(env: EnvSpec) -> Optional[np.ndarray]:
    """Known optimum, or ``None`` when it has to be found numerically."""
    return env.optimal_model()
