import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import norm

from scrm_lab.env import (
    GaussianQuadratic,
    Potential,
    Pricing,
    SyntheticMultilabel,
    clamped_quadratic_risk,
    make_env,
    monte_carlo_risk,
    optimal_model,
    sample_context,
    sample_loss,
    true_risk,
)
from scrm_lab.policy import Family, PolicySpec, all_actions, log_prob, sample_actions

ENVS = [GaussianQuadratic(), Pricing(), Potential(), SyntheticMultilabel()]


def test_pricing_contexts_in_box():
    X = Pricing().sample_contexts(5000, np.random.default_rng(0))
    assert X.shape == (5000, 10)
    assert X.min() >= 1.0 and X.max() <= 2.0


def test_quadratic_context_empty():
    assert sample_context(GaussianQuadratic(), np.random.default_rng(0)).shape == (0,)


def test_potential_groups():
    env = Potential(p_floor=-np.inf)
    X = env.sample_contexts(200_000, np.random.default_rng(1))
    p = X[:, 0]
    assert np.all(X[:, 1] == 1.0)
    # mixture of N(1, .25) and N(3, .25)
    assert p.mean() == pytest.approx(2.0, abs=0.01)
    assert p.var() == pytest.approx(0.25 + 1.0, abs=0.02)
    low = p[p < 2.0]
    assert low.mean() == pytest.approx(1.0, abs=0.02)


def test_quadratic_loss_at_optimum():
    env = GaussianQuadratic(theta_star=1.0, sigma_star=1e-12)
    assert sample_loss(env, np.empty(0), 1.0, np.random.default_rng(0)) == pytest.approx(-1.0, abs=1e-12)


def test_pricing_raw_revenue():
    env = Pricing(k=3, l=1)
    X = np.array([[1.0, 1.7, 1.2]])
    assert env.raw_revenue(X, np.array([1.0]), 0.0)[0] == pytest.approx(1.4)


def test_multilabel_uniform_hamming():
    env = SyntheticMultilabel()
    rng = np.random.default_rng(2)
    X = env.sample_contexts(50, rng)
    acts = all_actions(env.n_labels)
    ham = np.mean([env.hamming(np.repeat(x[None], len(acts), 0), acts).mean() for x in X])
    assert ham == pytest.approx(0.5, abs=1e-12)
    spec = env.default_policy()
    value, _ = env.expected_loss(PolicySpec(Family.SOFTMAX_KRONECKER, epsilon=0.5, action_bits=4), np.zeros(80), X)
    assert value == pytest.approx(-0.5, abs=1e-12)
    assert spec.action_bits == 4


def test_multilabel_expected_loss_by_enumeration():
    env = SyntheticMultilabel(n_labels=3, dim=5, generator_seed=3)
    spec = env.default_policy()
    rng = np.random.default_rng(4)
    X = env.sample_contexts(7, rng)
    theta = rng.normal(size=15)
    acts = all_actions(3)
    total = 0.0
    for x in X:
        xs = np.repeat(x[None], len(acts), 0)
        total += np.sum(np.exp(log_prob(spec, theta, xs, acts)) * (env.hamming(xs, acts) - 1.0))
    value, grad = env.expected_loss(spec, theta, X)
    assert value == pytest.approx(total / len(X), abs=1e-12)
    h = 1e-6
    fd = [(env.expected_loss(spec, theta + h * e, X)[0] - env.expected_loss(spec, theta - h * e, X)[0]) / (2 * h) for e in np.eye(15)]
    assert np.allclose(grad, fd, atol=1e-8)


@pytest.mark.parametrize("env", ENVS, ids=lambda e: e.kind)
def test_losses_bounded(env):
    rng = np.random.default_rng(5)
    spec = env.default_policy()
    theta = env.logging_theta()
    for scale in (0.0, 3.0):
        X = env.sample_contexts(20000, rng)
        A, _ = sample_actions(spec, theta + scale * rng.normal(size=theta.size) / max(theta.size, 1), X, rng)
        y = env.sample_losses(X, A, rng)
        assert np.all((y >= -1.0) & (y <= 0.0))


@given(shift=st.floats(-3, 3), scale=st.floats(0.05, 3))
@settings(max_examples=40, deadline=None)
def test_clamped_risk_matches_quadrature(shift, scale):
    f = lambda z: min(z * z - 1.0, 0.0) * norm.pdf(z, shift, scale)
    ref, _ = integrate.quad(f, -1.0, 1.0, epsabs=1e-13, epsrel=1e-12)
    assert clamped_quadratic_risk(shift, scale) == pytest.approx(ref, abs=1e-10)


def test_quadratic_closed_form_vs_monte_carlo():
    env = GaussianQuadratic()
    spec = env.default_policy()
    for theta in (0.0, 0.5, 1.0, 1.8):
        exact = true_risk(env, spec, [theta]).value
        mc = monte_carlo_risk(env, spec, [theta], 200_000, np.random.default_rng(int(theta * 10)))
        assert abs(mc.value - exact) <= 4 * mc.stderr


def test_quadratic_minimum_at_theta_star():
    env = GaussianQuadratic()
    spec = env.default_policy()
    best = true_risk(env, spec, [1.0]).value
    for t in np.linspace(-1, 3, 41):
        assert true_risk(env, spec, [t]).value >= best - 1e-15


def test_true_risk_modes():
    env = Pricing()
    spec = env.default_policy()
    theta = env.logging_theta()
    with pytest.raises(ValueError):
        true_risk(env, spec, theta, "closed_form")
    with pytest.raises(ValueError):
        true_risk(env, spec, theta, "monte_carlo")
    r1 = true_risk(env, spec, theta, "monte_carlo", 100_000, np.random.default_rng(7))
    r2 = true_risk(env, spec, theta, "monte_carlo", 100_000, np.random.default_rng(7))
    assert r1 == r2 and r1.stderr > 0


def test_optimal_models():
    assert optimal_model(GaussianQuadratic(theta_star=1.0)).tolist() == [1.0]
    assert optimal_model(Pricing()) is None
    assert optimal_model(Potential()) is None


def test_make_env():
    assert make_env("gaussian_quadratic", theta_star=2.0).theta_star == 2.0
    with pytest.raises(ValueError):
        make_env("nope")


def test_stationary_streams():
    # identical generator state gives identical contexts whatever rollout asked for them
    env = Pricing()
    a = env.sample_contexts(10, np.random.default_rng(3))
    b = env.sample_contexts(10, np.random.default_rng(3))
    assert np.array_equal(a, b)
