import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from oracles import FAMILIES, central_diff, gaussian_pdf, rel_err
from scrm_lab.policy import (
    Family,
    PolicySpec,
    PropensityError,
    WeightBoundWarning,
    all_actions,
    check_params,
    grad_log_density,
    importance_weight,
    importance_weights,
    log_density,
    log_prob,
    lognormal_moment_matched,
    sample_action,
    sample_actions,
    score,
)

GAUSS = PolicySpec(Family.GAUSSIAN_LINEAR, sigma=1.0)


def test_gaussian_log_density_at_mean():
    assert log_density(GAUSS, np.zeros(3), np.array([0.3, -1.0, 2.0]), 0.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    assert log_density(GAUSS, np.zeros(1), np.array([4.0]), 0.0) == pytest.approx(-0.9189385332, abs=1e-10)


def test_softmax_zero_logits_uniform():
    spec = PolicySpec(Family.SOFTMAX_KRONECKER, action_bits=2)
    x = np.array([0.5, -1.0])
    for a in all_actions(2):
        assert log_density(spec, np.zeros(4), x, a) == pytest.approx(-math.log(4), abs=1e-14)


def test_gaussian_density_matches_pdf():
    spec = PolicySpec(Family.GAUSSIAN_LINEAR, sigma=0.5)
    got = math.exp(log_density(spec, np.array([1.0]), np.array([2.0]), 2.5))
    assert got == pytest.approx(gaussian_pdf(2.5, 2.0, 0.5), rel=1e-13)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        log_density(GAUSS, np.zeros(2), np.ones(3), 0.0)
    spec = PolicySpec(Family.SOFTMAX_KRONECKER, action_bits=2)
    with pytest.raises(ValueError):
        log_density(spec, np.zeros(4), np.ones(2), np.array([1, 0, 1]))


def test_spec_validation():
    with pytest.raises(ValueError):
        PolicySpec(Family.GAUSSIAN_LINEAR, sigma=0.0)
    with pytest.raises(ValueError):
        PolicySpec(Family.SOFTMAX_KRONECKER, epsilon=1.0)
    with pytest.raises(ValueError):
        PolicySpec(Family.GAUSSIAN_LINEAR, weight_bound=0.5)
    with pytest.raises(ValueError):
        check_params([np.nan])
    with pytest.raises(ValueError):
        check_params([3.0, 4.0], radius=1.0)


def test_lognormal_moment_matching():
    eta, sigma = lognormal_moment_matched(2.0, 1.0)
    mean = math.exp(eta + sigma**2 / 2)
    var = (math.exp(sigma**2) - 1) * math.exp(2 * eta + sigma**2)
    assert mean == pytest.approx(2.0, rel=1e-12)
    assert var == pytest.approx(1.0, rel=1e-12)


def test_sampling_degenerate_sigma():
    spec = PolicySpec(Family.GAUSSIAN_LINEAR, sigma=1e-8)
    theta, x = np.array([0.7, -0.2]), np.array([1.5, 2.0])
    a, _ = sample_action(spec, theta, x, np.random.default_rng(1))
    assert a == pytest.approx(theta @ x, abs=1e-6)


def test_sampling_uniform_mixture():
    spec = PolicySpec(Family.SOFTMAX_KRONECKER, epsilon=1.0 - 1e-15, action_bits=3)
    X = np.random.default_rng(0).normal(size=(20000, 2))
    A, _ = sample_actions(spec, np.full(6, 3.0), X, np.random.default_rng(2))
    codes = A @ (2 ** np.arange(3)[::-1])
    freq = np.bincount(codes, minlength=8) / len(codes)
    assert np.all(np.abs(freq - 1 / 8) <= 4 / math.sqrt(len(codes)))


def test_sampling_mean():
    X = np.ones((100_000, 1))
    A, _ = sample_actions(GAUSS, np.array([1.0]), X, np.random.default_rng(3))
    assert abs(A.mean() - 1.0) <= 0.02


def test_propensity_same_code_path():
    rng = np.random.default_rng(4)
    for family in FAMILIES:
        spec = PolicySpec(family, sigma=0.7, epsilon=0.2, action_bits=2)
        d = 4 if spec.discrete else 2
        theta, x = rng.normal(size=d), rng.uniform(0.5, 1.5, size=2)
        a, p = sample_action(spec, theta, x, np.random.default_rng(5))
        assert p == math.exp(log_density(spec, theta, x, a))


def test_sampling_deterministic():
    X = np.random.default_rng(0).normal(size=(50, 2))
    for family in FAMILIES:
        spec = PolicySpec(family, epsilon=0.1, action_bits=2)
        d = 4 if spec.discrete else 2
        a1, p1 = sample_actions(spec, np.full(d, 0.1), X, np.random.default_rng(9))
        a2, p2 = sample_actions(spec, np.full(d, 0.1), X, np.random.default_rng(9))
        assert np.array_equal(a1, a2) and np.array_equal(p1, p2)


def test_gaussian_score_examples():
    theta, x = np.array([0.5, -0.25]), np.array([1.0, 2.0])
    assert np.all(grad_log_density(GAUSS, theta, x, theta @ x) == 0.0)
    assert grad_log_density(GAUSS, np.array([0.0]), np.array([2.0]), 1.0) == pytest.approx([2.0])


@pytest.mark.parametrize("family", FAMILIES)
def test_score_matches_finite_differences(family):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        spec = PolicySpec(family, sigma=rng.uniform(0.3, 2.0), epsilon=rng.uniform(0, 0.5), action_bits=3)
        k = 3
        d = k * 3 if spec.discrete else k
        theta = rng.normal(size=d)
        x = rng.uniform(0.2, 2.0, size=k)
        a, _ = sample_action(spec, theta, x, rng)
        fd = central_diff(lambda t: log_density(spec, t, x, a), theta)
        worst = max(worst, rel_err(grad_log_density(spec, theta, x, a), fd))
    assert worst <= 1e-5


@pytest.mark.parametrize("family", [Family.GAUSSIAN_LINEAR, Family.LOGNORMAL])
def test_continuous_normalization(family):
    spec = PolicySpec(family, sigma=0.6)
    theta, x = np.array([0.4, 0.3]), np.array([1.0, 1.0])
    lo, hi = (-10.0, 10.0) if family is Family.GAUSSIAN_LINEAR else (1e-12, 200.0)
    total, _ = integrate.quad(lambda a: math.exp(log_density(spec, theta, x, a)), lo, hi, limit=400, points=[0.7, 2.0])
    assert total == pytest.approx(1.0, abs=1e-4)


@given(bits=st.integers(1, 12), eps=st.floats(0.0, 0.99), seed=st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_discrete_normalization(bits, eps, seed):
    rng = np.random.default_rng(seed)
    spec = PolicySpec(Family.SOFTMAX_KRONECKER, epsilon=eps, action_bits=bits)
    x = rng.normal(size=2)
    acts = all_actions(bits)
    lp = log_prob(spec, rng.normal(size=2 * bits), np.repeat(x[None], len(acts), 0), acts)
    assert abs(np.exp(lp).sum() - 1.0) <= 1e-12


def test_kronecker_order():
    spec = PolicySpec(Family.SOFTMAX_KRONECKER, action_bits=2)
    rng = np.random.default_rng(0)
    theta, x = rng.normal(size=6), rng.normal(size=3)
    acts = all_actions(2)
    logits = np.array([theta @ np.kron(x, a) for a in acts])
    expected = logits - np.log(np.exp(logits).sum())
    got = log_prob(spec, theta, np.repeat(x[None], 4, 0), acts)
    assert np.allclose(got, expected, atol=1e-13)


def test_weight_identity_and_hand_value():
    x = np.empty(0)
    assert importance_weight(GAUSS, [0.3], [0.3], x, 1.7) == 1.0
    assert importance_weight(GAUSS, [1.0], [0.0], x, 0.5) == pytest.approx(1.0, abs=1e-15)


def test_weight_variance_matches_closed_form():
    n = 400_000
    X = np.empty((n, 0))
    A, _ = sample_actions(GAUSS, [0.0], X, np.random.default_rng(6))
    w = importance_weights(PolicySpec(Family.GAUSSIAN_LINEAR, weight_bound=1e9), [1.0], [0.0], X, A)
    assert abs(w.mean() - 1.0) <= 4 * w.std() / math.sqrt(n)
    # var of w^2 is e^6 - e^4 for a unit shift
    se = math.sqrt((math.exp(6) - math.exp(2) ** 2) / n)
    assert abs(w.var() - (math.e - 1)) <= 4 * se


def test_weight_bound_warns_not_truncates():
    spec = PolicySpec(Family.GAUSSIAN_LINEAR, weight_bound=2.0)
    with pytest.warns(WeightBoundWarning):
        w = importance_weight(spec, [3.0], [0.0], np.empty(0), 3.0)
    assert w == pytest.approx(math.exp(4.5))


def test_tiny_propensity_raises():
    spec = PolicySpec(Family.GAUSSIAN_LINEAR, sigma=0.1)
    with pytest.raises(PropensityError):
        importance_weight(spec, [5.0], [0.0], np.empty(0), 5.0)


def test_score_batched_matches_single():
    rng = np.random.default_rng(8)
    spec = PolicySpec(Family.SOFTMAX_KRONECKER, epsilon=0.3, action_bits=2)
    theta, X = rng.normal(size=4), rng.normal(size=(5, 2))
    A, _ = sample_actions(spec, theta, X, rng)
    S = score(spec, theta, X, A)
    for i in range(5):
        assert np.allclose(S[i], grad_log_density(spec, theta, X[i], A[i]), atol=0, rtol=0)
