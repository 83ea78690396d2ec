import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scrm_lab.diagnostics import (
    distance_sweep,
    STUDY_SHIFTS,
    HolderProbe,
    cosine_truth,
    estimator_study,
    fit_power_law,
    gaussian_weight_variance,
    holder_bound_holds,
    holder_gamma,
    holder_ratio,
    mc_risk_oracle,
    quadratic_excess_risk,
    rate_slope,
)
from scrm_lab.engine import RolloutPlan, RolloutRecord, RunResult
from scrm_lab.env import GaussianQuadratic
from scrm_lab.policy import Family, PolicySpec, importance_weights, sample_actions


def test_weight_variance_closed_form():
    assert gaussian_weight_variance(1.0, 1.0) == 0.0
    assert gaussian_weight_variance(0.0, 1.0, 1.0) == pytest.approx(math.e - 1, abs=1e-12)
    assert gaussian_weight_variance(0.0, 0.6, 2.0) == pytest.approx(math.expm1(0.09), rel=1e-15)
    with pytest.raises(ValueError):
        gaussian_weight_variance(0.0, 1.0, 0.0)


def test_weight_variance_sampling_oracle():
    spec = PolicySpec(Family.GAUSSIAN_LINEAR, sigma=2.0, weight_bound=1e9)
    n = 200_000
    X = np.empty((n, 0))
    A, _ = sample_actions(spec, [0.0], X, np.random.default_rng(0))
    w = importance_weights(spec, [1.0], [0.0], X, A)
    u = 1.0 / 4.0
    # Var(w^2) = E w^4 - (E w^2)^2 = e^{6u} - e^{2u}
    se = math.sqrt((math.exp(6 * u) - math.exp(2 * u)) / n)
    assert abs(w.var() - gaussian_weight_variance(0.0, 1.0, 2.0)) <= 4 * se


def test_quadratic_excess_example():
    assert quadratic_excess_risk(1.5, 1.0) == 0.25
    assert quadratic_excess_risk(1.0, 1.0) == 0.0


def test_holder_ratio_examples():
    (theta, r), = holder_ratio(HolderProbe(1.0, [2.0], theta_star=1.0))
    assert r == pytest.approx(math.e - 1, rel=1e-14)
    (_, r), = holder_ratio(HolderProbe(1.0, [1.0 + 1e-4], theta_star=1.0))
    assert abs(r - 1.0) <= 1e-6
    grid = np.linspace(0.0, 2.0, 41)
    grid = grid[np.abs(grid - 1.0) > 1e-9]
    ratios = holder_ratio(HolderProbe(1.0, grid, theta_star=1.0))
    best = max(ratios, key=lambda p: p[1])
    assert best[0] in (0.0, 2.0)
    with pytest.raises(ValueError):
        holder_ratio(HolderProbe(1.0, [0.5, 1.0], theta_star=1.0))
    with pytest.raises(ValueError):
        HolderProbe(1.5, [0.0])


@given(st.floats(0.05, 1.0), st.lists(st.floats(-2, 4).filter(lambda t: abs(t - 1) > 1e-3), min_size=1, max_size=10))
@settings(max_examples=50, deadline=None)
def test_holder_ratio_agrees_with_closed_forms(beta, grid):
    probe = HolderProbe(beta, grid, theta_star=1.0, sigma=1.3)
    for theta, r in holder_ratio(probe):
        ref = math.expm1((theta - 1.0) ** 2 / 1.3**2) / ((theta - 1.0) ** 2) ** beta
        assert abs(r - ref) <= 1e-12 * max(1.0, ref)
    gamma = holder_gamma(probe)
    assert holder_bound_holds(HolderProbe(beta, grid, 1.0, 1.3, gamma))


def test_cosine_truth_matches_analytic():
    for mu in STUDY_SHIFTS + (0.3, -2.0):
        assert abs(cosine_truth(mu) - math.exp(-0.5) * math.cos(mu)) <= 1e-10


@pytest.fixture(scope="module")
def study():
    return estimator_study(n=1000, replications=500, rng=0)


def test_study_layout(study):
    assert len(study) == 20
    assert sorted({r.shift for r in study}) == list(STUDY_SHIFTS)
    for shift in STUDY_SHIFTS:
        assert len({r.truth for r in study if r.shift == shift}) == 1
    with pytest.raises(ValueError):
        estimator_study(replications=50)


def test_study_on_policy_unbiased(study):
    for r in study:
        if r.shift == 0.0:
            assert abs(r.bias) <= 3 * r.bias_stderr


def test_study_deterministic():
    a = estimator_study(shifts=[1.0], n=100, replications=100, rng=3)
    b = estimator_study(shifts=[1.0], n=100, replications=100, rng=3)
    assert a == b


def test_power_law_slopes():
    n = 100 * 2.0 ** np.arange(8)
    slope, intercept, r2 = fit_power_law(n, 3.0 / n)
    assert abs(slope + 1) <= 1e-6 and intercept == pytest.approx(math.log(3.0)) and r2 == pytest.approx(1.0)
    assert abs(fit_power_law(n, 0.7 / np.sqrt(n))[0] + 0.5) <= 1e-6


def test_rate_slope_drops_nonpositive():
    recs = [
        RolloutRecord(m, 100 * 2**m, 100 * (2 ** (m + 1) - 1), 0.0, 0.0, np.zeros(1), np.zeros(1), 0.0, 0.0, d, 0.0, 0.0)
        for m, d in enumerate([0.0] + [5.0 / (100 * (2 ** (m + 1) - 1)) for m in range(1, 6)])
    ]
    with pytest.warns(RuntimeWarning):
        slope, _, _ = rate_slope(RunResult("scrm", 0, recs))
    assert abs(slope + 1) <= 1e-6
    with pytest.raises(ValueError), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit_power_law([1, 2, 3], [1.0, 0.0, -1.0])


def test_mc_risk_oracle():
    env = GaussianQuadratic()
    spec = env.default_policy()
    exact = env.closed_form_risk(spec, [0.4])
    est = mc_risk_oracle(env, spec, [0.4], 100_000, np.random.default_rng(1))
    assert abs(est.value - exact) <= 4 * est.stderr
    assert est == mc_risk_oracle(env, spec, [0.4], 100_000, np.random.default_rng(1))
    small = mc_risk_oracle(env, spec, [0.4], 50_000, np.random.default_rng(2))
    assert small.stderr / est.stderr == pytest.approx(math.sqrt(2), rel=0.05)


def test_distance_sweep_layout_and_selection():
    plan = RolloutPlan(rollouts=3)
    cells, best = distance_sweep([0.0, 1.0], [0.3, 1.0], plan, seeds=[0, 1, 2], threads=2)
    assert len(cells) == 2 * 2 * 3 * 2
    assert len(best) == 2 * 2
    for b in best:
        pool = [c for c in cells if c.delta0 == b.delta0 and c.method == b.method]
        medians = {s: float(np.median([c.final_loss for c in pool if c.sigma == s])) for s in (0.3, 1.0)}
        assert b.best_final_loss == min(medians.values())
        assert medians[b.best_sigma] == b.best_final_loss
    # logging at the optimum: both methods stay near the best achievable loss
    env = GaussianQuadratic(policy_sigma=0.3)
    optimum = env.closed_form_risk(env.default_policy(), [1.0])
    for b in best:
        if b.delta0 == 0.0:
            assert b.best_final_loss <= optimum + 0.01
    with pytest.raises(ValueError):
        distance_sweep([], [1.0], plan, seeds=[0])

