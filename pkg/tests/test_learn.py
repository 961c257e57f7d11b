import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from drmpc.decision import FEATURE_BOUND, THETA_TRUE, Dataset, sample_dataset
from drmpc.learn import (NORM_BOUND, LearnedModel, NormBallLogisticRegression, ambiguity_radius, asymptotic_erm_draw,
                         conditional_kl, empirical_risk, erm_fit, excess_risk_bound, excess_risk_mc, true_risk)
from drmpc.tree import ConfigurationError


def _bound_oracle(n, alpha=0.05):
    mpmath.mp.dps = 30
    return float(mpmath.mpf(18) / mpmath.sqrt(n) * (2 + mpmath.sqrt(2 * mpmath.log(2 / mpmath.mpf(alpha)))))


def test_empirical_risk_values():
    data = sample_dataset(30, seed=2)
    assert empirical_risk(np.zeros(2), data) == pytest.approx(math.log(2.0))
    orth = Dataset(np.array([[1.0, -1.0]]), np.array([1]))
    assert empirical_risk(np.array([2.0, 2.0]), orth) == pytest.approx(0.6931, abs=1e-4)
    confident = Dataset(np.array([[1.0, 0.0]]), np.array([-1]))
    assert empirical_risk(np.array([10.0, 0.0]), confident) == pytest.approx(math.log1p(math.exp(-10.0)), rel=1e-12)
    assert empirical_risk(np.array([10.0, 0.0]), confident) == pytest.approx(4.54e-5, abs=1e-7)


@pytest.mark.parametrize("n, expected", [(10**6, 0.08489), (10**9, 0.002685), (10**3, 2.684)])
def test_excess_risk_bound(n, expected):
    assert excess_risk_bound(n) == pytest.approx(_bound_oracle(n), rel=1e-12)
    assert excess_risk_bound(n) == pytest.approx(expected, rel=2e-4)


def test_excess_bound_vanishes():
    assert excess_risk_bound(10**30) < 1e-13


def test_ambiguity_radius_values():
    amb = ambiguity_radius(0.08489)
    assert amb.radius == pytest.approx(0.29136, abs=1e-5)
    assert amb.guarantee == pytest.approx(0.6732, abs=1e-4)
    assert not amb.clipped
    zero = ambiguity_radius(0.0)
    assert (zero.radius, zero.guarantee) == (0.0, 0.95)
    big = ambiguity_radius(2.684)
    assert big.radius == 1.0 and big.guarantee == 0.0 and big.clipped


def test_learned_model_flags_clipped_radius():
    model = LearnedModel(THETA_TRUE, 1000)
    assert model.ambiguity_radius == 1.0
    assert "radius_clipped" in model.flags
    with pytest.raises(ConfigurationError):
        LearnedModel(np.array([5.0, 5.0]), 100)


def test_model_json_round_trip(tmp_path):
    model = LearnedModel(np.array([2.9, 3.05]), 10**6)
    model.to_json(tmp_path / "m.json")
    back = LearnedModel.from_json(tmp_path / "m.json")
    np.testing.assert_array_equal(back.theta_hat, model.theta_hat)
    assert back.ambiguity_radius == model.ambiguity_radius


def test_true_risk_at_truth_has_zero_excess():
    assert excess_risk_mc(THETA_TRUE, THETA_TRUE, n_samples=10_000).mean == 0.0


def test_excess_against_uniform_predictor_is_positive():
    est = excess_risk_mc(np.zeros(2), THETA_TRUE, n_samples=200_000, seed=1)
    assert est.mean > 10 * est.stderr


def test_kl_identity_matches_risk_difference():
    rng = np.random.default_rng(4)
    for _ in range(3):
        theta_hat = rng.uniform(-3, 3, 2)
        kl = excess_risk_mc(theta_hat, THETA_TRUE, n_samples=100_000, seed=9)
        diff = true_risk(theta_hat, THETA_TRUE, n_samples=100_000, seed=9).mean \
            - true_risk(THETA_TRUE, THETA_TRUE, n_samples=100_000, seed=9).mean
        assert abs(kl.mean - diff) <= 3 * kl.stderr + 1e-12


def test_erm_on_boundary_for_separable_labels():
    X = np.tile([[-1.0, -0.5]], (40, 1))
    fit = erm_fit(Dataset(X, np.ones(40, dtype=int)))
    assert np.linalg.norm(fit.theta) == pytest.approx(NORM_BOUND, abs=1e-6)


def test_erm_symmetric_data_gives_zero():
    X = np.array([[1.0, 0.5], [-1.0, -0.5], [1.0, 0.5], [-1.0, -0.5]])
    y = np.array([1, 1, -1, -1])
    np.testing.assert_allclose(erm_fit(Dataset(X, y)).theta, 0.0, atol=1e-8)


def test_erm_consistency_large_n():
    fit = erm_fit(sample_dataset(10**6, THETA_TRUE, seed=0))
    assert fit.converged
    assert np.linalg.norm(fit.theta - THETA_TRUE) <= 0.1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_newton_matches_projected_gradient(seed):
    data = sample_dataset(400, THETA_TRUE, seed=seed)
    newton = erm_fit(data, method="newton")
    pg = erm_fit(data, method="projected_gradient")
    assert newton.objective == pytest.approx(pg.objective, abs=1e-8)
    np.testing.assert_allclose(newton.theta, pg.theta, atol=1e-4)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(20, 300))
def test_erm_objective_independent_of_start(seed, n):
    data = sample_dataset(n, THETA_TRUE, seed=seed)
    rng = np.random.default_rng(seed)
    start = rng.normal(size=2)
    start *= rng.uniform() * NORM_BOUND / np.linalg.norm(start)
    a = erm_fit(data)
    b = erm_fit(data, theta0=start)
    assert np.linalg.norm(a.theta) <= NORM_BOUND * (1 + 1e-12)
    assert a.objective == pytest.approx(b.objective, abs=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10**12), st.floats(0.001, 0.5))
def test_bound_and_radius_ranges(n, alpha):
    r = excess_risk_bound(n, alpha)
    amb = ambiguity_radius(r, alpha)
    assert r > 0
    assert 0 <= amb.radius <= 1
    assert 0 <= amb.guarantee <= 1


def test_asymptotic_draw_concentrates():
    rng = np.random.default_rng(0)
    draws = np.array([asymptotic_erm_draw(10**9, THETA_TRUE, rng) for _ in range(20)])
    assert np.all(np.linalg.norm(draws - THETA_TRUE, axis=1) < 0.01)
    assert np.all(np.linalg.norm(draws, axis=1) <= NORM_BOUND * (1 + 1e-12))


def test_conditional_kl_nonnegative():
    X = np.random.default_rng(1).normal(size=(100, 2))
    assert np.all(conditional_kl(X, THETA_TRUE, np.array([1.0, -2.0])) >= -1e-15)


def test_estimator_api():
    data = sample_dataset(500, THETA_TRUE, seed=8)
    est = NormBallLogisticRegression(alpha=0.05)
    assert clone(est).get_params() == est.get_params()
    est.fit(data.X, data.y)
    np.testing.assert_allclose(est.coef_, erm_fit(data).theta)
    proba = est.predict_proba(data.X)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(np.unique(est.predict(data.X)).tolist()) <= {-1, 1}
    assert est.ambiguity_radius_ == pytest.approx(ambiguity_radius(excess_risk_bound(500)).radius)
    assert est.score(data.X, data.y) > 0.5
    with pytest.raises(ValueError):
        est.fit(data.X, (data.y + 1) // 2)
    assert est.feature_bound == FEATURE_BOUND


def test_conditional_kl_matches_direct_formula():
    from drmpc.decision import true_conditional

    X = np.random.default_rng(2).uniform(-2, 2, size=(50, 2))
    theta_hat = np.array([1.5, -0.5])
    p, q = true_conditional(X, THETA_TRUE), true_conditional(X, theta_hat)
    np.testing.assert_allclose(conditional_kl(X, THETA_TRUE, theta_hat), np.sum(p * np.log(p / q), axis=1),
                               rtol=1e-10, atol=1e-14)
