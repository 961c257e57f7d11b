import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drmpc.decision import (FEATURE_BOUND, THETA_TRUE, Dataset, feature_matrix, features, sample_dataset, sigma,
                            true_conditional)
from drmpc.dynamics import KMH
from drmpc.tree import ConfigurationError


def test_features_at_crossing_are_zero():
    assert feature_matrix(0.0, 3.0, 0.0, 3.0).tolist() == [0.0, 0.0]


def test_feature_values():
    f_ego, f_hum = features(-15.0, 20 * KMH, -1.0, 0.0, 0.1)
    # independent arithmetic: 15 / sqrt((50/9)**2 + 0.01)
    assert f_ego == pytest.approx(15.0 / np.sqrt((50.0 / 9.0) ** 2 + 0.01), rel=1e-14)
    assert f_ego == pytest.approx(2.69957, abs=1e-5)
    assert f_hum == pytest.approx(10.0)


def test_true_conditional_values():
    np.testing.assert_allclose(true_conditional([0.0, 0.0], THETA_TRUE), [0.5, 0.5])
    assert true_conditional([1.0, 1.0], THETA_TRUE)[1] == pytest.approx(1 / (1 + np.exp(6)), rel=1e-12)
    assert true_conditional([1.0, 1.0], THETA_TRUE)[1] == pytest.approx(0.00247, abs=1e-5)
    assert true_conditional([-1.0, -1.0], THETA_TRUE)[1] == pytest.approx(0.99753, abs=1e-5)


def test_sample_dataset_reference_size():
    data = sample_dataset(1000, THETA_TRUE, FEATURE_BOUND, seed=3)
    assert len(data) == 1000
    assert np.all(np.linalg.norm(data.X, axis=1) <= 4.2426 + 1e-9)
    assert set(np.unique(data.y).tolist()) <= {-1, 1}


def test_sample_dataset_deterministic():
    a, b = sample_dataset(200, seed=11), sample_dataset(200, seed=11)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.y, b.y)


def test_uniform_labels_balanced():
    n = 40_000
    data = sample_dataset(n, np.zeros(2), seed=5)
    assert abs(data.y.mean()) <= 3 / np.sqrt(n)


def test_label_frequency_at_fixed_feature():
    rng = np.random.default_rng(0)
    x = np.array([0.2, -0.1])
    p = true_conditional(x, THETA_TRUE)[1]
    freq = np.mean(rng.random(100_000) < p)
    assert abs(freq - p) <= 0.01


def test_csv_round_trip(tmp_path):
    data = sample_dataset(25, seed=1)
    data.to_csv(tmp_path / "d.csv")
    back = Dataset.from_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.X, data.X)
    np.testing.assert_array_equal(back.y, data.y)


def test_bad_sample_arguments():
    with pytest.raises(ConfigurationError):
        sample_dataset(0)
    with pytest.raises(ConfigurationError):
        sample_dataset(10, B=-1.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-500.0, 500.0))
def test_sigma_symmetry(z):
    assert sigma(z) + sigma(-z) == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(-4.0, 4.0), st.floats(-4.0, 4.0), st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
def test_conditional_is_simplex_point(x1, x2, t1, t2):
    p = true_conditional([x1, x2], [t1, t2])
    assert p.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.all(p > 0) and np.all(p < 1)
