import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from drmpc.risk import (INFINITE_RADIUS, LAMBDA_MIN, AmbiguitySet, dual_epigraph_residual, kl_divergence,
                        nested_recursion_values, optimal_multipliers, risk_dual, risk_primal_oracle, sigmoid_upper)
from drmpc.tree import ConfigurationError, build_tree, paths

UNIFORM = np.array([0.5, 0.5])
interior = st.floats(0.02, 0.98)
payoff = st.floats(-10.0, 10.0)
radius = st.floats(0.0, 3.0)


def _grid_oracle(Z, p, r):
    """Brute-force primal on a fine grid of the binary simplex."""
    t = np.linspace(0.0, 1.0, 200_001)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl = np.nan_to_num(t * np.log(t / p[1])) + np.nan_to_num((1 - t) * np.log((1 - t) / p[0]))
    vals = (1 - t) * Z[0] + t * Z[1]
    return vals[kl <= r].max()


@pytest.mark.parametrize("p, q, expected", [
    (UNIFORM, UNIFORM, 0.0),
    ([1.0, 0.0], UNIFORM, 0.6931),
    ([0.72, 0.28], UNIFORM, 0.1002),
])
def test_kl_values(p, q, expected):
    assert kl_divergence(p, q) == pytest.approx(expected, abs=1e-4)


def test_boundary_example_primal_and_dual():
    r = kl_divergence([0.28, 0.72], UNIFORM)
    amb = AmbiguitySet(UNIFORM, r)
    assert risk_primal_oracle([0.0, 1.0], amb).value == pytest.approx(0.72, abs=1e-6)
    assert risk_dual([0.0, 1.0], amb).value == pytest.approx(0.72, abs=1e-6)
    assert risk_dual([0.0, 1.0], AmbiguitySet(UNIFORM, 0.1002)).value == pytest.approx(0.72, abs=2e-4)


def test_zero_radius_is_expectation():
    assert risk_dual([1.0, 2.0], AmbiguitySet([0.3, 0.7], 0.0)).value == pytest.approx(1.7, abs=1e-15)
    assert risk_primal_oracle([1.0, 2.0], AmbiguitySet([0.3, 0.7], 0.0)).value == pytest.approx(1.7, abs=1e-15)


def test_vertex_reachable_gives_max():
    assert risk_dual([0.0, 1.0], AmbiguitySet(UNIFORM, 0.70)).value == pytest.approx(1.0, abs=1e-6)
    assert risk_dual([0.0, 1.0], AmbiguitySet(UNIFORM, INFINITE_RADIUS)).value == 1.0


def test_dual_matches_grid_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p1 = rng.uniform(0.05, 0.95)
        p = np.array([1 - p1, p1])
        Z, r = rng.uniform(-10, 10, 2), rng.uniform(0, 1.5)
        assert risk_dual(Z, AmbiguitySet(p, r)).value == pytest.approx(_grid_oracle(Z, p, r), abs=2e-3)


def test_dual_matches_scalar_minimization():
    p, Z, r = np.array([0.3, 0.7]), np.array([4.0, -1.0]), 0.4
    obj = lambda s: math.exp(s) * r + math.exp(s) * math.log(p @ np.exp(Z / math.exp(s)))  # noqa: E731
    best = minimize_scalar(obj, bounds=(-8, 8), method="bounded", options={"xatol": 1e-12}).fun
    assert risk_dual(Z, AmbiguitySet(p, r)).value == pytest.approx(best, abs=1e-8)


def test_epigraph_residual_examples():
    amb = AmbiguitySet(UNIFORM, 0.3)
    assert dual_epigraph_residual([2.0, 2.0], 2.0, 0.7, amb) == pytest.approx(0.7 * 0.3)
    assert dual_epigraph_residual([2.0, 2.0], 2.0, 0.7, AmbiguitySet(UNIFORM, 0.0)) == pytest.approx(0.0, abs=1e-15)
    rv = risk_dual([0.0, 1.0], amb)
    assert abs(dual_epigraph_residual([0.0, 1.0], rv.value, rv.lambda_star, amb)) <= 1e-8
    assert dual_epigraph_residual([0.0, 1.0], 1.0 + 1.0 * 0.3 + 0.01, 1.0, amb) < 0
    with pytest.raises(ConfigurationError):
        dual_epigraph_residual([0.0, 1.0], 0.0, 0.0, amb)


def test_sigmoid_values():
    assert sigmoid_upper(0.0) == pytest.approx(1.0)
    assert sigmoid_upper(-2.0, 2.0, 1.5) == pytest.approx(2 / (1 + math.exp(3)), rel=1e-12)
    assert sigmoid_upper(-2.0, 2.0, 1.5) == pytest.approx(0.0949, abs=1e-4)
    assert sigmoid_upper(-1e4) == pytest.approx(0.0, abs=1e-300)
    assert sigmoid_upper(1e4) == pytest.approx(2.0)
    with pytest.raises(ConfigurationError):
        sigmoid_upper(0.0, b=1.0)


def test_nested_depth_one_is_single_risk():
    tree = build_tree(1, 2)
    amb = AmbiguitySet([0.4, 0.6], 0.2)
    vals = nested_recursion_values(tree, [0.0, 3.0, -1.0], {0: amb})
    assert vals[0] == pytest.approx(risk_dual([3.0, -1.0], amb).value, abs=1e-14)


@pytest.mark.parametrize("depth", [1, 2, 3, 4])
def test_nested_limits_against_path_enumeration(depth):
    rng = np.random.default_rng(depth)
    tree = build_tree(depth, 2)
    pay = rng.uniform(-5, 5, tree.node_count)
    q = rng.uniform(0.05, 0.95, tree.node_count)
    nom = {int(i): np.array([1 - q[i], q[i]]) for i in tree.internal}
    zero = nested_recursion_values(tree, pay, {i: AmbiguitySet(p, 0.0) for i, p in nom.items()})
    inf = nested_recursion_values(tree, pay, {i: AmbiguitySet(p, INFINITE_RADIUS) for i, p in nom.items()})
    expectation = sum(np.prod([nom[path[k]][tree.decision_of(path[k + 1])] for k in range(depth)])
                      * pay[path[1:]].sum() for path in paths(tree))
    assert zero[0] == pytest.approx(expectation, abs=1e-10)
    assert inf[0] == pytest.approx(max(pay[p[1:]].sum() for p in paths(tree)), abs=1e-8)


def test_optimal_multipliers_match_scalar_dual():
    rng = np.random.default_rng(5)
    Z = rng.uniform(-5, 5, (30, 2))
    q = rng.uniform(0.05, 0.95, 30)
    P = np.stack([1 - q, q], axis=1)
    lam = optimal_multipliers(Z, np.log(P), 0.25)
    for k in range(30):
        rv = risk_dual(Z[k], AmbiguitySet(P[k], 0.25))
        assert lam[k] == pytest.approx(max(rv.lambda_star, LAMBDA_MIN), rel=1e-6)
    np.testing.assert_array_equal(optimal_multipliers(Z, np.log(P), 0.0), 1.0)


@settings(max_examples=300, deadline=None)
@given(interior, payoff, payoff, radius)
def test_duality_gap(p1, z1, z2, r):
    amb = AmbiguitySet([1 - p1, p1], r)
    assert abs(risk_dual([z1, z2], amb).value - risk_primal_oracle([z1, z2], amb).value) <= 1e-6


@settings(max_examples=200, deadline=None)
@given(interior, payoff, payoff, radius, st.floats(-20, 20), st.floats(0.01, 50))
def test_coherence(p1, z1, z2, r, c, t):
    amb = AmbiguitySet([1 - p1, p1], r)
    Z = np.array([z1, z2])
    base = risk_dual(Z, amb).value
    assert risk_dual(Z + c, amb).value == pytest.approx(base + c, abs=1e-8 * (1 + abs(c) + abs(base)))
    assert risk_dual(t * Z, amb).value == pytest.approx(t * base, abs=1e-8 * (1 + t * abs(base)))
    assert Z.min() - 1e-12 <= base <= Z.max() + 1e-12


@settings(max_examples=100, deadline=None)
@given(interior, payoff, payoff)
def test_monotone_in_radius(p1, z1, z2):
    values = [risk_dual([z1, z2], AmbiguitySet([1 - p1, p1], r)).value for r in np.linspace(0, 3, 50)]
    assert np.all(np.diff(values) >= -1e-10)


def test_invalid_sets():
    with pytest.raises(ConfigurationError):
        AmbiguitySet([0.5, 0.6], 0.1)
    with pytest.raises(ConfigurationError):
        AmbiguitySet([0.0, 1.0], 0.1)
    with pytest.raises(ConfigurationError):
        AmbiguitySet(UNIFORM, -0.1)
