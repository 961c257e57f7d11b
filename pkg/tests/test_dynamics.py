import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drmpc.dynamics import (KMH, AgentState, WorldParams, collision_margin, distance, kappa, rollout_human,
                            step_agent)
from drmpc.tree import ConfigurationError, build_tree

V0 = 20 * KMH
finite = st.floats(-100.0, 100.0, allow_nan=False)


@pytest.mark.parametrize("state, accel, expected", [
    ((0.0, 0.0), 0.0, (0.0, 0.0)),
    ((-15.0, V0), 0.0, (-9.4444, 5.5556)),
    ((-15.0, V0), -5.0, (-9.4444, 0.5556)),
])
def test_step_agent(state, accel, expected):
    out = step_agent(AgentState(*state), accel, 1.0)
    assert out.position == pytest.approx(expected[0], abs=1e-4)
    assert out.velocity == pytest.approx(expected[1], abs=1e-4)


def test_track_law():
    assert kappa(AgentState(-15.0, V0), "track") == pytest.approx(0.0, abs=1e-12)
    assert kappa(AgentState(-15.0, 0.0), "track") == pytest.approx(2.0)


def test_full_brake_law():
    assert kappa(AgentState(-15.0, V0), "brake") == -5.0
    # a slow human stops within the step rather than reversing
    assert kappa(AgentState(-15.0, 2.0), "brake") == pytest.approx(-2.0)
    assert kappa(AgentState(0.0, 0.0), "brake") == 0.0


def test_stop_line_brake_law():
    a = kappa(AgentState(-15.0, V0), "brake", brake_law="stop_line")
    assert a == pytest.approx(-V0**2 / (2 * 12.5), abs=1e-12)
    assert a == pytest.approx(-1.2346, abs=1e-4)
    # past the stop line the full law applies
    assert kappa(AgentState(-1.0, V0), "brake", brake_law="stop_line") == -5.0


def test_rollout_one_step():
    tree = build_tree(1, 2)
    human = rollout_human(AgentState(-15.0, V0), tree, WorldParams())
    np.testing.assert_allclose(human[1], [-9.4444, 0.5556], atol=1e-4)  # brake
    np.testing.assert_allclose(human[2], [-9.4444, 5.5556], atol=1e-4)  # track
    soft = rollout_human(AgentState(-15.0, V0), tree, WorldParams(brake_law="stop_line"))
    np.testing.assert_allclose(soft[1], [-9.4444, 4.3210], atol=1e-4)


def test_rollout_from_rest_brake_branch_stays_put():
    tree = build_tree(4, 2)
    human = rollout_human(AgentState(0.0, 0.0), tree, WorldParams())
    node = 0
    while node in set(tree.internal.tolist()):
        node = tree.children_of(node)[0]
        np.testing.assert_array_equal(human[node], [0.0, 0.0])


def test_rollout_track_branch_positions():
    tree = build_tree(6, 2)
    human = rollout_human(AgentState(-15.0, V0), tree, WorldParams())
    node, positions = 0, []
    for _ in range(6):
        node = tree.children_of(node)[1]
        positions.append(human[node, 0])
    np.testing.assert_allclose(positions, -15.0 + V0 * np.arange(1, 7), atol=1e-12)


def test_rollout_velocity_never_negative():
    human = rollout_human(AgentState(-15.0, V0), build_tree(6, 2), WorldParams())
    assert np.all(human[:, 1] >= 0.0)


@pytest.mark.parametrize("pe, ph, expected", [(0.0, 0.0, 0.0), (-3.0, -4.0, 5.0), (-15.0, -15.0, 21.2132)])
def test_distance(pe, ph, expected):
    assert distance(AgentState(pe, 0.0), AgentState(ph, 0.0)) == pytest.approx(expected, abs=1e-4)


def test_collision_margin():
    p = WorldParams()
    assert p.d_safe == 3.0
    assert collision_margin(AgentState(-3.0, 0.0), AgentState(0.0, 0.0), p) == pytest.approx(0.0)
    assert collision_margin(AgentState(-15.0, V0), AgentState(-15.0, V0), p) == pytest.approx(-18.2132, abs=1e-4)
    assert collision_margin(AgentState(0.0, 0.0), AgentState(0.0, 0.0), p) == pytest.approx(3.0)


def test_world_params_validation():
    with pytest.raises(ConfigurationError):
        WorldParams(dt=0.0)
    with pytest.raises(ConfigurationError):
        WorldParams(brake_law="gentle")
    with pytest.raises(ValueError):
        kappa(AgentState(0.0, 0.0), 7)


@settings(max_examples=200, deadline=None)
@given(finite, st.floats(0.0, 50.0), st.sampled_from(["brake", "track"]), st.sampled_from(["full", "stop_line"]))
def test_kappa_bounded(p, v, decision, law):
    a = kappa(AgentState(p, v), decision, brake_law=law)
    assert -5.0 <= a <= 5.0


@settings(max_examples=100, deadline=None)
@given(finite, st.floats(-30.0, 30.0), st.integers(1, 20))
def test_zero_accel_steps_are_exact(p, v, k):
    s = AgentState(p, v)
    for _ in range(k):
        s = step_agent(s, 0.0, 1.0)
    assert s.position == pytest.approx(p + k * v, abs=1e-9 * (1 + abs(p) + k * abs(v)))
    assert s.velocity == v


@settings(max_examples=50, deadline=None)
@given(finite, finite)
def test_margin_matches_hypot(pe, ph):
    g = collision_margin(AgentState(pe, 0.0), AgentState(ph, 0.0), WorldParams())
    assert g == pytest.approx(3.0 - math.hypot(pe, ph))
