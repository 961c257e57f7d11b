import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drmpc.tree import ConfigurationError, build_tree, paths


def test_depth_one_binary_tree():
    t = build_tree(1, 2)
    assert t.node_count == 3
    assert list(t.leaves) == [1, 2]
    assert t.parent_of(1) == t.parent_of(2) == 0


@pytest.mark.parametrize("horizon, branching, nodes, leaves", [(6, 2, 127, 64), (2, 3, 13, 9)])
def test_node_and_leaf_counts(horizon, branching, nodes, leaves):
    t = build_tree(horizon, branching)
    assert t.node_count == nodes
    assert len(t.leaves) == leaves


def test_paths_small():
    assert paths(build_tree(1, 2)) == [[0, 1], [0, 2]]
    assert paths(build_tree(2, 2)) == [[0, 1, 3], [0, 1, 4], [0, 2, 5], [0, 2, 6]]


def test_paths_horizon_six():
    ps = paths(build_tree(6, 2))
    assert len(ps) == 64
    assert all(len(p) == 7 for p in ps)


def test_decisions_follow_child_order():
    t = build_tree(3, 2)
    assert [t.decision_of(c) for c in t.children_of(0)] == [0, 1]
    assert [t.decision_of(c) for c in t.children_of(5)] == [0, 1]


@pytest.mark.parametrize("horizon, branching", [(0, 2), (3, 0), (3, 1), (-1, 2)])
def test_rejects_bad_shapes(horizon, branching):
    with pytest.raises(ConfigurationError):
        build_tree(horizon, branching)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(2, 4))
def test_structural_invariants(horizon, branching):
    t = build_tree(horizon, branching)
    for node in range(1, t.node_count):
        assert t.depth_of(node) == 1 + t.depth_of(t.parent_of(node))
    kids = [c for node in t.internal for c in t.children_of(int(node))]
    assert sorted([0] + kids) == list(range(t.node_count))
    for p in paths(t):
        assert [t.depth_of(n) for n in p] == list(range(horizon + 1))
