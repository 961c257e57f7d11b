"""Uniform scenario trees with breadth-first integer node ids."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ConfigurationError(ValueError):
    """Raised for invalid problem or experiment configuration."""


@dataclass(frozen=True)
class ScenarioTree:
    """Scenario tree over ``horizon`` steps with ``branching`` decisions per node.

    Node ``0`` is the root.  Children of node ``i`` are
    ``branching * i + 1 + j`` for decision index ``j`` (0-based), so nodes of
    depth ``k`` occupy a contiguous id range and the layout matches a
    breadth-first enumeration.
    """

    horizon: int
    branching: int
    parent: np.ndarray = field(repr=False)
    depth: np.ndarray = field(repr=False)
    decision: np.ndarray = field(repr=False)

    @property
    def node_count(self) -> int:
        return len(self.parent)

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.depth == self.horizon)

    @property
    def internal(self) -> np.ndarray:
        """Non-leaf nodes in id order."""
        return np.flatnonzero(self.depth < self.horizon)

    @property
    def children(self) -> np.ndarray:
        """``(n_internal, branching)`` array of child ids, rows follow :attr:`internal`."""
        base = self.branching * self.internal[:, None] + 1
        return base + np.arange(self.branching)[None, :]

    def parent_of(self, node: int) -> int:
        if node == 0:
            raise KeyError("root has no parent")
        return int(self.parent[node])

    def children_of(self, node: int) -> list[int]:
        if self.depth[node] == self.horizon:
            return []
        first = self.branching * node + 1
        return list(range(first, first + self.branching))

    def depth_of(self, node: int) -> int:
        return int(self.depth[node])

    def decision_of(self, node: int) -> int:
        """0-based decision index that produced ``node`` (root is undefined)."""
        if node == 0:
            raise KeyError("root has no decision")
        return int(self.decision[node])

    def nodes_at_depth(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.depth == k)


def build_tree(horizon: int, branching: int) -> ScenarioTree:
    if int(horizon) != horizon or horizon < 1:
        raise ConfigurationError(f"horizon must be an integer >= 1, got {horizon!r}")
    if int(branching) != branching or branching < 2:
        raise ConfigurationError(f"branching must be an integer >= 2, got {branching!r}")
    horizon, branching = int(horizon), int(branching)
    count = (branching ** (horizon + 1) - 1) // (branching - 1)
    ids = np.arange(count)
    parent = np.full(count, -1)
    parent[1:] = (ids[1:] - 1) // branching
    decision = np.full(count, -1)
    decision[1:] = (ids[1:] - 1) % branching
    depth = np.zeros(count, dtype=int)
    for node in range(1, count):
        depth[node] = depth[parent[node]] + 1
    for arr in (parent, depth, decision):
        arr.setflags(write=False)
    return ScenarioTree(horizon, branching, parent, depth, decision)


def paths(tree: ScenarioTree) -> list[list[int]]:
    """Root-to-leaf node sequences, ordered by leaf id."""
    out = []
    for leaf in tree.leaves:
        node, path = int(leaf), [int(leaf)]
        while node != 0:
            node = int(tree.parent[node])
            path.append(node)
        out.append(path[::-1])
    return out
