"""Scenario trees, trajectory trees and their traversal helpers.

Nodes are numbered breadth first, so parents precede children and every
time step occupies a contiguous index range. All leaves sit at the horizon
``N``; because of the breadth-first order they are the last ``n_leaves``
indices, and the non-leaf nodes are exactly ``range(n_nonleaf)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .errors import TreeError

NO_BRANCHING = -1


class Branching(NamedTuple):
    """Every node at ``step`` splits into ``len(weights)`` children."""

    step: int
    weights: tuple[float, ...]

    @property
    def arity(self) -> int:
        return len(self.weights)


@dataclass(frozen=True, eq=False)
class TreeTopology:
    """Immutable balanced scenario tree.

    ``weight[i]`` is the probability of reaching node ``i`` (root = 1), so
    children's weights add up to their parent's.
    """

    parent: np.ndarray
    time_step: np.ndarray
    weight: np.ndarray
    horizon: int
    branchings: tuple[Branching, ...] = ()
    children: tuple[tuple[int, ...], ...] = field(repr=False, default=())

    @property
    def node_count(self) -> int:
        return int(self.parent.shape[0])

    @property
    def n_leaves(self) -> int:
        return self.node_count - self.n_nonleaf

    @cached_property
    def n_nonleaf(self) -> int:
        return int(np.count_nonzero(self.time_step < self.horizon))

    @property
    def leaf_set(self) -> frozenset[int]:
        return frozenset(range(self.n_nonleaf, self.node_count))

    @cached_property
    def leaves(self) -> np.ndarray:
        return np.arange(self.n_nonleaf, self.node_count)

    @property
    def last_branch_step(self) -> int:
        """``N_b``: last step where a node has two or more children, else -1."""
        return self.branchings[-1].step if self.branchings else NO_BRANCHING

    def is_leaf(self, i: int) -> bool:
        return i >= self.n_nonleaf

    def step_range(self, k: int) -> range:
        """Contiguous index range of the nodes at step ``k``."""
        if not 0 <= k <= self.horizon:
            raise TreeError(f"step {k} outside [0, {self.horizon}]")
        lo = int(np.searchsorted(self.time_step, k, side="left"))
        hi = int(np.searchsorted(self.time_step, k, side="right"))
        return range(lo, hi)

    def descendant_leaf_count(self) -> np.ndarray:
        """Number of leaves below each node (1 for a leaf)."""
        count = np.zeros(self.node_count, dtype=int)
        count[self.n_nonleaf:] = 1
        for i in range(self.node_count - 1, 0, -1):
            count[self.parent[i]] += count[i]
        return count

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "branchings": [
                {"step": b.step, "arity": b.arity, "weights": list(b.weights)}
                for b in self.branchings
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


class TreePath(NamedTuple):
    node_sequence: tuple[int, ...]


@dataclass
class TrajectoryTree:
    """States on every node, inputs on the non-leaf nodes only.

    ``states`` has shape ``(node_count, n_x)``; ``inputs`` has shape
    ``(n_nonleaf, n_u)`` and row ``i`` belongs to node ``i``.
    """

    states: np.ndarray
    inputs: np.ndarray

    def copy(self) -> "TrajectoryTree":
        return TrajectoryTree(self.states.copy(), self.inputs.copy())

    def step(self, alpha: float, dx: np.ndarray, du: np.ndarray) -> "TrajectoryTree":
        return TrajectoryTree(self.states + alpha * dx, self.inputs + alpha * du)


def _normalize_branchings(horizon, branching_spec) -> tuple[Branching, ...]:
    out = []
    for item in branching_spec:
        if isinstance(item, Mapping):
            step = item["step"]
            weights = item.get("weights")
            arity = item.get("arity", len(weights) if weights is not None else None)
        else:
            step, arity, weights = item
        if arity is None:
            raise TreeError("branching needs an arity or weights")
        arity = int(arity)
        if weights is None:
            weights = [1.0 / arity] * arity
        weights = tuple(float(w) for w in weights)
        if len(weights) != arity:
            raise TreeError(f"branching at step {step}: {arity} children but {len(weights)} weights")
        if arity < 2:
            raise TreeError(f"branching at step {step} has arity {arity} < 2")
        if any(w <= 0.0 for w in weights):
            raise TreeError(f"branching at step {step}: weights must be positive")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise TreeError(f"branching at step {step}: weights sum to {sum(weights)!r}, not 1")
        step = int(step)
        if not 0 <= step < horizon:
            raise TreeError(f"branching step {step} must lie in [0, {horizon - 1}]")
        out.append(Branching(step, weights))
    steps = [b.step for b in out]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise TreeError(f"branching steps must be strictly increasing, got {steps}")
    return tuple(out)


def build_tree(horizon: int, branching_spec: Iterable = ()) -> TreeTopology:
    """Build a balanced tree of depth ``horizon``.

    ``branching_spec`` holds ``(step, arity, weights)`` triples or mappings
    with those keys; ``weights`` are conditional probabilities per parent.
    """
    horizon = int(horizon)
    if horizon < 1:
        raise TreeError(f"horizon must be >= 1, got {horizon}")
    branchings = _normalize_branchings(horizon, branching_spec)
    by_step = {b.step: b.weights for b in branchings}

    parent = [-1]
    time_step = [0]
    weight = [1.0]
    level = [0]
    for k in range(horizon):
        split = by_step.get(k, (1.0,))
        nxt = []
        for i in level:
            for w in split:
                parent.append(i)
                time_step.append(k + 1)
                weight.append(weight[i] * w)
                nxt.append(len(parent) - 1)
        level = nxt

    parent = np.asarray(parent, dtype=int)
    children: list[list[int]] = [[] for _ in parent]
    for i in range(1, len(parent)):
        children[parent[i]].append(i)
    parent.setflags(write=False)
    time_step = np.asarray(time_step, dtype=int)
    time_step.setflags(write=False)
    weight = np.asarray(weight)
    weight.setflags(write=False)
    return TreeTopology(
        parent=parent,
        time_step=time_step,
        weight=weight,
        horizon=horizon,
        branchings=branchings,
        children=tuple(tuple(c) for c in children),
    )


def tree_from_dict(spec: Mapping) -> TreeTopology:
    """Inverse of :meth:`TreeTopology.to_dict`."""
    return build_tree(spec["horizon"], spec.get("branchings", ()))


def tree_from_json(text: str) -> TreeTopology:
    return tree_from_dict(json.loads(text))


def path_graph(horizon: int) -> TreeTopology:
    return build_tree(horizon, ())


def flatten(topology: TreeTopology) -> list[TreePath]:
    """One root-to-leaf path per leaf, ordered by leaf index."""
    paths = []
    N = topology.horizon
    for leaf in topology.leaves:
        seq = [0] * (N + 1)
        i = int(leaf)
        for k in range(N, -1, -1):
            seq[k] = i
            i = int(topology.parent[i])
        paths.append(TreePath(tuple(seq)))
    return paths


def truncated_paths(topology: TreeTopology, last_step: int) -> list[TreePath]:
    """Paths from the root to every node at ``last_step``, in index order."""
    paths = []
    for end in topology.step_range(last_step):
        seq = [0] * (last_step + 1)
        i = end
        for k in range(last_step, -1, -1):
            seq[k] = i
            i = int(topology.parent[i])
        paths.append(TreePath(tuple(seq)))
    return paths


def nodes_at_step(topology: TreeTopology, k: int) -> set[int]:
    return set(topology.step_range(k))


def segments(topology: TreeTopology) -> list[tuple[int, ...]]:
    """Split the tree into maximal single-child chains.

    A segment starts at the root or at a child of a branching node and ends
    at a branching node or a leaf. Segments come out in topological order,
    so a segment's predecessor (the parent of its head) is always finished
    before it.
    """
    out = []
    heads = [0]
    while heads:
        head = heads.pop(0)
        chain = [head]
        i = head
        while len(topology.children[i]) == 1:
            i = topology.children[i][0]
            chain.append(i)
        out.append(tuple(chain))
        heads.extend(topology.children[i])
    return out


def chain_to_leaf(topology: TreeTopology, start: int) -> list[int]:
    """Nodes from ``start`` down to its unique leaf; ``start`` must be past N_b."""
    chain = [start]
    i = start
    while topology.children[i]:
        if len(topology.children[i]) != 1:
            raise TreeError(f"node {i} branches; no unique leaf below {start}")
        i = topology.children[i][0]
        chain.append(i)
    return chain


def check_invariants(topology: TreeTopology, atol: float = 1e-12) -> None:
    """Raise :class:`TreeError` if any structural invariant fails."""
    t = topology.time_step
    if t[0] != 0 or topology.parent[0] != -1:
        raise TreeError("root must be node 0 at step 0")
    for i in range(1, topology.node_count):
        if t[topology.parent[i]] != t[i] - 1:
            raise TreeError(f"node {i}: parent not one step earlier")
    if np.any(np.diff(t) < 0):
        raise TreeError("nodes are not in breadth-first order")
    if abs(topology.weight[0] - 1.0) > atol:
        raise TreeError("root weight must be 1")
    for i, ch in enumerate(topology.children):
        if ch and abs(sum(topology.weight[j] for j in ch) - topology.weight[i]) > atol:
            raise TreeError(f"children of node {i} do not conserve weight")
    if np.any(t[topology.n_nonleaf:] != topology.horizon):
        raise TreeError("unbalanced tree: leaves at different depths")
    if np.any(t[: topology.n_nonleaf] >= topology.horizon):
        raise TreeError("non-leaf nodes must be above the horizon")

