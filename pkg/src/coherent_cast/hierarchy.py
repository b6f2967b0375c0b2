"""Hierarchy trees and the aggregation / constraint / projection matrices.

Nodes are re-indexed in level order (root first); within a level the input
order is kept.  All leaves must sit on the deepest level.
"""

from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg

from .errors import (
    CycleDetected,
    DimensionMismatch,
    DuplicateNode,
    HierarchyError,
    MultipleRoots,
    SingularGram,
    UnbalancedLeafDepth,
    UnknownParent,
)


@dataclass(frozen=True)
class NodeSpec:
    id: str
    parent: str | None = None


@dataclass(frozen=True)
class HierarchyMatrices:
    S: np.ndarray
    S_sum: np.ndarray
    A: np.ndarray
    M: np.ndarray


@dataclass(frozen=True, eq=False)
class Hierarchy:
    """Immutable level-ordered tree.

    ``levels`` are 1-based (root = 1).  ``ancestors[i]`` is the path from
    node ``i`` up to the root, ``children[i]`` the ordered child indices.
    """

    labels: tuple[str, ...]
    parents: tuple[int, ...]
    levels: tuple[int, ...]
    children: tuple[tuple[int, ...], ...]
    ancestors: tuple[tuple[int, ...], ...]
    level_sets: tuple[tuple[int, ...], ...]
    _index: dict = field(repr=False, compare=False, default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def n_levels(self) -> int:
        return len(self.level_sets)

    @property
    def m(self) -> int:
        return len(self.level_sets[-1])

    @property
    def r(self) -> int:
        return self.n - self.m

    @property
    def upper(self) -> tuple[int, ...]:
        return tuple(range(self.r))

    @property
    def bottom(self) -> tuple[int, ...]:
        return tuple(range(self.r, self.n))

    def index(self, label: str) -> int:
        return self._index[label]

    def node_specs(self) -> list[NodeSpec]:
        return [
            NodeSpec(lab, None if p < 0 else self.labels[p])
            for lab, p in zip(self.labels, self.parents)
        ]

    def level_counts(self) -> list[int]:
        return [len(s) for s in self.level_sets]

    @cached_property
    def matrices(self) -> HierarchyMatrices:
        return matrices(self)

    def to_json(self, path: str | Path) -> None:
        doc = {"nodes": [{"id": s.id, "parent": s.parent} for s in self.node_specs()]}
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    def __eq__(self, other):
        if not isinstance(other, Hierarchy):
            return NotImplemented
        return self.labels == other.labels and self.parents == other.parents

    def __hash__(self):
        return hash((self.labels, self.parents))


def build(nodes: Sequence[NodeSpec]) -> Hierarchy:
    if not nodes:
        raise HierarchyError("hierarchy needs at least one node")
    order = {}
    for k, node in enumerate(nodes):
        if node.id in order:
            raise DuplicateNode(f"duplicate node id {node.id!r}")
        order[node.id] = k

    roots = [node.id for node in nodes if node.parent is None]
    if len(roots) > 1:
        raise MultipleRoots(f"found {len(roots)} roots: {roots}")
    for node in nodes:
        if node.parent is not None and node.parent not in order:
            raise UnknownParent(f"node {node.id!r} has unknown parent {node.parent!r}")
    if not roots:
        raise CycleDetected("no root node: every node has a parent, so the graph is cyclic")

    kids: dict[str, list[str]] = {node.id: [] for node in nodes}
    for node in nodes:
        if node.parent is not None:
            kids[node.parent].append(node.id)

    depth = {roots[0]: 1}
    queue = deque([roots[0]])
    while queue:
        cur = queue.popleft()
        for child in kids[cur]:
            depth[child] = depth[cur] + 1
            queue.append(child)
    if len(depth) != len(nodes):
        stuck = sorted(set(order) - set(depth), key=order.get)
        raise CycleDetected(f"nodes unreachable from root (cycle): {stuck}")

    n_levels = max(depth.values())
    for lab, kid_list in kids.items():
        if not kid_list and depth[lab] != n_levels:
            raise UnbalancedLeafDepth(
                f"leaf {lab!r} sits at level {depth[lab]}, expected {n_levels}"
            )

    ordered = sorted(order, key=lambda lab: (depth[lab], order[lab]))
    new_index = {lab: i for i, lab in enumerate(ordered)}
    parents = tuple(
        -1 if nodes[order[lab]].parent is None else new_index[nodes[order[lab]].parent]
        for lab in ordered
    )
    levels = tuple(depth[lab] for lab in ordered)
    children = tuple(tuple(new_index[c] for c in sorted(kids[lab], key=new_index.get)) for lab in ordered)

    ancestors = []
    for i in range(len(ordered)):
        path = [i]
        while parents[path[-1]] >= 0:
            path.append(parents[path[-1]])
        ancestors.append(tuple(path))
    level_sets = tuple(
        tuple(i for i, lv in enumerate(levels) if lv == level) for level in range(1, n_levels + 1)
    )
    return Hierarchy(
        labels=tuple(ordered),
        parents=parents,
        levels=levels,
        children=children,
        ancestors=tuple(ancestors),
        level_sets=level_sets,
        _index=new_index,
    )


def from_parent_map(pairs: Iterable[tuple[str, str | None]]) -> Hierarchy:
    return build([NodeSpec(i, p) for i, p in pairs])


def from_level_counts(counts: Sequence[int], prefix: str = "n") -> Hierarchy:
    """Balanced tree with ``counts[l]`` nodes on level ``l + 1``.

    Nodes of a level are spread over the previous level's nodes in
    contiguous, near-equal groups.
    """
    if not counts or counts[0] != 1:
        raise HierarchyError("level counts must start with a single root")
    if any(b < a for a, b in zip(counts, counts[1:])):
        raise HierarchyError("level counts must be non-decreasing")
    specs = [NodeSpec(f"{prefix}1_0")]
    for lv in range(1, len(counts)):
        above, here = counts[lv - 1], counts[lv]
        for j in range(here):
            parent = (j * above) // here
            specs.append(NodeSpec(f"{prefix}{lv + 1}_{j}", f"{prefix}{lv}_{parent}"))
    return build(specs)


def random_tree(rng: np.random.Generator, max_nodes: int = 57, max_levels: int = 5) -> Hierarchy:
    """Random tree with all leaves on the bottom level and at most
    ``max_nodes`` nodes.  Every node of a level has at least one child."""
    n_levels = int(rng.integers(2, max_levels + 1))
    counts = [1]
    budget = max_nodes - 1
    for lv in range(1, n_levels):
        room = budget - (n_levels - lv - 1) * counts[-1]
        if room < counts[-1]:
            break
        here = int(rng.integers(counts[-1], min(room, 3 * counts[-1] + 1) + 1))
        counts.append(here)
        budget -= here
    specs = [NodeSpec("n1_0")]
    for lv in range(1, len(counts)):
        above, here = counts[lv - 1], counts[lv]
        parents = np.concatenate([np.arange(above), rng.integers(0, above, size=here - above)])
        rng.shuffle(parents)
        specs += [NodeSpec(f"n{lv + 1}_{j}", f"n{lv}_{int(par)}") for j, par in enumerate(parents)]
    return build(specs)


def load_json(path: str | Path) -> Hierarchy:
    doc = json.loads(Path(path).read_text())
    if "nodes" not in doc:
        raise HierarchyError(f"{path}: missing top-level key 'nodes'")
    return build([NodeSpec(str(d["id"]), None if d.get("parent") is None else str(d["parent"])) for d in doc["nodes"]])


def matrices(h: Hierarchy) -> HierarchyMatrices:
    n, m, r = h.n, h.m, h.r
    S = np.zeros((n, m))
    for j, leaf in enumerate(h.bottom):
        for a in h.ancestors[leaf]:
            S[a, j] = 1.0
    S_sum = S[:r].copy()
    A = np.hstack([np.eye(r), -S_sum])
    if r == 0:
        M = np.eye(n)
    else:
        gram = A @ A.T
        try:
            factor = linalg.cho_factor(gram)
        except linalg.LinAlgError as exc:
            raise SingularGram("A A^T is not positive definite") from exc
        M = np.eye(n) - A.T @ linalg.cho_solve(factor, A)
        M = 0.5 * (M + M.T)
    for arr in (S, S_sum, A, M):
        arr.setflags(write=False)
    return HierarchyMatrices(S=S, S_sum=S_sum, A=A, M=M)


def aggregate_bottom(h: Hierarchy, b: np.ndarray) -> np.ndarray:
    """``S @ b``; ``b`` may carry trailing time columns."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != h.m:
        raise DimensionMismatch(f"expected {h.m} bottom values, got {b.shape[0]}")
    return h.matrices.S @ b


def export_csv(mat: np.ndarray, path: str | Path) -> None:
    mat = np.atleast_2d(mat)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(range(mat.shape[1]))
        for row in mat:
            writer.writerow([repr(float(v)) for v in row])


FIG1_NODES = [
    NodeSpec("A"),
    NodeSpec("B", "A"),
    NodeSpec("C", "A"),
    NodeSpec("D", "B"),
    NodeSpec("E", "B"),
    NodeSpec("F", "C"),
    NodeSpec("G", "C"),
    NodeSpec("H", "C"),
]


def fig1() -> Hierarchy:
    """The 8-node, 3-level example tree (5 leaves under two middle nodes)."""
    return build(FIG1_NODES)
