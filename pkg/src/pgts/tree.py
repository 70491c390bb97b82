"""Reasoning tree: nodes, limits, path queries, action constraints and RWSE."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional

import numpy as np

if TYPE_CHECKING:
    from pgts.stepgen.base import StepProposal


class TreeError(Exception):
    """Base class for rejected tree mutations and bad queries."""


class BreadthExceeded(TreeError):
    pass


class DepthExceeded(TreeError):
    pass


class ExpandAfterFinal(TreeError):
    pass


class UnknownNode(TreeError, KeyError):
    pass


@dataclass
class ReasoningNode:
    id: int
    parent: Optional[int]
    depth: int
    content: str
    features: np.ndarray
    edge_reward: float = 0.0  # meaningless for the root
    is_final: bool = False
    children: list[int] = field(default_factory=list)


class ReasoningTree:
    """The revealed part of a reasoning tree plus the searcher's position.

    Node ids are dense and assigned in creation order; children keep creation
    order, so a child's sibling index is its position in ``children``.
    """

    def __init__(
        self,
        root_content: str,
        root_features: np.ndarray,
        depth_limit: int,
        breadth_limit: int,
    ):
        if depth_limit < 1:
            raise ValueError(f"depth_limit must be >= 1, got {depth_limit}")
        if breadth_limit < 1:
            raise ValueError(f"breadth_limit must be >= 1, got {breadth_limit}")
        feats = _check_features(root_features, None)
        self.depth_limit = depth_limit
        self.breadth_limit = breadth_limit
        self.feature_dim = feats.shape[0]
        self.nodes: list[ReasoningNode] = [
            ReasoningNode(0, None, 0, root_content, feats)
        ]
        self.current = 0

    # -- basic queries -------------------------------------------------

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, node_id: int) -> ReasoningNode:
        if not 0 <= node_id < len(self.nodes):
            raise UnknownNode(node_id)
        return self.nodes[node_id]

    @property
    def current_node(self) -> ReasoningNode:
        return self.nodes[self.current]

    @property
    def num_actions(self) -> int:
        return self.depth_limit + 2

    def edges(self) -> list[tuple[int, int, float]]:
        """(parent, child, edge_reward) for every edge, in child-id order."""
        return [(n.parent, n.id, n.edge_reward) for n in self.nodes[1:]]

    def feature_matrix(self) -> np.ndarray:
        return np.stack([n.features for n in self.nodes])

    def clone(self) -> "ReasoningTree":
        return copy.deepcopy(self)

    # -- mutation --------------------------------------------------------

    def add_child(self, parent: int, proposal: "StepProposal") -> int:
        p = self.node(parent)
        if p.is_final:
            raise ExpandAfterFinal(f"node {parent} already holds a final answer")
        if p.depth >= self.depth_limit:
            raise DepthExceeded(f"node {parent} is at the depth limit {self.depth_limit}")
        if len(p.children) >= self.breadth_limit:
            raise BreadthExceeded(f"node {parent} already has {len(p.children)} children")
        feats = _check_features(proposal.features, self.feature_dim)
        new_id = len(self.nodes)
        self.nodes.append(
            ReasoningNode(
                id=new_id,
                parent=parent,
                depth=p.depth + 1,
                content=proposal.content,
                features=feats,
                edge_reward=float(proposal.step_reward),
                is_final=bool(proposal.is_final),
            )
        )
        p.children.append(new_id)
        return new_id

    # -- paths -------------------------------------------------------------

    def path_to_root(self, node_id: int) -> list[int]:
        """Node ids from the root down to ``node_id``."""
        path = []
        n: Optional[int] = self.node(node_id).id
        while n is not None:
            path.append(n)
            n = self.nodes[n].parent
        return path[::-1]

    def path_edge_rewards(self, node_id: int) -> list[float]:
        return [self.nodes[i].edge_reward for i in self.path_to_root(node_id)[1:]]

    def path_edge_reward_sum(self, node_id: int) -> float:
        return float(sum(self.path_edge_rewards(node_id)))

    def path_contents(self, node_id: int) -> list[str]:
        return [self.nodes[i].content for i in self.path_to_root(node_id)]

    def ancestor_at_depth(self, node_id: int, depth: int) -> int:
        path = self.path_to_root(node_id)
        if not 0 <= depth < len(path):
            raise TreeError(f"node {node_id} has no ancestor at depth {depth}")
        return path[depth]

    def has_room(self, node_id: int) -> bool:
        return len(self.nodes[node_id].children) < self.breadth_limit

    # -- validity ------------------------------------------------------------

    def validate(self) -> None:
        """Raise AssertionError if any structural invariant is broken."""
        assert self.nodes and self.nodes[0].parent is None and self.nodes[0].depth == 0
        assert 0 <= self.current < len(self.nodes)
        child_count = 0
        for i, n in enumerate(self.nodes):
            assert n.id == i
            assert n.features.shape == (self.feature_dim,)
            assert np.all(np.isfinite(n.features))
            assert len(n.children) <= self.breadth_limit
            assert n.depth <= self.depth_limit
            assert len(set(n.children)) == len(n.children)
            for c in n.children:
                assert c > i, "children are created after their parent"
                assert self.nodes[c].parent == i
            child_count += len(n.children)
            if i > 0:
                assert n.parent is not None and n.parent < i
                assert i in self.nodes[n.parent].children
                assert n.depth == self.nodes[n.parent].depth + 1
                assert not self.nodes[n.parent].is_final
        assert child_count == len(self.nodes) - 1


def _check_features(features, expected_dim: Optional[int]) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 1:
        raise ValueError(f"features must be a vector, got shape {feats.shape}")
    if expected_dim is not None and feats.shape[0] != expected_dim:
        raise ValueError(f"expected {expected_dim} features, got {feats.shape[0]}")
    if not np.all(np.isfinite(feats)):
        raise ValueError("features contain non-finite values")
    return feats.copy()


# -- constraints ---------------------------------------------------------------


def compute_constraints(tree: ReasoningTree) -> np.ndarray:
    """Validity mask over the D+2 meta-actions at the current node.

    Slot 0 is Expand, 1 is Branch, 2..D are Backtrack(1)..Backtrack(D-1) and
    D+1 is Terminate. Branch and Backtrack(k) always create a new node, so they
    need room under the parent of the node they replace.
    """
    D = tree.depth_limit
    bits = np.zeros(D + 2, dtype=np.int8)
    cur = tree.current_node
    d = cur.depth
    if d < D and not cur.is_final and tree.has_room(cur.id):
        bits[0] = 1
    if d >= 1 and tree.has_room(cur.parent):
        bits[1] = 1
    if d >= 2:
        path = tree.path_to_root(cur.id)
        for k in range(1, min(d - 1, D - 1) + 1):
            if tree.has_room(path[d - k - 1]):
                bits[1 + k] = 1
    if cur.is_final or d == D:
        bits[D + 1] = 1
    return bits


# -- random-walk structural encoding --------------------------------------------


def rwse(tree: ReasoningTree, k_max: int) -> np.ndarray:
    """Return-probabilities of 1..k_max step random walks, one row per node.

    Uses the symmetric normalisation S = Deg^-1/2 Adj Deg^-1/2, which shares the
    diagonal of its powers with the random-walk matrix Deg^-1 Adj.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    n = len(tree)
    out = np.zeros((n, k_max))
    if n == 1:
        return out
    adj = np.zeros((n, n))
    for u, v, _ in tree.edges():
        adj[u, v] = adj[v, u] = 1.0
    inv_sqrt_deg = 1.0 / np.sqrt(adj.sum(axis=1))
    sym = adj * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]
    evals, evecs = np.linalg.eigh(sym)
    weights = evecs**2
    powers = evals[:, None] ** np.arange(1, k_max + 1)[None, :]
    return weights @ powers


# -- serialization -------------------------------------------------------------


def save_tree(tree: ReasoningTree, nodes_path: str | Path, features_path: str | Path) -> None:
    """Write nodes as JSON lines and features as a header line plus float32 LE rows."""
    with open(nodes_path, "w") as f:
        for n in tree.nodes:
            rec = {
                "id": n.id,
                "parent": n.parent,
                "depth": n.depth,
                "content": n.content,
                "edge_reward": n.edge_reward if n.parent is not None else None,
                "is_final": n.is_final,
            }
            f.write(json.dumps(rec) + "\n")
    header = {
        "num_nodes": len(tree),
        "F": tree.feature_dim,
        "depth_limit": tree.depth_limit,
        "breadth_limit": tree.breadth_limit,
        "current": tree.current,
    }
    with open(features_path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode())
        f.write(tree.feature_matrix().astype("<f4").tobytes(order="C"))


def load_tree(nodes_path: str | Path, features_path: str | Path) -> ReasoningTree:
    with open(features_path, "rb") as f:
        header = json.loads(f.readline())
        raw = f.read()
    feats = np.frombuffer(raw, dtype="<f4").reshape(header["num_nodes"], header["F"])
    with open(nodes_path) as f:
        recs = [json.loads(line) for line in f if line.strip()]
    if len(recs) != header["num_nodes"]:
        raise ValueError("node file and feature header disagree on node count")
    tree = ReasoningTree(
        recs[0]["content"], feats[0], header["depth_limit"], header["breadth_limit"]
    )
    for rec in recs[1:]:
        node = ReasoningNode(
            id=rec["id"],
            parent=rec["parent"],
            depth=rec["depth"],
            content=rec["content"],
            features=feats[rec["id"]].astype(np.float64),
            edge_reward=float(rec["edge_reward"]),
            is_final=rec["is_final"],
        )
        tree.nodes.append(node)
        tree.nodes[rec["parent"]].children.append(node.id)
    tree.nodes[0].is_final = recs[0]["is_final"]
    tree.current = header["current"]
    tree.validate()
    return tree
