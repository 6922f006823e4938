"""Extremely randomized trees grown on replicated instance labels.

Trees are grown top-down with one uniform random threshold per feature per
node and kept as complete binary trees of a fixed depth so they can be
compiled into the soft representation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import ReplicatedDataset

# Threshold used by padding nodes that must send every input left. It is
# finite and small enough that (x - t) / omega and its square stay finite.
SURROGATE_THRESHOLD = 1e100


@dataclass
class Node:
    """Node of a partially grown tree. Leaves have ``feature is None``."""

    prob: float
    n_samples: int
    feature: Optional[int] = None
    threshold: float = 0.0
    left: Optional["Node"] = None
    right: Optional["Node"] = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def leaves(self):
        if self.is_leaf:
            yield self
        else:
            yield from self.left.leaves()
            yield from self.right.leaves()


@dataclass(frozen=True)
class CompleteTree:
    """Complete binary tree stored breadth-first.

    Array slot ``j`` holds node ``j + 1`` of the usual 1-based heap layout, so
    the children of slot ``j`` are slots ``2j + 1`` and ``2j + 2``.
    """

    depth: int
    node_features: np.ndarray
    node_thresholds: np.ndarray
    leaf_probs: np.ndarray

    def __post_init__(self):
        M, L = 2 ** self.depth - 1, 2 ** self.depth
        feats = np.asarray(self.node_features, dtype=int)
        thr = np.asarray(self.node_thresholds, dtype=float)
        probs = np.asarray(self.leaf_probs, dtype=float)
        if feats.shape != (M,) or thr.shape != (M,) or probs.shape != (L,):
            raise ValueError(f"depth-{self.depth} tree needs {M} nodes and {L} leaves")
        if feats.min() < 0 or np.any((probs < 0) | (probs > 1)):
            raise ValueError("invalid feature index or leaf probability")
        for a in (feats, thr, probs):
            a.setflags(write=False)
        object.__setattr__(self, "node_features", feats)
        object.__setattr__(self, "node_thresholds", thr)
        object.__setattr__(self, "leaf_probs", probs)

    @property
    def n_nodes(self) -> int:
        return 2 ** self.depth - 1

    @property
    def n_leaves(self) -> int:
        return 2 ** self.depth


@dataclass(frozen=True)
class TreeEnsemble:
    trees: tuple[CompleteTree, ...]
    feature_count: int

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        depths = {t.depth for t in self.trees}
        if len(depths) > 1:
            raise ValueError(f"trees have mixed depths {sorted(depths)}")
        for t in self.trees:
            if t.node_features.max() >= self.feature_count:
                raise ValueError("feature index out of range")

    def __len__(self) -> int:
        return len(self.trees)

    @property
    def depth(self) -> int:
        return self.trees[0].depth


def leaf_probability(labels: np.ndarray) -> float:
    """Fraction of class-1 rows among the rows that reached a leaf."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty leaf")
    return float(np.count_nonzero(labels == 1) / labels.size)


def gini(counts: np.ndarray) -> np.ndarray:
    """Gini impurity from ``(..., 2)`` class counts; zero for empty sets."""
    total = counts.sum(axis=-1)
    safe = np.where(total > 0, total, 1)
    p = counts / safe[..., None]
    return 1.0 - (p ** 2).sum(axis=-1)


def draw_thresholds(rng: np.random.Generator, X: np.ndarray):
    """One uniform threshold per feature between the node's min and max."""
    lo = X.min(axis=0)
    hi = X.max(axis=0)
    return rng.uniform(lo, hi), lo, hi


def score_splits(X: np.ndarray, y: np.ndarray, thresholds: np.ndarray, min_leaf: int = 1):
    """Gini decrease of splitting on ``x[f] <= thresholds[f]`` for every feature.

    Invalid candidates (a child with fewer than ``min_leaf`` rows) score -inf.
    """
    n = len(y)
    goes_left = X <= thresholds
    n_left = goes_left.sum(axis=0)
    pos_left = (goes_left & (y[:, None] == 1)).sum(axis=0)
    n_pos = int(np.count_nonzero(y == 1))
    left = np.stack([n_left - pos_left, pos_left], axis=-1)
    right = np.stack([(n - n_left) - (n_pos - pos_left), n_pos - pos_left], axis=-1)
    parent = gini(np.array([n - n_pos, n_pos]))
    child = (n_left * gini(left) + (n - n_left) * gini(right)) / n
    gain = parent - child
    valid = (n_left >= min_leaf) & (n - n_left >= min_leaf)
    return np.where(valid, gain, -np.inf)


def grow_tree(X: np.ndarray, y: np.ndarray, max_depth: int, min_leaf: int,
              rng: np.random.Generator) -> Node:
    """Grow one extremely randomized tree, depth first, left child first."""

    def build(idx: np.ndarray, depth: int) -> Node:
        yy = y[idx]
        node = Node(leaf_probability(yy), len(idx))
        if depth >= max_depth or len(idx) < 2 * min_leaf or np.all(yy == yy[0]):
            return node
        XX = X[idx]
        thresholds, lo, hi = draw_thresholds(rng, XX)
        scores = score_splits(XX, yy, thresholds, min_leaf)
        scores[lo == hi] = -np.inf
        if not np.isfinite(scores).any():
            return node
        f = int(np.argmax(scores))  # first maximum: lowest feature index wins ties
        mask = XX[:, f] <= thresholds[f]
        node.feature = f
        node.threshold = float(thresholds[f])
        node.left = build(idx[mask], depth + 1)
        node.right = build(idx[~mask], depth + 1)
        return node

    if len(y) == 0:
        raise ValueError("cannot grow a tree on empty data")
    return build(np.arange(len(y)), 0)


def complete_tree(root: Node, depth: int) -> CompleteTree:
    """Pad a partial tree to a complete tree of the given depth.

    Premature leaves become subtrees whose nodes test feature 0 against
    ``SURROGATE_THRESHOLD`` and whose leaves all copy the original value, so
    the tree function is unchanged.
    """
    if root.depth() > depth:
        raise ValueError(f"tree of depth {root.depth()} exceeds target depth {depth}")
    M = 2 ** depth - 1
    feats = np.zeros(M, dtype=int)
    thr = np.full(M, SURROGATE_THRESHOLD)
    probs = np.zeros(2 ** depth)

    def place(node: Node, slot: int, d: int):
        if d == depth:
            probs[slot - M] = node.prob
            return
        if node.is_leaf:
            place(node, 2 * slot + 1, d + 1)
            place(node, 2 * slot + 2, d + 1)
            return
        feats[slot] = node.feature
        thr[slot] = node.threshold
        place(node.left, 2 * slot + 1, d + 1)
        place(node.right, 2 * slot + 2, d + 1)

    place(root, 0, 0)
    return CompleteTree(depth, feats, thr, probs)


def hard_traverse(tree: CompleteTree, x: np.ndarray) -> tuple[int, float]:
    """Descend from the root, going left when ``x[f] <= threshold``."""
    slot = 0
    for _ in range(tree.depth):
        right = x[tree.node_features[slot]] > tree.node_thresholds[slot]
        slot = 2 * slot + 1 + int(right)
    leaf = slot - tree.n_nodes
    return leaf, float(tree.leaf_probs[leaf])


def hard_traverse_batch(tree: CompleteTree, X: np.ndarray) -> np.ndarray:
    """Vectorized :func:`hard_traverse` returning leaf indices for rows of X."""
    X = np.atleast_2d(X)
    slot = np.zeros(len(X), dtype=int)
    rows = np.arange(len(X))
    for _ in range(tree.depth):
        right = X[rows, tree.node_features[slot]] > tree.node_thresholds[slot]
        slot = 2 * slot + 1 + right
    return slot - tree.n_nodes


def fit_ert(data: ReplicatedDataset, T: int, h: int, min_leaf: int = 1,
            seed: int = 0) -> TreeEnsemble:
    """Fit ``T`` trees of depth at most ``h``; tree ``t`` uses seed ``seed + t``."""
    if len(data) == 0:
        raise ValueError("cannot fit trees on empty data")
    if h < 1 or min_leaf < 1 or T < 1:
        raise ValueError("T, h and min_leaf must be positive")
    trees = []
    for t in range(T):
        rng = np.random.default_rng(seed + t)
        root = grow_tree(data.X, data.y, h, min_leaf, rng)
        trees.append(complete_tree(root, h))
    return TreeEnsemble(tuple(trees), data.X.shape[1])


def random_complete_tree(h: int, m: int, rng: np.random.Generator,
                         threshold_scale: float = 1.0) -> CompleteTree:
    """Complete tree with random split features, N(0, scale^2) thresholds and
    uniform leaf probabilities; used as a fixture and by the gradient check."""
    M = 2 ** h - 1
    return CompleteTree(h, rng.integers(0, m, size=M), rng.normal(0.0, threshold_scale, size=M),
                        rng.uniform(0.0, 1.0, size=2 ** h))
