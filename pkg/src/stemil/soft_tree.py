"""Three-layer differentiable form of a complete decision tree.

Layer 1 evaluates every node predicate as ``sigmoid((W x + b) / omega)``,
layer 2 scores every root-to-leaf path with ``R xi + s`` and picks leaves
with ``softmax(. / tau)``, layer 3 mixes the leaf embeddings ``V``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, softmax

from .ert import CompleteTree


@dataclass(frozen=True)
class RoutingMatrix:
    """Leaf-by-node path encoding.

    ``R[k, j]`` is -1 when the path to leaf k turns left at node j, +1 when it
    turns right and 0 when node j is off the path. ``s[k]`` counts the left
    turns, so ``R[k] @ xi + s[k]`` adds ``1 - xi`` for left turns and ``xi``
    for right turns.
    """

    R: np.ndarray
    s: np.ndarray

    @property
    def depth(self) -> int:
        return int(np.log2(self.R.shape[0]))


def build_routing(h: int) -> RoutingMatrix:
    if h < 1:
        raise ValueError("depth must be at least 1")
    L, M = 2 ** h, 2 ** h - 1
    R = np.zeros((L, M), dtype=np.int8)

    def fill(a: int, b: int, k: int):
        # rows a..b-1 are the leaves below node k (1-based)
        if k > M:
            return
        mid = a + (b - a) // 2
        R[a:mid, k - 1] = -1
        R[mid:b, k - 1] = 1
        fill(a, mid, 2 * k)
        fill(mid, b, 2 * k + 1)

    fill(0, L, 1)
    s = (R == -1).sum(axis=1).astype(np.int64)
    R.setflags(write=False)
    s.setflags(write=False)
    return RoutingMatrix(R, s)


@dataclass
class SoftTreeParams:
    """Compiled tree. ``W`` and ``routing`` are fixed; ``b``, the two
    log-temperatures and ``V`` are trainable."""

    W: np.ndarray
    b: np.ndarray
    log_omega: float
    log_tau: float
    routing: RoutingMatrix
    V: np.ndarray

    @property
    def omega(self) -> float:
        return float(np.exp(self.log_omega))

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau))

    @property
    def embedding_size(self) -> int:
        return self.V.shape[0]

    @property
    def features(self) -> np.ndarray:
        return np.argmax(self.W, axis=1)


def convert_tree(tree: CompleteTree, E: int, m: int, init_temperature: float = 0.1) -> SoftTreeParams:
    """Compile ``tree`` for inputs of ``m`` features with embeddings of length ``E``.

    Biases start at the negated split thresholds and every column of ``V`` is
    the leaf's class-1 probability repeated ``E`` times.
    """
    if E < 1:
        raise ValueError("embedding length must be at least 1")
    if init_temperature <= 0:
        raise ValueError("temperature must be positive")
    W = np.zeros((tree.n_nodes, m))
    W[np.arange(tree.n_nodes), tree.node_features] = 1.0
    b = -np.array(tree.node_thresholds, dtype=float)
    V = np.tile(np.asarray(tree.leaf_probs, dtype=float), (E, 1))
    log_t = float(np.log(init_temperature))
    return SoftTreeParams(W, b, log_t, log_t, build_routing(tree.depth), V)


def node_activations(p: SoftTreeParams, x: np.ndarray) -> np.ndarray:
    return expit((np.asarray(x) @ p.W.T + p.b) / p.omega)


def path_scores(p: SoftTreeParams, x: np.ndarray) -> np.ndarray:
    """``R xi + s`` for one instance or each row of a matrix."""
    xi = node_activations(p, x)
    return xi @ p.routing.R.T + p.routing.s


def leaf_weights(p: SoftTreeParams, x: np.ndarray) -> np.ndarray:
    return softmax(path_scores(p, x) / p.tau, axis=-1)


def soft_forward(p: SoftTreeParams, x: np.ndarray) -> np.ndarray:
    """Embedding of length E; a convex combination of the columns of V."""
    return leaf_weights(p, x) @ p.V.T


def path_score_identity_check(p: SoftTreeParams, x: np.ndarray) -> float:
    """Largest path score. With sharp temperatures and ``x`` away from every
    threshold this approaches the tree depth, reached only on the hard path."""
    return float(np.max(path_scores(p, x)))
