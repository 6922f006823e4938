"""End-to-end bag classifier: tree-ensemble embeddings, attention pooling,
linear head and binary cross-entropy bag loss.

All trees of a model share depth and embedding length, so their trainable
tensors are stored stacked along a leading tree axis:

========== ============ ==========================================
name       shape        role
========== ============ ==========================================
b          (T, M)       node biases (negated thresholds at init)
log_omega  (T,)         log sigmoid temperature per tree
log_tau    (T,)         log softmax temperature per tree
V          (T, E, L)    leaf embeddings
V_k        (d_att, E)   key projection
V_q        (d_att, d_g) query projection
g          (d_g,)       query template
w_c        (E,)         classifier weights
c0         ()           classifier bias
========== ============ ==========================================
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, softmax

from .data import Bag
from .ert import TreeEnsemble
from .soft_tree import RoutingMatrix, SoftTreeParams, build_routing, convert_tree

PROB_CLAMP = 1e-12
AGGREGATORS = ("attention", "max", "mean")
PARAM_ORDER = ("b", "log_omega", "log_tau", "V", "V_k", "V_q", "g", "w_c", "c0")


class NumericalError(FloatingPointError):
    """A forward or backward quantity became non-finite."""


@dataclass(frozen=True)
class AttentionParams:
    V_k: np.ndarray
    V_q: np.ndarray
    g: np.ndarray


@dataclass(frozen=True)
class BagPrediction:
    logit: float
    probability: float
    attention_weights: np.ndarray


@dataclass
class STEMILModel:
    features: np.ndarray  # (T, M) split feature of every node, fixed
    routing: RoutingMatrix
    params: dict
    n_features: int
    aggregator: str = "attention"
    forest: Optional[TreeEnsemble] = field(default=None, repr=False)

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def h(self) -> int:
        return self.routing.depth

    @property
    def E(self) -> int:
        return self.params["V"].shape[1]

    @property
    def attention(self) -> AttentionParams:
        p = self.params
        return AttentionParams(p["V_k"], p["V_q"], p["g"])

    @property
    def ensemble(self) -> list[SoftTreeParams]:
        """Per-tree views in the compiled three-layer form."""
        M = self.features.shape[1]
        out = []
        for t in range(self.T):
            W = np.zeros((M, self.n_features))
            W[np.arange(M), self.features[t]] = 1.0
            out.append(SoftTreeParams(W, self.params["b"][t], float(self.params["log_omega"][t]),
                                      float(self.params["log_tau"][t]), self.routing,
                                      self.params["V"][t]))
        return out

    def with_params(self, params: dict) -> "STEMILModel":
        return STEMILModel(self.features, self.routing, params, self.n_features,
                           self.aggregator, self.forest)

    def copy(self) -> "STEMILModel":
        return self.with_params({k: np.array(v, copy=True) for k, v in self.params.items()})


def build_model(forest: TreeEnsemble, E: int = 4, init_temperature: float = 0.1,
                attention_dim: Optional[int] = None, aggregator: str = "attention",
                rng: Optional[np.random.Generator] = None) -> STEMILModel:
    """Compile every tree and attach freshly initialized attention and head.

    Attention matrices and the head are drawn from ``U(-1/sqrt(E), 1/sqrt(E))``;
    the query template starts at all ones.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    m = forest.feature_count
    compiled = [convert_tree(t, E, m, init_temperature) for t in forest.trees]
    d = E if attention_dim is None else attention_dim
    bound = 1.0 / np.sqrt(E)
    params = {
        "b": np.stack([c.b for c in compiled]),
        "log_omega": np.array([c.log_omega for c in compiled]),
        "log_tau": np.array([c.log_tau for c in compiled]),
        "V": np.stack([c.V for c in compiled]),
        "V_k": rng.uniform(-bound, bound, size=(d, E)),
        "V_q": rng.uniform(-bound, bound, size=(d, E)),
        "g": np.ones(E),
        "w_c": rng.uniform(-bound, bound, size=E),
        "c0": np.array(rng.uniform(-bound, bound)),
    }
    features = np.stack([t.node_features for t in forest.trees])
    return STEMILModel(features, build_routing(forest.depth), params, m, aggregator, forest)


@dataclass
class Trace:
    """Intermediates of one batched forward pass, consumed by the backward pass."""

    X: np.ndarray          # (n, m) instances of all bags, concatenated
    starts: np.ndarray     # (B,) first row of every bag
    segment: np.ndarray    # (n,) bag index of every row
    Z: np.ndarray          # (T, n, M) x[f] + b
    xi: np.ndarray         # (T, n, M) node sigmoids
    U: np.ndarray          # (T, n, L) path scores
    Q: np.ndarray          # (T, n, L) leaf weights
    e: np.ndarray          # (n, E) averaged instance embeddings
    qv: Optional[np.ndarray]
    beta: np.ndarray       # (n,) pooling weights
    a: np.ndarray          # (B, E) bag embeddings
    logit: np.ndarray      # (B,)
    prob: np.ndarray       # (B,)
    labels: Optional[np.ndarray] = None
    loss: Optional[float] = None
    argmax_rows: Optional[np.ndarray] = None  # (B, E) winning row per coordinate for max pooling


def _check_finite(name: str, arr) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {name}")


def segment_softmax(scores: np.ndarray, starts: np.ndarray, segment: np.ndarray) -> np.ndarray:
    peak = np.maximum.reduceat(scores, starts)
    ex = np.exp(scores - peak[segment])
    return ex / np.add.reduceat(ex, starts)[segment]


def tree_embeddings(model: STEMILModel, X: np.ndarray):
    """Per-tree soft outputs for rows of X. Returns ``(Z, xi, U, Q, out)``."""
    p = model.params
    omega = np.exp(p["log_omega"])[:, None, None]
    tau = np.exp(p["log_tau"])[:, None, None]
    Z = np.transpose(X[:, model.features], (1, 0, 2)) + p["b"][:, None, :]
    xi = expit(Z / omega)
    U = xi @ model.routing.R.T.astype(float) + model.routing.s
    Q = softmax(U / tau, axis=-1)
    out = np.einsum("tel,tnl->tne", p["V"], Q)
    return Z, xi, U, Q, out


def forward_batch(model: STEMILModel, bags: Sequence[Bag], labels=None) -> Trace:
    """Run every bag of the batch through the model in one vectorized pass."""
    X = np.concatenate([b.instances for b in bags])
    sizes = np.array([b.size for b in bags])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    segment = np.repeat(np.arange(len(bags)), sizes)
    p = model.params

    Z, xi, U, Q, out = tree_embeddings(model, X)
    e = out.mean(axis=0)
    _check_finite("tree embeddings", e)

    qv = None
    argmax_rows = None
    if model.aggregator == "attention":
        qv = p["V_q"] @ p["g"]
        scores = (e @ p["V_k"].T) @ qv
        _check_finite("attention scores", scores)
        beta = segment_softmax(scores, starts, segment)
        a = np.add.reduceat(beta[:, None] * e, starts, axis=0)
    elif model.aggregator == "mean":
        beta = 1.0 / sizes[segment]
        a = np.add.reduceat(beta[:, None] * e, starts, axis=0)
    else:
        argmax_rows = np.stack([s + np.argmax(e[s:s + n], axis=0) for s, n in zip(starts, sizes)])
        a = e[argmax_rows, np.arange(e.shape[1])]
        wins = np.zeros(len(X))
        np.add.at(wins, argmax_rows.ravel(), 1.0)
        beta = wins / e.shape[1]

    logit = a @ p["w_c"] + p["c0"]
    _check_finite("logits", logit)
    prob = expit(logit)
    trace = Trace(X, starts, segment, Z, xi, U, Q, e, qv, beta, a, logit, prob,
                  argmax_rows=argmax_rows)
    if labels is not None:
        trace.labels = np.asarray(labels, dtype=float)
        trace.loss = bce_loss(prob, trace.labels)
    return trace


def bce_loss(prob: np.ndarray, labels: np.ndarray) -> float:
    if len(prob) != len(labels):
        raise ValueError(f"{len(prob)} predictions but {len(labels)} labels")
    p = np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=float)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def instance_embed(model: STEMILModel, x: np.ndarray) -> np.ndarray:
    """Mean of the tree outputs for one instance (or each row of a matrix)."""
    x = np.asarray(x, dtype=float)
    *_, out = tree_embeddings(model, np.atleast_2d(x))
    e = out.mean(axis=0)
    return e[0] if x.ndim == 1 else e


def attention_pool(att: AttentionParams, embeddings) -> tuple[np.ndarray, np.ndarray]:
    """Pool instance embeddings into one bag vector. Returns ``(a, beta)``."""
    E_ = np.atleast_2d(np.asarray(embeddings, dtype=float))
    if len(E_) == 0:
        raise ValueError("cannot pool an empty bag")
    keys = E_ @ att.V_k.T
    beta = softmax(keys @ (att.V_q @ att.g))
    return beta @ E_, beta


def bag_forward(model: STEMILModel, bag: Bag) -> BagPrediction:
    tr = forward_batch(model, [bag])
    return BagPrediction(float(tr.logit[0]), float(tr.prob[0]), tr.beta)


def predict_batch(model: STEMILModel, bags: Sequence[Bag]) -> list[BagPrediction]:
    tr = forward_batch(model, bags)
    ends = np.append(tr.starts[1:], len(tr.X))
    return [BagPrediction(float(l), float(p), tr.beta[s:e])
            for l, p, s, e in zip(tr.logit, tr.prob, tr.starts, ends)]


def bag_loss(predictions: Sequence[BagPrediction], labels) -> float:
    """Mean binary cross-entropy over bags, probabilities clamped before the log."""
    return bce_loss(np.array([p.probability for p in predictions]), np.asarray(labels))


def predict_label(pred, threshold: float = 0.5) -> int:
    """1 when the probability reaches the threshold; ties go to the positive class."""
    prob = pred.probability if isinstance(pred, BagPrediction) else float(pred)
    return int(prob >= threshold)


def max_pool_reference(scores) -> float:
    """Bag score as the maximum instance score; on 0/1 scores this is the
    standard existential MIL rule."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("empty bag")
    return float(scores.max())


def random_model(T: int = 3, h: int = 2, E: int = 4, m: int = 6,
                 rng: Optional[np.random.Generator] = None,
                 aggregator: str = "attention") -> STEMILModel:
    """Small model with every parameter randomized, for gradient checks.

    Temperatures are drawn around 1 and the attention and head weights at unit
    scale so that no parameter group has a vanishing gradient.
    """
    from .ert import random_complete_tree

    rng = np.random.default_rng(0) if rng is None else rng
    forest = TreeEnsemble(tuple(random_complete_tree(h, m, rng) for _ in range(T)), m)
    model = build_model(forest, E, 1.0, aggregator=aggregator, rng=rng)
    p = model.params
    p["b"] = p["b"] + rng.normal(0.0, 0.1, size=p["b"].shape)
    p["log_omega"] = rng.uniform(-0.5, 0.5, size=T)
    p["log_tau"] = rng.uniform(-1.5, -0.5, size=T)
    p["V"] = rng.normal(0.0, 1.0, size=p["V"].shape)
    for name in ("V_k", "V_q", "g", "w_c"):
        p[name] = rng.normal(0.0, 1.0, size=p[name].shape)
    p["c0"] = np.array(rng.normal())
    return model


def random_bags(n_bags: int, m: int, rng: np.random.Generator, size_range=(2, 5)) -> list[Bag]:
    """Gaussian instances with alternating labels, starting with a positive bag."""
    return [Bag(f"r{i}", rng.normal(size=(int(rng.integers(size_range[0], size_range[1] + 1)), m)),
                (i + 1) % 2)
            for i in range(n_bags)]
