"""Closed-form reverse pass, finite-difference checking and optimizers.

Parameters and gradients are plain ``dict[str, np.ndarray]`` registries keyed
by the names in :data:`stemil.model.PARAM_ORDER`. Fixed tensors (the one-hot
node features, ``R`` and ``s``) are never registered, so they never receive
gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Bag
from .model import PARAM_ORDER, PROB_CLAMP, NumericalError, STEMILModel, Trace, forward_batch

# Test hook for the gradient checker: names a Jacobian whose sign backward flips.
FLIP_SIGN_OPTIONS = ("attention", "sigmoid", "softmax")


def backward(model: STEMILModel, trace: Trace, flip_sign: Optional[str] = None) -> dict:
    """Gradient of the mean bag loss of ``trace`` w.r.t. every parameter."""
    if trace.labels is None:
        raise ValueError("trace was computed without labels")
    p = model.params
    B = len(trace.logit)
    T = model.T
    starts, seg, e = trace.starts, trace.segment, trace.e
    grads = {}

    # loss -> logit; the clamp has zero slope where it is active
    inside = (trace.prob > PROB_CLAMP) & (trace.prob < 1.0 - PROB_CLAMP)
    dlogit = np.where(inside, trace.prob - trace.labels, 0.0) / B
    grads["w_c"] = trace.a.T @ dlogit
    grads["c0"] = np.array(dlogit.sum())
    da = dlogit[:, None] * p["w_c"][None, :]  # (B, E)

    # pooling
    if model.aggregator == "max":
        de = np.zeros_like(e)
        cols = np.arange(e.shape[1])
        for bag, rows in enumerate(trace.argmax_rows):
            de[rows, cols] += da[bag]
        grads["V_k"] = np.zeros_like(p["V_k"])
        grads["V_q"] = np.zeros_like(p["V_q"])
        grads["g"] = np.zeros_like(p["g"])
    else:
        de = trace.beta[:, None] * da[seg]
        if model.aggregator == "attention":
            dbeta = np.einsum("ne,ne->n", e, da[seg])
            mean_dbeta = np.add.reduceat(trace.beta * dbeta, starts)
            dscore = trace.beta * (dbeta - mean_dbeta[seg])
            if flip_sign == "attention":
                dscore = -dscore
            # score_i = qv . (V_k e_i)
            weighted_e = dscore @ e  # sum_i dscore_i e_i
            grads["V_k"] = np.outer(trace.qv, weighted_e)
            de += dscore[:, None] * (p["V_k"].T @ trace.qv)[None, :]
            dqv = p["V_k"] @ weighted_e
            grads["V_q"] = np.outer(dqv, p["g"])
            grads["g"] = p["V_q"].T @ dqv
        else:
            grads["V_k"] = np.zeros_like(p["V_k"])
            grads["V_q"] = np.zeros_like(p["V_q"])
            grads["g"] = np.zeros_like(p["g"])

    # ensemble mean -> per-tree outputs -> leaf mixing
    dout = de / T  # same for every tree, (n, E)
    grads["V"] = np.einsum("ne,tnl->tel", dout, trace.Q)
    dQ = np.einsum("tel,ne->tnl", p["V"], dout)

    # path softmax with temperature tau
    tau = np.exp(p["log_tau"])[:, None, None]
    dscaled = trace.Q * (dQ - np.sum(trace.Q * dQ, axis=-1, keepdims=True))
    if flip_sign == "softmax":
        dscaled = -dscaled
    dU = dscaled / tau
    grads["log_tau"] = -np.sum(dscaled * trace.U, axis=(1, 2)) / tau[:, 0, 0]

    # routing affine map, then node sigmoids with temperature omega
    dxi = dU @ model.routing.R.astype(float)
    omega = np.exp(p["log_omega"])[:, None, None]
    dpre = dxi * trace.xi * (1.0 - trace.xi)
    if flip_sign == "sigmoid":
        dpre = -dpre
    grads["b"] = np.sum(dpre, axis=1) / omega[:, 0]
    grads["log_omega"] = -np.sum(dpre * trace.Z, axis=(1, 2)) / omega[:, 0, 0]

    for name in PARAM_ORDER:
        if not np.all(np.isfinite(grads[name])):
            raise NumericalError(f"non-finite gradient for {name}")
    return {name: grads[name] for name in PARAM_ORDER}


def loss_and_grad(model: STEMILModel, bags: Sequence[Bag], labels=None,
                  flip_sign: Optional[str] = None) -> tuple[float, dict]:
    labels = [b.label for b in bags] if labels is None else labels
    trace = forward_batch(model, bags, labels)
    return trace.loss, backward(model, trace, flip_sign)


def batch_loss(model: STEMILModel, bags: Sequence[Bag], labels=None) -> float:
    labels = [b.label for b in bags] if labels is None else labels
    return forward_batch(model, bags, labels).loss


@dataclass
class GroupError:
    max_abs: float
    max_rel: float
    checked: int


@dataclass
class GradReport:
    """Analytic vs central-difference gradients, per parameter group.

    An entry passes when its absolute error is at most ``atol`` or its error
    relative to the larger of the two magnitudes is at most ``rtol``.
    ``max_rel`` only counts entries above the absolute floor.
    """

    step: float
    rtol: float
    atol: float
    groups: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(g.max_rel <= self.rtol for g in self.groups.values())

    def failing(self) -> list[str]:
        return [n for n, g in self.groups.items() if g.max_rel > self.rtol]

    def to_dict(self) -> dict:
        return {
            "step": self.step, "rtol": self.rtol, "atol": self.atol, "passed": self.passed,
            "groups": {n: {"max_abs": g.max_abs, "max_rel": g.max_rel, "checked": g.checked}
                       for n, g in self.groups.items()},
        }

    def format_table(self) -> str:
        lines = [f"{'group':<10} {'entries':>8} {'max abs err':>13} {'max rel err':>13}  status",
                 "-" * 56]
        for n, g in self.groups.items():
            status = "ok" if g.max_rel <= self.rtol else "FAIL"
            lines.append(f"{n:<10} {g.checked:>8d} {g.max_abs:>13.3e} {g.max_rel:>13.3e}  {status}")
        lines.append(f"step={self.step:g} rtol={self.rtol:g} atol={self.atol:g} "
                     f"-> {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def fd_check(model: STEMILModel, bags: Sequence[Bag], step: float = 1e-5, rtol: float = 1e-4,
             atol: float = 1e-8, max_entries: int = 10_000, seed: int = 0,
             flip_sign: Optional[str] = None) -> GradReport:
    """Compare :func:`backward` with central differences of the batch loss.

    Every scalar is probed when the model has at most ``max_entries`` of them,
    otherwise a seeded random subset of that size.
    """
    labels = [b.label for b in bags]
    _, analytic = loss_and_grad(model, bags, labels, flip_sign)

    sizes = [model.params[n].size for n in PARAM_ORDER]
    total = sum(sizes)
    if total > max_entries:
        chosen = np.sort(np.random.default_rng(seed).choice(total, max_entries, replace=False))
    else:
        chosen = np.arange(total)
    offsets = np.cumsum([0] + sizes)

    report = GradReport(step, rtol, atol)
    for gi, name in enumerate(PARAM_ORDER):
        local = chosen[(chosen >= offsets[gi]) & (chosen < offsets[gi + 1])] - offsets[gi]
        base = model.params[name]
        max_abs = max_rel = 0.0
        for flat in local:
            idx = np.unravel_index(flat, base.shape)
            probe = dict(model.params)
            plus = base.copy()
            plus[idx] += step
            probe[name] = plus
            f_plus = batch_loss(model.with_params(probe), bags, labels)
            minus = base.copy()
            minus[idx] -= step
            probe[name] = minus
            f_minus = batch_loss(model.with_params(probe), bags, labels)
            numeric = (f_plus - f_minus) / (2 * step)
            exact = float(analytic[name][idx])
            err = abs(numeric - exact)
            max_abs = max(max_abs, err)
            if err > atol:
                max_rel = max(max_rel, err / max(abs(numeric), abs(exact)))
        report.groups[name] = GroupError(max_abs, max_rel, len(local))
    return report


def _check_shapes(params: dict, grads: dict) -> None:
    if params.keys() != grads.keys():
        raise ValueError(f"parameter/gradient names differ: {sorted(params)} vs {sorted(grads)}")
    for name, value in params.items():
        if np.shape(value) != np.shape(grads[name]):
            raise ValueError(f"shape mismatch for {name}: {np.shape(value)} vs {np.shape(grads[name])}")


def sgd_step(params: dict, grads: dict, lr: float) -> dict:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    _check_shapes(params, grads)
    return {n: params[n] - lr * grads[n] for n in params}


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({n: np.zeros_like(p) for n, p in params.items()},
                   {n: np.zeros_like(p) for n, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam. Returns ``(params, state)``; inputs are not mutated."""
    _check_shapes(params, grads)
    t = state.t + 1
    m = {n: beta1 * state.m[n] + (1 - beta1) * grads[n] for n in params}
    v = {n: beta2 * state.v[n] + (1 - beta2) * grads[n] ** 2 for n in params}
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    new = {n: params[n] - lr * (m[n] / c1) / (np.sqrt(v[n] / c2) + eps) for n in params}
    return new, AdamState(m, v, t)
