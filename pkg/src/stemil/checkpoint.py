"""Single-file JSON checkpoints.

Layout (``version`` 1)::

    {
      "format": "stemil-checkpoint",
      "version": 1,
      "config": {...TrainConfig fields...},
      "feature_count": m,
      "aggregator": "attention",
      "trees": [{"depth": h, "node_features": [...], "node_thresholds": [...],
                 "leaf_probs": [...]}, ...],
      "params": {"b": {"shape": [T, M], "data": [...]}, ...},
      "standardization": {"mean": [...], "std": [...]} | null,
      "trainer": {"epochs_done": n, "rng_state": {...},
                  "adam": {"t": k, "m": {...}, "v": {...}} | null} | null
    }

Floats are written with ``repr`` precision, so every float64 round-trips
bit-exactly and save -> load -> save reproduces the same bytes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Standardization
from .ert import CompleteTree, TreeEnsemble
from .gradients import AdamState
from .model import PARAM_ORDER, STEMILModel
from .soft_tree import build_routing
from .training import TrainConfig, Trainer

FORMAT = "stemil-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    model: STEMILModel
    standardization: Optional[Standardization] = None
    epochs_done: int = 0
    rng_state: Optional[dict] = None
    adam: Optional[AdamState] = None

    @classmethod
    def from_trainer(cls, trainer: Trainer, standardization=None) -> "Checkpoint":
        return cls(trainer.config, trainer.model, standardization, trainer.epochs_done,
                   trainer.rng.bit_generator.state, trainer.adam)

    def trainer(self) -> Trainer:
        """Rebuild the training state so that further epochs continue exactly
        where the saved run left off."""
        rng = np.random.default_rng()
        if self.rng_state is not None:
            rng.bit_generator.state = self.rng_state
        return Trainer(self.model.copy(), self.config, rng, self.adam, self.epochs_done)


def _tensor(a) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _array(obj) -> np.ndarray:
    return np.array(obj["data"], dtype=float).reshape(obj["shape"])


def to_json(ckpt: Checkpoint) -> str:
    model = ckpt.model
    if model.forest is None:
        raise CheckpointError("model carries no tree ensemble to serialize")
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "config": ckpt.config.to_dict(),
        "feature_count": model.n_features,
        "aggregator": model.aggregator,
        "trees": [{"depth": t.depth,
                   "node_features": t.node_features.tolist(),
                   "node_thresholds": t.node_thresholds.tolist(),
                   "leaf_probs": t.leaf_probs.tolist()} for t in model.forest.trees],
        "params": {n: _tensor(model.params[n]) for n in PARAM_ORDER},
        "standardization": None if ckpt.standardization is None else {
            "mean": np.asarray(ckpt.standardization.mean, dtype=float).tolist(),
            "std": np.asarray(ckpt.standardization.std, dtype=float).tolist()},
        "trainer": {
            "epochs_done": ckpt.epochs_done,
            "rng_state": ckpt.rng_state,
            "adam": None if ckpt.adam is None else {
                "t": ckpt.adam.t,
                "m": {n: _tensor(v) for n, v in ckpt.adam.m.items()},
                "v": {n: _tensor(v) for n, v in ckpt.adam.v.items()}},
        },
    }
    return json.dumps(doc, indent=1)


def from_json(text: str) -> Checkpoint:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError("not a stemil checkpoint")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}, expected {VERSION}")
    try:
        config = TrainConfig.from_dict(doc["config"])
        m = int(doc["feature_count"])
        trees = tuple(CompleteTree(t["depth"], t["node_features"], t["node_thresholds"],
                                   t["leaf_probs"]) for t in doc["trees"])
        forest = TreeEnsemble(trees, m)
        params = {n: _array(doc["params"][n]) for n in PARAM_ORDER}
        model = STEMILModel(np.stack([t.node_features for t in trees]), build_routing(forest.depth),
                            params, m, doc["aggregator"], forest)
        st = doc["standardization"]
        stats = None if st is None else Standardization(np.array(st["mean"], dtype=float),
                                                        np.array(st["std"], dtype=float))
        tr = doc["trainer"] or {}
        adam = None
        if tr.get("adam") is not None:
            a = tr["adam"]
            adam = AdamState({n: _array(v) for n, v in a["m"].items()},
                             {n: _array(v) for n, v in a["v"].items()}, int(a["t"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    return Checkpoint(config, model, stats, int(tr.get("epochs_done", 0)), tr.get("rng_state"), adam)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_text(to_json(ckpt), encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    return from_json(Path(path).read_text(encoding="utf-8"))
