"""Forest initialization, end-to-end training and k-fold evaluation."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import MILDataset, kfold_split, replicate_labels, standardize
from .ert import fit_ert
from .gradients import AdamState, adam_step, backward, sgd_step
from .model import NumericalError, STEMILModel, build_model, forward_batch, predict_batch, predict_label

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    T: int = 20
    h: int = 5
    E: int = 4
    epochs: int = 2000
    batch_size: int = 20
    lr: float = 0.01
    optimizer: str = "sgd"
    init_temperature: float = 0.1
    folds: int = 5
    seed: int = 0
    aggregator: str = "attention"
    standardize: bool = True
    min_leaf: int = 1
    attention_dim: Optional[int] = None
    train_query: bool = True

    def __post_init__(self):
        for name in ("T", "h", "E", "batch_size", "folds", "min_leaf"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr <= 0 or self.init_temperature <= 0:
            raise ValueError("lr and init_temperature must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.aggregator not in ("attention", "max", "mean"):
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.attention_dim is not None and self.attention_dim < 1:
            raise ValueError("attention_dim must be positive")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ValueError("config file must hold a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Trainer:
    """Mini-batch training state: model, optimizer moments and the shuffling
    generator. Everything needed to resume is captured by :mod:`checkpoint`."""

    def __init__(self, model: STEMILModel, config: TrainConfig,
                 rng: Optional[np.random.Generator] = None,
                 adam: Optional[AdamState] = None, epochs_done: int = 0):
        self.model = model
        self.config = config
        self.rng = np.random.default_rng(config.seed) if rng is None else rng
        self.adam = adam
        if config.optimizer == "adam" and self.adam is None:
            self.adam = AdamState.zeros_like(model.params)
        self.epochs_done = epochs_done
        self.history: list[float] = []

    def step(self, bags, labels) -> float:
        trace = forward_batch(self.model, bags, labels)
        grads = backward(self.model, trace)
        if not self.config.train_query:
            grads["g"] = np.zeros_like(grads["g"])
        if self.config.optimizer == "adam":
            params, self.adam = adam_step(self.model.params, grads, self.adam, self.config.lr)
        else:
            params = sgd_step(self.model.params, grads, self.config.lr)
        self.model = self.model.with_params(params)
        return trace.loss

    def run_epoch(self, dataset: MILDataset) -> float:
        bs = self.config.batch_size
        order = self.rng.permutation(len(dataset))
        total = 0.0
        epoch = self.epochs_done + 1
        for bi, start in enumerate(range(0, len(order), bs)):
            idx = order[start:start + bs]
            bags = [dataset.bags[i] for i in idx]
            try:
                loss = self.step(bags, [b.label for b in bags])
            except NumericalError as exc:
                raise TrainingError(f"epoch {epoch}, batch {bi}: {exc}") from exc
            if not np.isfinite(loss):
                raise TrainingError(f"epoch {epoch}, batch {bi}: non-finite loss {loss}")
            total += loss * len(idx)
        self.epochs_done = epoch
        mean = total / len(dataset)
        self.history.append(mean)
        return mean

    def fit(self, dataset: MILDataset, epochs: int) -> list[float]:
        if self.config.batch_size > len(dataset):
            raise ValueError(f"batch_size {self.config.batch_size} exceeds {len(dataset)} bags")
        for _ in range(epochs):
            loss = self.run_epoch(dataset)
            if self.epochs_done % 100 == 0:
                log.debug("epoch %d loss %.6f", self.epochs_done, loss)
        return self.history


def initialize(dataset: MILDataset, config: TrainConfig) -> STEMILModel:
    """Fit the forest on replicated labels and compile it with a fresh attention
    module and head."""
    forest = fit_ert(replicate_labels(dataset), config.T, config.h, config.min_leaf, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    return build_model(forest, config.E, config.init_temperature, config.attention_dim,
                       config.aggregator, rng)


def make_trainer(dataset: MILDataset, config: TrainConfig) -> Trainer:
    return Trainer(initialize(dataset, config), config, np.random.default_rng([config.seed, 2]))


def train(dataset: MILDataset, config: TrainConfig) -> tuple[STEMILModel, list[float]]:
    """Initialize from trees and train for ``config.epochs`` epochs.

    Returns the trained model and the per-epoch mean training loss.
    """
    trainer = make_trainer(dataset, config)
    history = trainer.fit(dataset, config.epochs)
    return trainer.model, history


def accuracy(model: STEMILModel, dataset: MILDataset, threshold: float = 0.5) -> float:
    preds = predict_batch(model, dataset.bags)
    hits = [predict_label(p, threshold) == b.label for p, b in zip(preds, dataset.bags)]
    return float(np.mean(hits))


@dataclass
class FoldResult:
    fold: int
    accuracy: float
    seconds: float
    train_bags: list
    test_bags: list
    final_loss: Optional[float] = None


@dataclass
class CVResult:
    folds: list[FoldResult]
    config: TrainConfig
    seed: int
    runtime_seconds: float = 0.0

    @property
    def accuracies(self) -> list[float]:
        return [f.accuracy for f in self.folds]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def to_dict(self) -> dict:
        return {
            "folds": self.accuracies,
            "mean": self.mean,
            "std": self.std,
            "config": self.config.to_dict(),
            "seed": self.seed,
            "runtime_seconds": self.runtime_seconds,
            "fold_seconds": [f.seconds for f in self.folds],
        }


def cross_validate(dataset: MILDataset, config: TrainConfig, stratified: bool = True) -> CVResult:
    """Bag-level k-fold evaluation. Each fold standardizes on its training bags,
    grows its own forest and trains from scratch."""
    if config.folds < 2:
        raise ValueError("cross-validation needs at least 2 folds")
    t_start = time.perf_counter()
    split = kfold_split(dataset, config.folds, config.seed, stratified)
    results = []
    for k in range(config.folds):
        t0 = time.perf_counter()
        tr_idx, te_idx = split.train_indices(k), split.test_indices(k)
        train_set, test_set = dataset.subset(tr_idx), dataset.subset(te_idx)
        if len(set(train_set.labels.tolist())) < 2:
            warnings.warn(f"fold {k}: training bags contain a single class", RuntimeWarning)
        if config.standardize:
            train_set, stats = standardize(train_set)
            test_set, _ = standardize(test_set, stats)
        fold_cfg = dataclasses.replace(config, batch_size=min(config.batch_size, len(train_set)))
        model, history = train(train_set, fold_cfg)
        acc = accuracy(model, test_set)
        seconds = time.perf_counter() - t0
        log.info("fold %d: accuracy %.4f (%.1fs)", k, acc, seconds)
        results.append(FoldResult(k, acc, seconds, [b.id for b in train_set.bags],
                                  [b.id for b in test_set.bags],
                                  history[-1] if history else None))
    return CVResult(results, config, config.seed, time.perf_counter() - t_start)
