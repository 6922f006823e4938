"""MIL dataset containers, CSV loading, synthetic bags and bag-level folds."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class DatasetError(ValueError):
    """Raised for malformed or inconsistent MIL data."""


@dataclass(frozen=True)
class Bag:
    """A labelled bag of instances.

    ``instances`` is an ``(n_i, m)`` float array. ``instance_labels`` is only
    known for synthetic data, where it records which instances were planted
    as positives.
    """

    id: str
    instances: np.ndarray
    label: int
    instance_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.asarray(self.instances, dtype=float)
        if x.ndim != 2 or x.shape[0] == 0:
            raise DatasetError(f"bag {self.id!r} must hold a non-empty 2-D instance array")
        if not np.all(np.isfinite(x)):
            raise DatasetError(f"bag {self.id!r} has non-finite features")
        if self.label not in (0, 1):
            raise DatasetError(f"bag {self.id!r} label must be 0 or 1, got {self.label!r}")
        x.setflags(write=False)
        object.__setattr__(self, "instances", x)
        object.__setattr__(self, "label", int(self.label))

    @property
    def size(self) -> int:
        return self.instances.shape[0]


@dataclass(frozen=True)
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, m: int) -> "Standardization":
        return cls(np.zeros(m), np.ones(m))


@dataclass(frozen=True)
class MILDataset:
    bags: tuple[Bag, ...]
    feature_count: int
    standardization: Optional[Standardization] = None

    def __post_init__(self):
        object.__setattr__(self, "bags", tuple(self.bags))
        for bag in self.bags:
            if bag.instances.shape[1] != self.feature_count:
                raise DatasetError(
                    f"bag {bag.id!r} has {bag.instances.shape[1]} features, "
                    f"expected {self.feature_count}")

    def __len__(self) -> int:
        return len(self.bags)

    @property
    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.bags], dtype=int)

    @property
    def n_instances(self) -> int:
        return sum(b.size for b in self.bags)

    def subset(self, indices: Sequence[int]) -> "MILDataset":
        return MILDataset(tuple(self.bags[i] for i in indices), self.feature_count,
                          self.standardization)


@dataclass(frozen=True)
class ReplicatedDataset:
    """Instance-level rows carrying their bag's label.

    ``origin[r]`` is the ``(bag index, instance index)`` that produced row r.
    """

    X: np.ndarray
    y: np.ndarray
    origin: np.ndarray

    def __len__(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class FoldSplit:
    k: int
    assignments: np.ndarray  # bag index -> fold index

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)

    def sizes(self) -> list[int]:
        return np.bincount(self.assignments, minlength=self.k).tolist()


def load_mil_csv(path) -> MILDataset:
    """Read a ``bag_id,label,f1,...,fm`` CSV, grouping rows by bag id in
    first-appearance order."""
    path = Path(path)
    groups: dict[str, list[list[float]]] = {}
    labels: dict[str, int] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if len(header) < 3 or [h.strip() for h in header[:2]] != ["bag_id", "label"]:
            raise DatasetError(f"{path}:1: header must start with 'bag_id,label' and list features")
        m = len(header) - 2
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != m + 2:
                raise DatasetError(f"{path}:{lineno}: expected {m + 2} columns, got {len(row)}")
            bag_id = row[0].strip()
            try:
                label = int(row[1])
                feats = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in feats):
                raise DatasetError(f"{path}:{lineno}: non-finite feature value")
            if label not in (0, 1):
                raise DatasetError(f"{path}:{lineno}: label must be 0 or 1")
            if bag_id in labels and labels[bag_id] != label:
                raise DatasetError(
                    f"{path}:{lineno}: bag {bag_id!r} has conflicting labels "
                    f"{labels[bag_id]} and {label}")
            labels.setdefault(bag_id, label)
            groups.setdefault(bag_id, []).append(feats)
    bags = tuple(Bag(bid, np.array(rows), labels[bid]) for bid, rows in groups.items())
    return MILDataset(bags, m)


def save_mil_csv(dataset: MILDataset, path) -> None:
    m = dataset.feature_count
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bag_id", "label"] + [f"f{j + 1}" for j in range(m)])
        for bag in dataset.bags:
            for x in bag.instances:
                writer.writerow([bag.id, bag.label] + [repr(float(v)) for v in x])


def fit_standardization(dataset: MILDataset) -> Standardization:
    X = np.concatenate([b.instances for b in dataset.bags])
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    return Standardization(mean, std)


def standardize(dataset: MILDataset, stats: Optional[Standardization] = None):
    """Z-score every feature. Returns ``(dataset, stats)``.

    Stats default to the population mean/std of ``dataset`` itself; pass the
    training fold's stats to transform held-out bags.
    """
    if stats is None:
        stats = fit_standardization(dataset)
    m = dataset.feature_count
    if len(stats.mean) != m or len(stats.std) != m:
        raise DatasetError(f"standardization stats have length {len(stats.mean)}, expected {m}")
    bags = tuple(
        Bag(b.id, (b.instances - stats.mean) / stats.std, b.label, b.instance_labels)
        for b in dataset.bags)
    return MILDataset(bags, m, stats), stats


def replicate_labels(dataset: MILDataset) -> ReplicatedDataset:
    X = np.concatenate([b.instances for b in dataset.bags])
    y = np.concatenate([np.full(b.size, b.label, dtype=int) for b in dataset.bags])
    origin = np.array([(i, k) for i, b in enumerate(dataset.bags) for k in range(b.size)],
                      dtype=int).reshape(-1, 2)
    return ReplicatedDataset(X, y, origin)


@dataclass(frozen=True)
class PlantedBox:
    """Axis-aligned region ``lo <= x[features] <= hi`` holding the positive instances."""

    features: tuple[int, ...] = (0, 1)
    lo: float = 0.6
    hi: float = 1.0

    def contains(self, X: np.ndarray) -> np.ndarray:
        sub = np.atleast_2d(X)[:, list(self.features)]
        return np.all((sub >= self.lo) & (sub <= self.hi), axis=1)


def synth_generate(n_bags: int, bag_size_range=(3, 8), m: int = 10,
                   positive_fraction: float = 0.5, seed: int = 0,
                   box: PlantedBox = PlantedBox()) -> MILDataset:
    """Bags of uniform background instances on ``[0, 1]^m``; positive bags get
    one or more instances planted inside ``box``.

    Background draws that land in the box are redrawn, so a bag is positive
    exactly when it contains a planted instance.
    """
    lo_size, hi_size = bag_size_range
    if n_bags < 1 or lo_size < 1 or hi_size < lo_size:
        raise ValueError(f"invalid n_bags={n_bags} or bag_size_range={bag_size_range}")
    if not 0.0 < positive_fraction < 1.0:
        raise ValueError("positive_fraction must lie strictly between 0 and 1")
    if m < 1 or max(box.features) >= m:
        raise ValueError(f"m={m} too small for box features {box.features}")

    rng = np.random.default_rng(seed)
    n_pos = int(round(positive_fraction * n_bags))
    is_pos = np.zeros(n_bags, dtype=bool)
    is_pos[rng.choice(n_bags, size=n_pos, replace=False)] = True

    bags = []
    for i in range(n_bags):
        size = int(rng.integers(lo_size, hi_size + 1))
        X = rng.uniform(0.0, 1.0, size=(size, m))
        inside = box.contains(X)
        while inside.any():
            X[inside] = rng.uniform(0.0, 1.0, size=(int(inside.sum()), m))
            inside = box.contains(X)
        planted = np.zeros(size, dtype=int)
        if is_pos[i]:
            n_planted = int(rng.integers(1, max(1, size // 3) + 1))
            rows = rng.choice(size, size=n_planted, replace=False)
            cols = list(box.features)
            X[np.ix_(rows, cols)] = rng.uniform(box.lo, box.hi, size=(n_planted, len(cols)))
            planted[rows] = 1
        label = int(planted.max())
        bags.append(Bag(f"b{i}", X, label, planted))
    return MILDataset(tuple(bags), m)


def kfold_split(dataset: MILDataset, k: int, seed: int = 0,
                stratified: bool = True) -> FoldSplit:
    """Assign bags to ``k`` folds.

    Stratified splits shuffle each class separately and deal the bags
    round-robin, continuing the rotation across classes, so fold sizes and
    per-class counts both differ by at most one.
    """
    n = len(dataset)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"cannot make {k} folds from {n} bags")
    rng = np.random.default_rng(seed)
    assignments = np.empty(n, dtype=int)
    if stratified:
        labels = dataset.labels
        pos = 0
        for cls in np.unique(labels):
            members = np.flatnonzero(labels == cls)
            if len(members) < k:
                raise ValueError(f"class {cls} has {len(members)} bags, fewer than k={k}")
            members = rng.permutation(members)
            assignments[members] = (pos + np.arange(len(members))) % k
            pos = (pos + len(members)) % k
    else:
        assignments[rng.permutation(n)] = np.arange(n) % k
    return FoldSplit(k, assignments)
