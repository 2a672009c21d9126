"""Synthetic and CSV datasets with deterministic splits and batch order.

Rows are assigned to train/test by ranking a keyed hash of the row index, so
the 8:2 split is exact, stable under re-load, and independent of file order
tricks. Batch order comes from a seeded shuffled-epoch iterator.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .rng import derive_seed, mix64, normals_at, uniforms
from .tensor import DenseMatrix

SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST = 0, 1, 2
SYNTHETIC_KINDS = ("two-gaussians", "two-moons", "linear-regression")

_SPLIT_TAG = 0x5350


class DataError(ValueError):
    """Malformed dataset input."""


@dataclass
class Dataset:
    """Feature matrix with labels and a train/val/test assignment per row."""

    features: DenseMatrix
    labels: np.ndarray  # int64 class ids (classification) or float64 targets
    split: np.ndarray  # uint8 codes, one per row
    task: str  # "classification" | "regression"
    n_classes: int = 0

    def __post_init__(self):
        n = self.features.rows
        if self.labels.shape[0] != n or self.split.shape[0] != n:
            raise DataError("labels/split length must match the number of rows")
        if self.task == "classification":
            if self.n_classes < 2:
                raise DataError("classification needs at least two classes")
            if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
                raise DataError("labels outside the declared class count")
        elif self.task != "regression":
            raise DataError(f"unknown task {self.task!r}")

    @property
    def n(self) -> int:
        return self.features.rows

    @property
    def n_features(self) -> int:
        return self.features.cols

    def indices(self, split: int) -> np.ndarray:
        return np.flatnonzero(self.split == split)


def hash_split(n: int, seed: int, train_parts: int = 8, total_parts: int = 10) -> np.ndarray:
    """Exact train/test assignment: rank rows by keyed hash, first 8/10 train."""
    keys = np.array([mix64(derive_seed(seed, _SPLIT_TAG, i)) for i in range(n)])
    order = np.argsort(keys, kind="stable")
    split = np.full(n, SPLIT_TEST, dtype=np.uint8)
    split[order[: (n * train_parts) // total_parts]] = SPLIT_TRAIN
    return split


def make_synthetic(kind: str, n: int, noise: float, seed: int) -> Dataset:
    """Deterministic toy dataset; classification kinds are class-balanced."""
    if n < 10:
        raise DataError("need at least 10 examples")
    if kind == "two-gaussians":
        labels = np.arange(n, dtype=np.int64) % 2
        centers = np.array([[-1.5, -1.0], [1.5, 1.0]])
        x = centers[labels] + noise * normals_at(seed, 0, 2 * n).reshape(n, 2)
        return Dataset(DenseMatrix(x), labels, hash_split(n, seed), "classification", 2)
    if kind == "two-moons":
        labels = np.arange(n, dtype=np.int64) % 2
        t = np.pi * uniforms(seed, 0, n)
        x = np.where(
            (labels == 0)[:, None],
            np.column_stack([np.cos(t), np.sin(t)]),
            np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)]),
        )
        x = x + noise * normals_at(seed, n, 2 * n).reshape(n, 2)
        return Dataset(DenseMatrix(x), labels, hash_split(n, seed), "classification", 2)
    if kind == "linear-regression":
        d = 3
        x = normals_at(seed, 0, n * d).reshape(n, d)
        w = normals_at(derive_seed(seed, 1), 0, d)
        b = float(normals_at(derive_seed(seed, 2), 0, 1)[0])
        y = x @ w + b + noise * normals_at(seed, n * d, n)
        return Dataset(DenseMatrix(x), y, hash_split(n, seed), "regression")
    raise DataError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")


def load_csv(path, label_col: str = "label", feature_cols: list[str] | None = None,
             seed: int = 0) -> Dataset:
    """Load a header-first CSV; rows split 8:2 by hash of row index and seed.

    Labels that are all integral become class ids; anything else is treated
    as regression targets.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty dataset: no header row") from None
        header = [h.strip() for h in header]
        rows = [row for row in reader if row]
    if not rows:
        raise DataError("empty dataset: header only")
    if label_col not in header:
        raise DataError(f"missing column {label_col!r}")
    if feature_cols is None:
        feature_cols = [h for h in header if h != label_col]
    missing = [c for c in feature_cols if c not in header]
    if missing:
        raise DataError(f"missing column {missing[0]!r}")
    if not feature_cols:
        raise DataError("no feature columns")

    col_of = {name: header.index(name) for name in header}

    def cell(row_idx: int, row: list[str], name: str) -> float:
        raw = row[col_of[name]].strip()
        try:
            return float(raw)
        except (ValueError, IndexError):
            raise DataError(
                f"non-numeric cell at row {row_idx + 2}, column {name!r}: {raw!r}"
            ) from None

    feats = np.array(
        [[cell(i, row, c) for c in feature_cols] for i, row in enumerate(rows)]
    )
    raw_labels = np.array([cell(i, row, label_col) for i, row in enumerate(rows)])

    split = hash_split(len(rows), seed)
    if np.all(raw_labels == np.round(raw_labels)) and raw_labels.min() >= 0:
        labels = raw_labels.astype(np.int64)
        return Dataset(DenseMatrix(feats), labels, split, "classification",
                       int(labels.max()) + 1 if labels.max() >= 1 else 2)
    return Dataset(DenseMatrix(feats), raw_labels, split, "regression")


def batch_stream(dataset: Dataset, split: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless stream of row-index batches: reshuffle each epoch, drop remainder."""
    pool = dataset.indices(split)
    if pool.shape[0] < batch_size:
        raise DataError(
            f"split has {pool.shape[0]} rows, smaller than batch_size {batch_size}"
        )
    epoch = 0
    while True:
        order = pool.copy()
        n = order.shape[0]
        u = uniforms(derive_seed(seed, epoch), 0, n)
        for i in range(n - 1):
            j = i + int(u[i] * (n - i))
            order[i], order[j] = order[j], order[i]
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start : start + batch_size]
        epoch += 1
