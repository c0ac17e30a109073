"""Deterministic synthetic classification tasks and the bilevel split.

Example ids are dense 0..N-1 and stable across epochs so stored teacher
probabilities can be looked up by id.  Nothing here is augmented or
re-sampled after generation.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .diffcore import RngState, derive_seed

KINDS = ("moons", "blobs", "spirals")


@dataclass(frozen=True)
class Dataset:
    kind: str
    features: np.ndarray  # (N, 2) float64
    labels: np.ndarray  # (N,) int64
    class_count: int

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class Split:
    train_ids: np.ndarray
    valid_ids: np.ndarray


def _class_sizes(n: int, classes: int) -> list[int]:
    base, extra = divmod(n, classes)
    return [base + (1 if k < extra else 0) for k in range(classes)]


def generate(kind: str, n: int, noise: float, seed: int, classes: int | None = None) -> Dataset:
    """Build a dataset; identical (kind, n, noise, seed, classes) gives
    identical bytes."""
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if noise < 0:
        raise ValueError(f"noise must be >= 0, got {noise}")
    if kind in ("moons", "spirals"):
        if classes not in (None, 2):
            raise ValueError(f"{kind} is a 2-class task")
        classes = 2
    else:
        classes = 3 if classes is None else int(classes)
        if not 2 <= classes <= 8:
            raise ValueError(f"blobs supports 2..8 classes, got {classes}")
    if n < 2 * classes:
        raise ValueError(f"need n >= {2 * classes} for {classes} classes, got {n}")

    rng = RngState(derive_seed(seed, "dataset", kind, n, noise, classes))
    sizes = _class_sizes(n, classes)
    feats: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    if kind == "moons":
        t0 = np.linspace(0.0, np.pi, sizes[0])
        feats.append(np.stack([np.cos(t0), np.sin(t0)], axis=1))
        t1 = np.linspace(0.0, np.pi, sizes[1])
        feats.append(np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1))
    elif kind == "spirals":
        for k in range(2):
            t = np.linspace(0.0, 1.0, sizes[k])
            r = 0.2 + 2.2 * t
            theta = 3.0 * np.pi * t + np.pi * k
            feats.append(np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1))
    else:  # blobs on a circle of centroids
        for k in range(classes):
            ang = 2.0 * np.pi * k / classes
            c = np.array([3.0 * np.cos(ang), 3.0 * np.sin(ang)])
            feats.append(np.tile(c, (sizes[k], 1)))
    for k, m in enumerate(sizes):
        labels.append(np.full(m, k, dtype=np.int64))
    X = np.concatenate(feats, axis=0)
    y = np.concatenate(labels, axis=0)
    if noise > 0:
        X = X + rng.normal(X.shape, 0.0, noise)
    return Dataset(kind=kind, features=X, labels=y, class_count=classes)


def split(ds: Dataset, valid_fraction: float, seed: int) -> Split:
    """Stratified disjoint train/valid split, at least one example of every
    class on each side."""
    if not 0.0 < valid_fraction < 1.0:
        raise ValueError(f"valid_fraction must be in (0, 1), got {valid_fraction}")
    train: list[np.ndarray] = []
    valid: list[np.ndarray] = []
    for k in range(ds.class_count):
        ids = np.nonzero(ds.labels == k)[0]
        if len(ids) < 2:
            raise ValueError(f"class {k} has fewer than 2 examples; cannot split")
        rng = RngState(derive_seed(seed, "split", k))
        perm = ids[rng.permutation(len(ids))]
        n_valid = min(max(1, int(valid_fraction * len(ids) + 0.5)), len(ids) - 1)
        valid.append(perm[:n_valid])
        train.append(perm[n_valid:])
    return Split(
        train_ids=np.sort(np.concatenate(train)),
        valid_ids=np.sort(np.concatenate(valid)),
    )


def epoch_batches(ids: np.ndarray, batch_size: int, seed: int, epoch: int, tag: str) -> list[np.ndarray]:
    """Shuffled batches covering ``ids`` exactly once; the order is a pure
    function of (seed, epoch, tag)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = RngState(derive_seed(seed, "batches", tag, epoch))
    perm = np.asarray(ids)[rng.permutation(len(ids))]
    return [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]


def to_csv(ds: Dataset, path) -> None:
    dim = ds.features.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"] + [f"f{j}" for j in range(dim)])
        for i in range(ds.n):
            w.writerow([i, int(ds.labels[i])] + [repr(float(v)) for v in ds.features[i]])


def from_csv(path, kind: str = "csv") -> Dataset:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:2] != ["id", "label"]:
            raise ValueError(f"bad dataset CSV header: {header!r}")
        rows = list(r)
    feats = np.array([[float(v) for v in row[2:]] for row in rows], dtype=np.float64)
    labels = np.array([int(row[1]) for row in rows], dtype=np.int64)
    ids = [int(row[0]) for row in rows]
    if ids != list(range(len(rows))):
        raise ValueError("dataset CSV ids must be dense 0..N-1 in order")
    return Dataset(kind=kind, features=feats, labels=labels, class_count=int(labels.max()) + 1)
