"""Synthetic classification data and client partitioning, plus a small CSV loader."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hflsim.errors import ConfigurationError


@dataclass(frozen=True, eq=False)
class LabeledBatch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        x = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.shape[0] != y.shape[0]:
            raise ConfigurationError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if y.size and y.min() < 0:
            raise ConfigurationError("labels must be nonnegative")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx: np.ndarray) -> "LabeledBatch":
        return LabeledBatch(self.features[idx], self.labels[idx])


@dataclass(frozen=True, eq=False)
class Partition:
    """Disjoint per-client slices of a source dataset."""

    clients: list[LabeledBatch]
    indices: list[np.ndarray] = field(repr=False)

    @property
    def sizes(self) -> list[int]:
        return [len(c) for c in self.clients]

    def __len__(self) -> int:
        return len(self.clients)


def _class_directions(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if num_classes <= dim:
        return np.eye(dim)[:num_classes]
    dirs = rng.standard_normal((num_classes, dim))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def gen_blobs(
    num_classes: int,
    dim: int,
    samples_per_class: int,
    separation: float,
    rng: np.random.Generator,
) -> LabeledBatch:
    """Unit-variance Gaussian clusters, class ``c`` centred at ``separation * u_c``.

    ``u_c`` is the c-th standard basis vector when there are no more classes than
    dimensions, otherwise a random unit direction.
    """
    if min(num_classes, dim, samples_per_class) <= 0:
        raise ConfigurationError("num_classes, dim and samples_per_class must be positive")
    centers = separation * _class_directions(num_classes, dim, rng)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    x = centers[labels] + rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return LabeledBatch(x[order], labels[order])


def train_val_split(data: LabeledBatch, val_fraction: float, rng: np.random.Generator) -> tuple[LabeledBatch, LabeledBatch]:
    if not 0.0 < val_fraction < 1.0:
        raise ConfigurationError("val_fraction must lie in (0, 1)")
    order = rng.permutation(len(data))
    n_val = int(round(val_fraction * len(data)))
    return data.subset(np.sort(order[n_val:])), data.subset(np.sort(order[:n_val]))


def _partition_from(data: LabeledBatch, indices: list[np.ndarray]) -> Partition:
    indices = [np.sort(np.asarray(i, dtype=np.int64)) for i in indices]
    return Partition([data.subset(i) for i in indices], indices)


def partition_iid(data: LabeledBatch, num_clients: int, rng: np.random.Generator) -> Partition:
    """Random equal-size split; the first ``len(data) % num_clients`` clients get one extra."""
    if not 0 < num_clients <= len(data):
        raise ConfigurationError(f"cannot split {len(data)} samples over {num_clients} clients")
    return _partition_from(data, np.array_split(rng.permutation(len(data)), num_clients))


def partition_label_skew(
    data: LabeledBatch,
    num_clients: int,
    concentration: float,
    rng: np.random.Generator,
    max_tries: int = 100,
) -> Partition:
    """Per-class client shares drawn from a symmetric Dirichlet(concentration).

    Draws are repeated until every client is nonempty; after ``max_tries`` the
    remaining empty clients each take one sample from the largest client.
    """
    if concentration <= 0:
        raise ConfigurationError("concentration must be positive")
    if not 0 < num_clients <= len(data):
        raise ConfigurationError(f"cannot split {len(data)} samples over {num_clients} clients")
    by_class = [rng.permutation(np.flatnonzero(data.labels == c)) for c in range(data.num_classes)]
    for _ in range(max_tries):
        buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for idx in by_class:
            shares = rng.dirichlet(np.full(num_clients, concentration))
            cuts = np.round(np.cumsum(shares)[:-1] * idx.size).astype(int)
            for client, part in enumerate(np.split(idx, cuts)):
                buckets[client].append(part)
        indices = [np.concatenate(b) if b else np.empty(0, dtype=np.int64) for b in buckets]
        if all(i.size for i in indices):
            break
    else:
        for client in range(num_clients):
            if indices[client].size == 0:
                donor = int(np.argmax([i.size for i in indices]))
                indices[client] = indices[donor][-1:]
                indices[donor] = indices[donor][:-1]
    return _partition_from(data, indices)


def load_csv(path: str | Path) -> LabeledBatch:
    """Read a headered CSV whose final column is ``label``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigurationError(f"{path}: empty file") from None
        if not header or header[-1].strip() != "label":
            raise ConfigurationError(f"{path}: final column must be named 'label'")
        rows = [r for r in reader if r]
    if not rows:
        raise ConfigurationError(f"{path}: no data rows")
    try:
        table = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise ConfigurationError(f"{path}: non-numeric cell ({exc})") from None
    labels = table[:, -1]
    if np.any(labels < 0) or np.any(labels != np.round(labels)):
        raise ConfigurationError(f"{path}: labels must be nonnegative integers")
    return LabeledBatch(table[:, :-1], labels.astype(np.int64))


def save_csv(data: LabeledBatch, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(data.dim)] + ["label"])
        for row, label in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
