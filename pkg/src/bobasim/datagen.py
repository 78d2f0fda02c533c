"""Synthetic label-skew tasks, client partitioners, and the per-class
expected-gradient oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import helmert

from .linalg import InvalidInputError

__all__ = [
    "LabeledDataset",
    "simplex_class_means",
    "make_gaussian_mixture_task",
    "sample_class_features",
    "partition_pathological",
    "partition_step",
    "partition_dirichlet",
    "expected_class_gradients",
    "label_histogram",
    "save_csv",
    "load_csv",
]


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray  # samples x dim
    labels: np.ndarray  # int, in [0, c)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or labels.ndim != 1 or feats.shape[0] != labels.shape[0]:
            raise InvalidInputError("features must be samples x dim matching labels")
        if labels.size and labels.min() < 0:
            raise InvalidInputError("labels must be non-negative")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=int)
        return LabeledDataset(self.features[idx], self.labels[idx])


def label_histogram(labels, c: int) -> np.ndarray:
    """Empirical label distribution (length c, sums to one)."""
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=c).astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise InvalidInputError("empty label set")
    return counts / total


def simplex_class_means(c: int, dim: int, class_separation: float) -> np.ndarray:
    """c class centers in R^dim with all pairwise distances equal to
    class_separation * sqrt(2) (regular simplex arrangement)."""
    if c < 2:
        raise InvalidInputError("need at least two classes")
    if dim < c - 1:
        raise InvalidInputError("dim must be at least c - 1 for a regular simplex")
    coords = class_separation * helmert(c)  # (c-1) x c, isometric on 1-orthogonal diffs
    means = np.zeros((c, dim))
    means[:, : c - 1] = coords.T
    return means


def sample_class_features(class_means: np.ndarray, z: int, count: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, 1.0, size=(count, class_means.shape[1])) + class_means[z]


def make_gaussian_mixture_task(c: int, dim: int, per_class: int, class_separation: float,
                               rng: np.random.Generator) -> LabeledDataset:
    """Balanced unit-variance Gaussian mixture with simplex-arranged means."""
    means = simplex_class_means(c, dim, class_separation)
    feats = np.vstack([sample_class_features(means, z, per_class, rng) for z in range(c)])
    labels = np.repeat(np.arange(c), per_class)
    return LabeledDataset(feats, labels)


def _apportion(weights, total: int) -> np.ndarray:
    """Integer allocation proportional to weights (largest remainder)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.sum() <= 0:
        w = np.ones_like(w)
    quota = w / w.sum() * total
    base = np.floor(quota).astype(int)
    short = total - int(base.sum())
    order = np.argsort(-(quota - base), kind="stable")
    base[order[:short]] += 1
    return base


def _finish_partition(data: LabeledDataset, assignments: list, c: int):
    clients = [data.subset(idx) for idx in assignments]
    dists = [label_histogram(ds.labels, c) for ds in clients]
    return clients, dists


def partition_pathological(data: LabeledDataset, honest_count: int, n_s: int,
                           rng: np.random.Generator):
    """Sort by label, cut into n_s * honest_count single-class shards, and deal
    n_s shuffled shards to each client."""
    if n_s < 1:
        raise InvalidInputError("n_s must be >= 1")
    total_shards = n_s * honest_count
    if len(data) < total_shards:
        raise InvalidInputError("not enough samples for the shard scheme")
    c = int(data.labels.max()) + 1
    counts = np.bincount(data.labels, minlength=c)
    shards_per_class = _apportion(counts, total_shards)
    # every non-empty class must receive at least one shard to keep the union exact
    for z in range(c):
        if counts[z] > 0 and shards_per_class[z] == 0:
            shards_per_class[np.argmax(shards_per_class)] -= 1
            shards_per_class[z] = 1
    shards = []
    for z in range(c):
        if shards_per_class[z] == 0:
            continue
        idx = np.flatnonzero(data.labels == z)
        shards.extend(np.array_split(idx, shards_per_class[z]))
    order = rng.permutation(len(shards))
    assignments = []
    for i in range(honest_count):
        chunk = [shards[j] for j in order[i * n_s : (i + 1) * n_s]]
        assignments.append(np.concatenate(chunk) if chunk else np.array([], dtype=int))
    return _finish_partition(data, assignments, c)


def partition_step(data: LabeledDataset, honest_count: int, alpha: float,
                   rng: np.random.Generator):
    """Two major classes per client with alpha times the per-class data of the
    remaining minor classes. alpha=1 is IID; alpha=inf degenerates to the
    pathological two-shard partition."""
    if alpha < 1:
        raise InvalidInputError("alpha must be >= 1")
    if math.isinf(alpha):
        return partition_pathological(data, honest_count, 2, rng)
    c = int(data.labels.max()) + 1
    weights = np.ones((honest_count, c))
    for i in range(honest_count):
        weights[i, (2 * i) % c] = alpha
        weights[i, (2 * i + 1) % c] = alpha
    assignments = [[] for _ in range(honest_count)]
    for z in range(c):
        idx = rng.permutation(np.flatnonzero(data.labels == z))
        alloc = _apportion(weights[:, z], idx.size)
        stop = np.cumsum(alloc)
        start = stop - alloc
        for i in range(honest_count):
            assignments[i].append(idx[start[i] : stop[i]])
    assignments = [np.concatenate(parts) for parts in assignments]
    return _finish_partition(data, assignments, c)


def partition_dirichlet(data: LabeledDataset, honest_count: int, alpha: float,
                        rng: np.random.Generator, max_redraws: int = 100):
    """Per-client class proportions drawn from a symmetric Dirichlet; samples
    are dealt without replacement. Clients that end up empty are re-drawn."""
    if alpha <= 0:
        raise InvalidInputError("alpha must be > 0")
    c = int(data.labels.max()) + 1
    props = rng.dirichlet(np.full(c, alpha), size=honest_count)
    for _ in range(max_redraws):
        assignments = [[] for _ in range(honest_count)]
        for z in range(c):
            idx = rng.permutation(np.flatnonzero(data.labels == z))
            alloc = _apportion(props[:, z], idx.size)
            stop = np.cumsum(alloc)
            start = stop - alloc
            for i in range(honest_count):
                assignments[i].append(idx[start[i] : stop[i]])
        assignments = [np.concatenate(parts) for parts in assignments]
        sizes = np.array([a.size for a in assignments])
        if np.all(sizes > 0):
            return _finish_partition(data, assignments, c)
        empty = np.flatnonzero(sizes == 0)
        props[empty] = rng.dirichlet(np.full(c, alpha), size=empty.size)
    # last resort: move single samples from the largest clients
    for i in np.flatnonzero(sizes == 0):
        donor = int(np.argmax([a.size for a in assignments]))
        assignments[i] = assignments[donor][-1:]
        assignments[donor] = assignments[donor][:-1]
    return _finish_partition(data, assignments, c)


def expected_class_gradients(grad_fn, class_means: np.ndarray, rng: np.random.Generator,
                             samples_per_class: int = 100_000, batch: int = 20_000) -> np.ndarray:
    """Monte-Carlo per-class expected gradients; grad_fn(dataset) -> vector.

    Returns a d x c matrix of per-class gradient estimates computed on large
    held-out samples from each class-conditional distribution.
    """
    c = class_means.shape[0]
    cols = []
    for z in range(c):
        remaining = samples_per_class
        acc = None
        while remaining > 0:
            take = min(batch, remaining)
            feats = sample_class_features(class_means, z, take, rng)
            g = grad_fn(LabeledDataset(feats, np.full(take, z, dtype=np.int64)))
            acc = g * take if acc is None else acc + g * take
            remaining -= take
        cols.append(acc / samples_per_class)
    return np.column_stack(cols)


def save_csv(dataset: LabeledDataset, path) -> None:
    header = ",".join([f"f{i}" for i in range(dataset.dim)] + ["label"])
    body = np.column_stack([dataset.features, dataset.labels.astype(np.float64)])
    np.savetxt(path, body, delimiter=",", header=header, comments="",
               fmt=["%.17g"] * dataset.dim + ["%d"])


def load_csv(path) -> LabeledDataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if not header or header[-1] != "label" or any(
            name != f"f{i}" for i, name in enumerate(header[:-1])
        ):
            raise InvalidInputError(f"unexpected CSV header in {path}")
        body = np.loadtxt(fh, delimiter=",", ndmin=2)
    if body.size == 0:
        raise InvalidInputError(f"empty dataset in {path}")
    return LabeledDataset(body[:, :-1], body[:, -1].astype(np.int64))
