"""Evaluation metrics and the measured quantities entering the error bound."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import linalg
from .linalg import AffineSubspace, InvalidInputError, InvalidRankError

__all__ = [
    "accuracy_and_recall",
    "max_recall_drop",
    "gradient_estimation_error",
    "variance_concentration",
    "VariationReport",
    "measure_variations",
    "AssumptionReport",
    "assumption_report",
]

SUBSET_ENUM_CAP = 100_000
SUBSET_SAMPLE_COUNT = 10_000


def accuracy_and_recall(model, w, dataset):
    """Overall accuracy and per-class recall on a labeled dataset.

    Classes absent from the dataset get recall nan.
    """
    if len(dataset) == 0:
        raise InvalidInputError("empty evaluation set")
    pred = model.predict(w, dataset.features)
    acc = float(np.mean(pred == dataset.labels))
    recalls = np.full(model.classes, np.nan)
    for z in range(model.classes):
        mask = dataset.labels == z
        if np.any(mask):
            recalls[z] = float(np.mean(pred[mask] == z))
    return acc, recalls


def max_recall_drop(recalls, reference_recalls) -> float:
    """Largest per-class recall loss against a reference run, clamped at zero."""
    r = np.asarray(recalls, dtype=np.float64)
    ref = np.asarray(reference_recalls, dtype=np.float64)
    if r.shape != ref.shape:
        raise InvalidInputError("recall vectors must have matching length")
    drops = ref - r
    drops = drops[np.isfinite(drops)]
    if drops.size == 0:
        return 0.0
    return float(max(0.0, drops.max()))


def gradient_estimation_error(aggregate, expected) -> float:
    """Squared Euclidean distance between the aggregate and its target."""
    a = np.asarray(aggregate, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    if a.shape != e.shape:
        raise InvalidInputError("dimension mismatch")
    diff = a - e
    return float(diff @ diff)


def variance_concentration(points, rank: int) -> float:
    """Fraction of centered variance captured by the top `rank` directions."""
    pts = np.asarray(points, dtype=np.float64)
    centered = pts - pts.mean(axis=1, keepdims=True)
    sing = np.linalg.svd(centered, compute_uv=False)
    total = float((sing**2).sum())
    if total == 0.0:
        return 1.0
    if not (1 <= rank <= sing.size):
        raise InvalidRankError(f"rank {rank} not in [1, {sing.size}]")
    return float((sing[:rank] ** 2).sum() / total)


@dataclass(frozen=True)
class VariationReport:
    """Measured squared deviations of one aggregation round.

    All fields are squared Euclidean quantities so they plug directly into
    quadratic error bounds: eps_sq is the largest honest within-distribution
    deviation E||g_i - E g_i||^2 proxy, eps_s_sq the server-gradient analog,
    delta_sq the largest distance of an expected honest gradient from the
    honest mean, delta_s_sq the analog for expected server gradients.
    """

    eps_sq: float
    eps_s_sq: float
    delta_sq: float
    delta_s_sq: float


def measure_variations(honest_gradients, expected_honest, server_gradients,
                       expected_server) -> VariationReport:
    """Compute the report from realized and expected gradient columns."""
    g = np.asarray(honest_gradients, dtype=np.float64)
    eg = np.asarray(expected_honest, dtype=np.float64)
    s = np.asarray(server_gradients, dtype=np.float64)
    es = np.asarray(expected_server, dtype=np.float64)
    if g.shape != eg.shape or s.shape != es.shape:
        raise InvalidInputError("realized and expected column shapes must match")

    def max_col_sq(mat):
        return float(np.max(np.einsum("ij,ij->j", mat, mat))) if mat.size else 0.0

    mu = eg.mean(axis=1, keepdims=True)
    mu_s = es.mean(axis=1, keepdims=True)
    return VariationReport(
        eps_sq=max_col_sq(g - eg),
        eps_s_sq=max_col_sq(s - es),
        delta_sq=max_col_sq(eg - mu),
        delta_s_sq=max_col_sq(es - mu_s),
    )


@dataclass(frozen=True)
class AssumptionReport:
    """Smallest (c-1)-th singular value over (n-2f)-subsets of expected honest
    gradients, which lower-bounds how well-spread the honest population is."""

    sigma_min: float
    subsets_checked: int
    exhaustive: bool
    sample_seed: int | None


def assumption_report(expected_honest, f: int, num_classes: int,
                      enum_cap: int = SUBSET_ENUM_CAP,
                      sample_count: int = SUBSET_SAMPLE_COUNT,
                      sample_seed: int = 0,
                      subset_size: int | None = None) -> AssumptionReport:
    """Evaluate the spread condition over honest subsets.

    The default subset size is n_honest - 2f; pass subset_size to pin it
    (for instance total_clients - 2f when Byzantine columns are excluded).
    Enumerates all subsets when their count stays below enum_cap, otherwise
    samples sample_count subsets with a recorded seed.
    """
    eg = np.asarray(expected_honest, dtype=np.float64)
    n = eg.shape[1]
    size = (n - 2 * f) if subset_size is None else subset_size
    if size > n:
        raise InvalidInputError("subset size exceeds number of columns")
    k = num_classes - 1
    if size < 1:
        raise InvalidInputError("need n > 2f honest columns")
    if size < k + 1:
        raise InvalidRankError("subset too small to span c - 1 directions")

    total = math.comb(n, size)
    sigma_min = math.inf
    if total <= enum_cap:
        for subset in itertools.combinations(range(n), size):
            sigma = linalg.kth_singular_value(eg[:, list(subset)], k)
            sigma_min = min(sigma_min, sigma)
        return AssumptionReport(float(sigma_min), total, True, None)
    rng = np.random.default_rng(sample_seed)
    for _ in range(sample_count):
        subset = rng.choice(n, size=size, replace=False)
        sigma = linalg.kth_singular_value(eg[:, subset], k)
        sigma_min = min(sigma_min, sigma)
    return AssumptionReport(float(sigma_min), sample_count, False, sample_seed)
