"""Byzantine gradient generators.

Colluding attacks see the honest gradient matrix (omniscient adversary) and
emit identical columns; the Gaussian attack is independent noise.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

from .linalg import InvalidInputError

__all__ = ["gauss", "ipm", "lie", "lie_z", "mimic", "min_opt", "ATTACK_NAMES"]

ATTACK_NAMES = ("gauss", "ipm", "lie", "mimic", "minmax", "minsum")

GAUSS_VARIANCE = 200.0
IPM_GAMMA = 10.0
MIN_OPT_GAMMA_INIT = 10.0
MIN_OPT_TAU = 1e-5


def gauss(d: int, count: int, rng: np.random.Generator, variance: float = GAUSS_VARIANCE):
    """i.i.d. zero-mean Gaussian columns with the given per-coordinate variance."""
    if count < 1:
        raise InvalidInputError("need at least one Byzantine column")
    return rng.normal(0.0, np.sqrt(variance), size=(d, count))


def ipm(honest, count: int, gamma: float = IPM_GAMMA):
    """Every column is -gamma times the honest mean (inner-product flip)."""
    h = np.asarray(honest, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] < 1:
        raise InvalidInputError("need at least one honest column")
    col = -gamma * h.mean(axis=1)
    return np.tile(col[:, None], (1, count))


def lie_z(n: int, byz_count: int) -> float:
    """Perturbation multiple for the small-deviation attack."""
    if n <= byz_count:
        raise InvalidInputError("need n > byz_count")
    frac = (n - int(np.floor(n / 2 + 1))) / (n - byz_count)
    return float(ndtri(frac))


def lie(honest, n: int, byz_count: int):
    """Honest mean shifted by z coordinate-wise standard deviations, with z
    chosen so the columns stay within the spread of honest gradients."""
    h = np.asarray(honest, dtype=np.float64)
    z = lie_z(n, byz_count)
    col = h.mean(axis=1) + z * h.std(axis=1)
    return np.tile(col[:, None], (1, byz_count))


def mimic(honest, target_index: int, byz_count: int):
    """All columns copy one honest client's gradient."""
    h = np.asarray(honest, dtype=np.float64)
    if not 0 <= target_index < h.shape[1]:
        raise InvalidInputError("target index out of range")
    return np.tile(h[:, [target_index]], (1, byz_count))


def _minmax_feasible(mal, h, max_pairwise_sq):
    d2 = np.einsum("ij,ij->j", h - mal[:, None], h - mal[:, None])
    return d2.max() <= max_pairwise_sq


def _minsum_feasible(mal, h, max_sum_sq):
    d2 = np.einsum("ij,ij->j", h - mal[:, None], h - mal[:, None])
    return d2.sum() <= max_sum_sq


def min_opt(honest, n: int, byz_count: int, variant: str = "minmax",
            gamma_init: float = MIN_OPT_GAMMA_INIT, tau: float = MIN_OPT_TAU):
    """Largest perturbation along the coordinate-wise deviation direction that
    still passes the variant's distance test against the honest gradients.

    The scale is found by doubling the upper end until infeasible, then
    bisecting the bracket down to width tau.
    """
    h = np.asarray(honest, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] < 2:
        raise InvalidInputError("need at least two honest columns")
    mean = h.mean(axis=1)
    direction = h.std(axis=1)
    if not np.any(direction > 0):
        return np.tile(mean[:, None], (1, byz_count))

    from .aggregation import pairwise_sq_distances

    d2 = pairwise_sq_distances(h)
    if variant == "minmax":
        budget = d2.max()
        feasible = lambda gamma: _minmax_feasible(mean + gamma * direction, h, budget)
    elif variant == "minsum":
        budget = d2.sum(axis=1).max()
        feasible = lambda gamma: _minsum_feasible(mean + gamma * direction, h, budget)
    else:
        raise InvalidInputError(f"unknown variant {variant!r}")

    if feasible(gamma_init):
        lo, hi = gamma_init, 2.0 * gamma_init
        while feasible(hi):
            lo, hi = hi, 2.0 * hi
            if hi > 1e12:  # unbounded in degenerate geometry; stop scaling
                lo = hi
                break
    else:
        lo, hi = 0.0, gamma_init
    while hi - lo > tau:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    col = mean + lo * direction
    return np.tile(col[:, None], (1, byz_count))
