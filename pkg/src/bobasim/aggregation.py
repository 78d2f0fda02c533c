"""Aggregation rules: the two-stage subspace aggregator, its exhaustive-search
variant, and the baseline robust rules, plus the error-bound formula and the
adversarial test fixtures used by the verification suite.

Gradients are column-stacked: a d x n matrix holds n client gradients.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import blas

from . import linalg
from .linalg import AffineSubspace, InvalidInputError

__all__ = [
    "AggregationInput",
    "AggregationResult",
    "BobaParams",
    "SubspaceFit",
    "trimmed_reconstruction_loss",
    "fit_subspace_alternating",
    "fit_subspace_exhaustive",
    "boba_aggregate",
    "average",
    "coordinate_median",
    "trimmed_mean",
    "krum",
    "geometric_median",
    "fltrust",
    "loss_rejection",
    "bucketing",
    "compute_boba_error_bound",
    "make_lower_bound_instance",
    "make_three_client_instance",
    "pairwise_sq_distances",
]

EXHAUSTIVE_SUBSET_CAP = 200_000


@dataclass(frozen=True)
class AggregationInput:
    """Inputs shared by the two-stage aggregator."""

    gradients: np.ndarray  # d x n
    server_gradients: np.ndarray | None  # d x c
    byzantine_tolerance: int
    num_classes: int

    # full element scans are skipped above this size; non-finite entries in
    # large inputs still surface through the Gram diagonal during aggregation
    FINITE_SCAN_CAP = 2_000_000

    def __post_init__(self):
        g = np.asarray(self.gradients, dtype=np.float64)
        object.__setattr__(self, "gradients", g)
        if g.ndim != 2 or g.shape[1] < 1:
            raise InvalidInputError("gradients must be d x n with n >= 1")
        if g.size <= self.FINITE_SCAN_CAP and not np.all(np.isfinite(g)):
            raise InvalidInputError("gradients contain non-finite entries")
        if self.server_gradients is not None:
            s = np.asarray(self.server_gradients, dtype=np.float64)
            object.__setattr__(self, "server_gradients", s)
            if s.shape != (g.shape[0], self.num_classes):
                raise InvalidInputError("server gradient matrix must be d x c")
        if not 0 <= self.byzantine_tolerance < g.shape[1]:
            raise InvalidInputError("need 0 <= f < n")

    @property
    def dim(self) -> int:
        return self.gradients.shape[0]

    @property
    def num_clients(self) -> int:
        return self.gradients.shape[1]


@dataclass(frozen=True)
class BobaParams:
    byzantine_tolerance: int
    p_min: float = -0.5
    max_alternations: int = 50

    def __post_init__(self):
        if self.p_min > 0:
            raise InvalidInputError("p_min must be <= 0")
        if self.max_alternations < 1:
            raise InvalidInputError("max_alternations must be >= 1")


@dataclass
class AggregationResult:
    aggregate: np.ndarray
    accepted: np.ndarray  # boolean mask, length n
    diagnostics: dict = field(default_factory=dict)


@dataclass
class SubspaceFit:
    subspace: AffineSubspace
    selection: np.ndarray  # boolean mask, length n
    trimmed_loss: float
    trsvd_calls: int
    loss_trace: list


def _selection_mask(n: int, idx) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    mask[np.asarray(idx, dtype=int)] = True
    return mask


def _residuals_to_subspace(subspace: AffineSubspace, gradients: np.ndarray) -> np.ndarray:
    centered = gradients - subspace.mean[:, None]
    coords = subspace.basis.T @ centered
    res = np.einsum("ij,ij->j", centered, centered) - np.einsum("ij,ij->j", coords, coords)
    return np.clip(res, 0.0, None)


def trimmed_reconstruction_loss(subspace: AffineSubspace, gradients, f: int):
    """Sum of squared residuals over the n-f gradients nearest the subspace.

    Ties are broken toward lower client index. Returns (loss, selection mask).
    """
    g = np.asarray(gradients, dtype=np.float64)
    n = g.shape[1]
    if f >= n:
        raise InvalidInputError("need f < n")
    res = _residuals_to_subspace(subspace, g)
    keep = np.argsort(res, kind="stable")[: n - f]
    return float(res[keep].sum()), _selection_mask(n, keep)


@dataclass
class _GramFitInfo:
    """One subset fit expressed in Gram coordinates."""

    S: np.ndarray  # selected column indices
    V: np.ndarray  # |S| x rank right vectors of the centered selection
    sigma: np.ndarray
    good: np.ndarray  # sigma above the degeneracy tolerance
    M: np.ndarray  # |S| x n cross products Xc_S^T (g_i - m_S)
    rmean: np.ndarray  # X_S^T m_S
    q: float  # m_S^T m_S


class _GramFitter:
    """Rank-k affine fits of column subsets via a cached Gram matrix.

    Computing G^T G once makes each subset fit O(n^3) instead of O(n^2 d).
    Encoding, simplex-coordinate recovery, and decoding all run in Gram space
    too, so aggregation touches the d-dimensional data exactly three times:
    the Gram product, the server cross product, and the final combination.
    """

    def __init__(self, gradients: np.ndarray, rank: int):
        self.G = gradients
        self.rank = rank
        d, n = gradients.shape
        if d > n:
            # rank-k update via syrk on the transposed view (no copy, half
            # the gemm flops); mirror the upper triangle
            K = blas.dsyrk(1.0, gradients.T, trans=0)
            K = np.triu(K) + np.triu(K, 1).T
        else:
            K = gradients.T @ gradients
        self.K = K
        self.diag = np.diag(K).copy()
        if not np.all(np.isfinite(self.diag)):
            raise InvalidInputError("gradients contain non-finite entries")

    def fit_residuals(self, idx):
        """Fit on columns idx; return residuals of all columns plus fit info."""
        S = np.asarray(idx, dtype=int)
        A = self.K[S, :]
        a = A.mean(axis=0)
        KSS = A[:, S]
        rmean = KSS.mean(axis=1)
        q = float(KSS.mean())
        M = A - a[None, :] - rmean[:, None] + q  # Xc_S^T (g_i - m_S) for all i
        Kc = M[:, S]
        Kc = 0.5 * (Kc + Kc.T)
        evals, evecs = np.linalg.eigh(Kc)
        order = np.argsort(-evals, kind="stable")[: self.rank]
        lam = np.clip(evals[order], 0.0, None)
        sigma = np.sqrt(lam)
        V = evecs[:, order]
        tol = (sigma[0] if sigma.size else 0.0) * 1e-9 + 1e-300
        good = sigma > tol
        coords = (V[:, good].T @ M) / sigma[good][:, None] if np.any(good) else np.zeros((0, M.shape[1]))
        sqdist = self.diag - 2.0 * a + q
        res = np.clip(sqdist - (coords**2).sum(axis=0), 0.0, None)
        return res, _GramFitInfo(S, V, sigma, good, M, rmean, q)

    def client_coords(self, info: _GramFitInfo) -> np.ndarray:
        """rank x n latent coordinates; degenerate directions stay zero."""
        out = np.zeros((self.rank, self.G.shape[1]))
        good = info.good
        if np.any(good):
            out[good] = (info.V[:, good].T @ info.M) / info.sigma[good][:, None]
        return out

    def vertex_coords(self, info: _GramFitInfo, cross: np.ndarray) -> np.ndarray:
        """rank x c latent coordinates of the server columns.

        cross is the c x n matrix of server/client inner products Gamma^T G.
        """
        A = cross[:, info.S].T  # |S| x c entries X_Sr^T gamma_z
        a = A.mean(axis=0)  # m_S^T gamma_z
        M = A - a[None, :] - info.rmean[:, None] + info.q
        out = np.zeros((self.rank, cross.shape[0]))
        good = info.good
        if np.any(good):
            out[good] = (info.V[:, good].T @ M) / info.sigma[good][:, None]
        return out

    def combine(self, info: _GramFitInfo, latent: np.ndarray) -> np.ndarray:
        """Decode a latent vector back to ambient space with one gemv."""
        good = info.good
        alpha = info.V[:, good] @ (latent[good] / info.sigma[good])
        w = np.zeros(self.G.shape[1])
        w[info.S] = alpha + (1.0 - alpha.sum()) / info.S.size
        return self.G @ w

    def materialize(self, info: _GramFitInfo) -> AffineSubspace:
        S, V, sigma, good = info.S, info.V, info.sigma, info.good
        cols = self.G[:, S]
        mean = cols.mean(axis=1)
        centered = cols - mean[:, None]
        U = np.zeros((self.G.shape[0], self.rank))
        if np.any(good):
            U[:, good] = (centered @ V[:, good]) / sigma[good]
        U = linalg._orthonormalize(U, good)
        U = linalg._complete_orthonormal(U, good)
        U, _ = linalg._fix_signs(U)
        return AffineSubspace(U, mean)


def _check_stage1_preconditions(inp: AggregationInput):
    if inp.server_gradients is None:
        raise InvalidInputError("server gradients are required to seed the subspace fit")
    rank = inp.num_classes - 1
    if inp.num_clients - inp.byzantine_tolerance < rank:
        raise InvalidInputError(
            "too few clients survive trimming to span a rank-%d subspace" % rank
        )


def _server_cross(inp: AggregationInput) -> np.ndarray:
    cross = inp.server_gradients.T @ inp.gradients  # c x n
    if not np.all(np.isfinite(np.einsum("ij,ij->j", inp.server_gradients,
                                        inp.server_gradients))):
        raise InvalidInputError("server gradients contain non-finite entries")
    return cross


def _init_residuals(fitter: _GramFitter, server: np.ndarray, cross: np.ndarray,
                    rank: int) -> np.ndarray:
    """Squared distance of every client to the affine span of the server
    columns, computed from Gram blocks only. Counts as one subspace fit."""
    Ks = server.T @ server
    rmean = Ks.mean(axis=1)
    q = float(Ks.mean())
    Kc = Ks - rmean[None, :] - rmean[:, None] + q
    Kc = 0.5 * (Kc + Kc.T)
    evals, evecs = np.linalg.eigh(Kc)
    order = np.argsort(-evals, kind="stable")[:rank]
    sigma = np.sqrt(np.clip(evals[order], 0.0, None))
    V = evecs[:, order]
    tol = (sigma[0] if sigma.size else 0.0) * 1e-9 + 1e-300
    good = sigma > tol
    colmean = cross.mean(axis=0)  # m_Gamma^T g_i
    M = cross - colmean[None, :] - rmean[:, None] + q
    coords = (V[:, good].T @ M) / sigma[good][:, None] if np.any(good) else np.zeros((0, M.shape[1]))
    sqdist = fitter.diag - 2.0 * colmean + q
    return np.clip(sqdist - (coords**2).sum(axis=0), 0.0, None)


def _fit_alternating_latent(inp: AggregationInput, max_alternations: int):
    _check_stage1_preconditions(inp)
    G = inp.gradients
    n, f = inp.num_clients, inp.byzantine_tolerance
    rank = inp.num_classes - 1
    keep = n - f

    fitter = _GramFitter(G, rank)
    cross = _server_cross(inp)
    res = _init_residuals(fitter, inp.server_gradients, cross, rank)
    trsvd_calls = 1
    sel = np.argsort(res, kind="stable")[:keep]
    loss_trace = [float(res[sel].sum())]
    seen = {tuple(sorted(sel))}
    info = None
    for _ in range(max_alternations):
        res, info = fitter.fit_residuals(sel)
        trsvd_calls += 1
        new_sel = np.argsort(res, kind="stable")[:keep]
        loss_trace.append(float(res[new_sel].sum()))
        key = tuple(sorted(new_sel))
        if key in seen:
            sel = new_sel
            break
        seen.add(key)
        sel = new_sel
    if info is None:  # max_alternations somehow zero; refit on init selection
        res, info = fitter.fit_residuals(sel)
        trsvd_calls += 1
    loss = float(np.sort(res, kind="stable")[:keep].sum())
    return fitter, info, sel, loss, loss_trace, trsvd_calls, cross


def _fit_exhaustive_latent(inp: AggregationInput, subset_cap: int):
    _check_stage1_preconditions(inp)
    G = inp.gradients
    n, f = inp.num_clients, inp.byzantine_tolerance
    rank = inp.num_classes - 1
    keep = n - f
    total = math.comb(n, keep)
    if total > subset_cap:
        raise InvalidInputError(
            f"{total} candidate selections exceed the cap of {subset_cap}"
        )
    fitter = _GramFitter(G, rank)
    cross = _server_cross(inp)
    best = None
    count = 0
    for subset in itertools.combinations(range(n), keep):
        res, info = fitter.fit_residuals(subset)
        count += 1
        sel = np.argsort(res, kind="stable")[:keep]
        loss = float(res[sel].sum())
        if best is None or loss < best[0]:
            best = (loss, sel, info)
    loss, sel, info = best
    return fitter, info, sel, loss, [loss], count, cross


def fit_subspace_alternating(inp: AggregationInput, max_alternations: int = 50) -> SubspaceFit:
    """Alternate between nearest-neighbor selection and re-fitting until the
    selection set repeats. The trimmed loss trace is non-increasing."""
    fitter, info, sel, loss, trace, calls, _ = _fit_alternating_latent(inp, max_alternations)
    subspace = fitter.materialize(info)
    return SubspaceFit(subspace, _selection_mask(inp.num_clients, sel), loss, calls, trace)


def fit_subspace_exhaustive(inp: AggregationInput, subset_cap: int = EXHAUSTIVE_SUBSET_CAP) -> SubspaceFit:
    """Global minimizer of the trimmed reconstruction loss over all selections."""
    fitter, info, sel, loss, trace, calls, _ = _fit_exhaustive_latent(inp, subset_cap)
    subspace = fitter.materialize(info)
    return SubspaceFit(subspace, _selection_mask(inp.num_clients, sel), loss, calls, trace)


# aggregate inputs at most this large get an explicit subspace in the
# diagnostics; beyond it, materialization would dominate the run time
MATERIALIZE_CAP = 2_000_000


def boba_aggregate(inp: AggregationInput, params: BobaParams, mode: str = "alternating") -> AggregationResult:
    """Two-stage aggregation: robust subspace fit, then per-client simplex
    coordinates with thresholded acceptance and an n-f fallback.

    The whole pipeline runs in Gram coordinates; diagnostics carry an explicit
    subspace only for small inputs (see MATERIALIZE_CAP).
    """
    if mode == "alternating":
        fitter, info, sel, loss, trace, calls, cross = _fit_alternating_latent(
            inp, params.max_alternations)
    elif mode == "exhaustive":
        fitter, info, sel, loss, trace, calls, cross = _fit_exhaustive_latent(
            inp, EXHAUSTIVE_SUBSET_CAP)
    else:
        raise InvalidInputError(f"unknown mode {mode!r}")

    n, f = inp.num_clients, params.byzantine_tolerance
    encoded = fitter.client_coords(info)
    encoded_vertices = fitter.vertex_coords(info, cross)
    p_hat = linalg.solve_affine_coordinates(encoded_vertices, encoded)
    min_p = p_hat.min(axis=0)
    accepted = min_p >= params.p_min
    fallback = False
    if int(accepted.sum()) < n - f:
        fallback = True
        order = np.argsort(-min_p, kind="stable")[: n - f]
        accepted = _selection_mask(n, order)
    agg_latent = encoded[:, accepted].mean(axis=1)
    aggregate = fitter.combine(info, agg_latent)
    diagnostics = {
        "trimmed_loss": loss,
        "trsvd_calls": calls,
        "loss_trace": trace,
        "stage1_selection": _selection_mask(n, sel),
        "p_hat": p_hat,
        "min_p": min_p,
        "fallback": fallback,
        "subspace": fitter.materialize(info) if inp.gradients.size <= MATERIALIZE_CAP else None,
    }
    return AggregationResult(aggregate, accepted, diagnostics)


# --- baseline rules ---------------------------------------------------------


def average(gradients) -> np.ndarray:
    g = np.asarray(gradients, dtype=np.float64)
    return g.mean(axis=1)


def coordinate_median(gradients) -> np.ndarray:
    g = np.asarray(gradients, dtype=np.float64)
    return np.median(g, axis=1)


def trimmed_mean(gradients, f: int) -> np.ndarray:
    g = np.asarray(gradients, dtype=np.float64)
    n = g.shape[1]
    if n <= 2 * f:
        raise InvalidInputError("trimmed mean needs n > 2f")
    if f == 0:
        return g.mean(axis=1)
    s = np.sort(g, axis=1)
    return s[:, f : n - f].mean(axis=1)


def pairwise_sq_distances(gradients) -> np.ndarray:
    g = np.asarray(gradients, dtype=np.float64)
    sq = np.einsum("ij,ij->j", g, g)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (g.T @ g)
    return np.clip(d2, 0.0, None)


def krum(gradients, f: int, multi: int = 1) -> AggregationResult:
    """Score each gradient by summed squared distance to its n-f-2 nearest
    peers; return the best one (multi=1) or the mean of the multi best."""
    g = np.asarray(gradients, dtype=np.float64)
    n = g.shape[1]
    k = n - f - 2
    if k < 1:
        raise InvalidInputError("need n - f - 2 >= 1")
    if not 1 <= multi <= n:
        raise InvalidInputError("multi must be in [1, n]")
    d2 = pairwise_sq_distances(g)
    np.fill_diagonal(d2, np.inf)
    part = np.sort(d2, axis=1)[:, :k]
    scores = part.sum(axis=1)
    order = np.argsort(scores, kind="stable")[:multi]
    accepted = _selection_mask(n, order)
    aggregate = g[:, order].mean(axis=1)
    return AggregationResult(aggregate, accepted, {"scores": scores})


def geometric_median(gradients, tol: float = 1e-8, max_iter: int = 1000) -> np.ndarray:
    """Weiszfeld iteration; coincident iterate/point terms are skipped."""
    g = np.asarray(gradients, dtype=np.float64)
    y = g.mean(axis=1)
    for _ in range(max_iter):
        dist = np.linalg.norm(g - y[:, None], axis=0)
        ok = dist > 1e-12
        if not np.any(ok):
            return y
        w = 1.0 / dist[ok]
        new = (g[:, ok] * w[None, :]).sum(axis=1) / w.sum()
        if np.linalg.norm(new - y) < tol:
            return new
        y = new
    return y


def fltrust(gradients, server_gradients) -> np.ndarray:
    """Reweigh clients by clipped cosine similarity to the mean server
    gradient, after rescaling each client to the server gradient's norm."""
    g = np.asarray(gradients, dtype=np.float64)
    s = np.asarray(server_gradients, dtype=np.float64)
    g_s = s.mean(axis=1)
    s_norm = np.linalg.norm(g_s)
    if s_norm == 0.0:
        raise InvalidInputError("server gradient has zero norm")
    norms = np.linalg.norm(g, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    cos = (g.T @ g_s) / (safe * s_norm)
    w = np.clip(np.where(norms > 0, cos, 0.0), 0.0, None)
    if w.sum() == 0.0:
        return g_s
    rescaled = g * (s_norm / safe)[None, :]
    rescaled[:, norms == 0] = 0.0
    return (rescaled * w[None, :]).sum(axis=1) / w.sum()


def loss_rejection(gradients, loss_fn, w, eta: float, f: int, variant: str = "self") -> AggregationResult:
    """Keep the n-f clients whose updates score best on held-out server data.

    loss_fn(params) evaluates the server-data loss at a parameter vector.
    variant "self" ranks clients by the loss of their own one-step model;
    variant "avg" ranks by how much including the client lowers the loss of
    the averaged one-step model (leave-one-out comparison).
    """
    g = np.asarray(gradients, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n = g.shape[1]
    if f >= n:
        raise InvalidInputError("need f < n")
    if variant == "self":
        scores = np.array([loss_fn(w - eta * g[:, i]) for i in range(n)])
        order = np.argsort(scores, kind="stable")[: n - f]
    elif variant == "avg":
        full = loss_fn(w - eta * g.mean(axis=1))
        reductions = np.empty(n)
        for i in range(n):
            rest = np.delete(g, i, axis=1)
            reductions[i] = loss_fn(w - eta * rest.mean(axis=1)) - full
        order = np.argsort(-reductions, kind="stable")[: n - f]
    else:
        raise InvalidInputError(f"unknown variant {variant!r}")
    accepted = _selection_mask(n, order)
    return AggregationResult(g[:, order].mean(axis=1), accepted, {"variant": variant})


def bucketing(gradients, s: int, inner, rng: np.random.Generator):
    """Average a seeded random partition of clients into buckets of size s,
    then hand the bucket means to the inner aggregator."""
    if s < 1:
        raise InvalidInputError("bucket size must be >= 1")
    g = np.asarray(gradients, dtype=np.float64)
    n = g.shape[1]
    perm = rng.permutation(n)
    buckets = np.array_split(perm, math.ceil(n / s))
    means = np.column_stack([g[:, b].mean(axis=1) for b in buckets])
    return inner(means)


# --- error bound and adversarial fixtures -----------------------------------


def compute_boba_error_bound(eps, eps_s, delta, delta_s, sigma, n, f, c, p_min, beta, honest_count) -> float:
    """Worst-case squared gradient estimation error guaranteed by the
    two-stage aggregator under the bounded-variation and singular-value
    conditions."""
    if n <= 2 * f:
        raise InvalidInputError("bound requires n > 2f")
    if sigma <= 0:
        raise InvalidInputError("bound requires sigma > 0")
    shared = 1.0 / (n - 2 * f) + delta**2 / sigma**2
    amp = (1.0 + c * abs(p_min)) ** 2
    c1 = 4.0 + 8.0 * shared * (2.0 * (n - f) + honest_count)
    c2 = 16.0 * shared * (n - f) + 16.0 * c * amp * beta**2
    c3 = 16.0 * amp
    return float(c1 * eps**2 + c2 * eps_s**2 + c3 * beta**2 * delta_s**2)


def make_lower_bound_instance(honest_count: int, byz_count: int, delta: float):
    """Paired 1-D gradient sets with identical values but swapped identities.

    Returns (values, honest_mask_1, honest_mask_2, expected_mean_1,
    expected_mean_2). Any aggregator sees the same input for both sets, so its
    worst error over the pair is at least (byz_count/n * delta)^2.
    """
    n = honest_count + byz_count
    if n % 2 != 0:
        raise InvalidInputError("total client count must be even")
    v = honest_count / n * delta
    values = np.where(np.arange(n) < n // 2, v, -v).reshape(1, n)
    honest_1 = np.arange(n) < honest_count
    honest_2 = np.arange(n) >= byz_count
    beta_delta = byz_count / n * delta
    return values, honest_1, honest_2, beta_delta, -beta_delta


def make_three_client_instance(delta: float, eps: float, rng: np.random.Generator | None = None, draws=None):
    """Two near-duplicate honest clients plus one distant honest client in 2-D,
    with symmetric two-point perturbations on the near pair. The honest mean
    expectation is exactly zero.

    Returns (gradients 2x3, expected_mean). draws overrides the two Bernoulli
    variables; otherwise they are sampled from rng.
    """
    if delta <= 2 * eps:
        raise InvalidInputError("need delta > 2 * eps")
    if draws is None:
        if rng is None:
            raise InvalidInputError("provide rng or explicit draws")
        z1, z2 = (int(rng.integers(0, 2)), int(rng.integers(0, 2)))
    else:
        z1, z2 = draws
    u = np.array([-1.0, 1.0]) / math.sqrt(2.0)
    v = np.array([1.0, 1.0]) / math.sqrt(2.0)
    g1 = delta / 2.0 * u + eps * (2 * z1 - 1) * v
    g2 = delta / 2.0 * u + eps * (2 * z2 - 1) * v
    g3 = -delta * u
    return np.column_stack([g1, g2, g3]), np.zeros(2)
