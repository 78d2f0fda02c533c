"""Dense kernels for affine subspace fitting and simplex coordinate recovery.

All matrices are float64 numpy arrays with data points stored as columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "AffineSubspace",
    "InvalidInputError",
    "InvalidRankError",
    "DegenerateSimplexError",
    "truncated_svd",
    "project",
    "encode",
    "decode",
    "solve_affine_coordinates",
    "kth_singular_value",
]

# Reciprocal condition number below this means the stacked vertex system is
# numerically singular, i.e. the server gradients do not span a full simplex.
RCOND_CAP = 1e-10


class InvalidInputError(ValueError):
    """Non-finite entries or mismatched dimensions."""


class InvalidRankError(ValueError):
    """Requested truncation rank is out of range."""


class DegenerateSimplexError(np.linalg.LinAlgError):
    """Encoded vertex system is singular or ill-conditioned."""


@dataclass(frozen=True)
class AffineSubspace:
    """Affine subspace {basis @ lam + mean : lam in R^k}.

    basis is d x k with orthonormal columns, mean has length d.
    """

    basis: np.ndarray
    mean: np.ndarray

    def __post_init__(self):
        basis = np.asarray(self.basis, dtype=np.float64)
        mean = np.asarray(self.mean, dtype=np.float64)
        if basis.ndim != 2 or mean.ndim != 1 or basis.shape[0] != mean.shape[0]:
            raise InvalidInputError("basis must be d x k and mean length d")
        if basis.shape[1] > basis.shape[0]:
            raise InvalidRankError("subspace dimension exceeds ambient dimension")
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "mean", mean)

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def dim(self) -> int:
        return self.basis.shape[1]


def _as_matrix(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise InvalidInputError("expected a 2-D array of column-stacked points")
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("input contains non-finite entries")
    return pts


def _complete_orthonormal(U: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Fill columns of U flagged bad with a deterministic orthonormal completion."""
    d, k = U.shape
    filled = U[:, good]
    out = U.copy()
    for j in np.flatnonzero(~good):
        for axis in range(d):
            cand = np.zeros(d)
            cand[axis] = 1.0
            if filled.shape[1]:
                cand -= filled @ (filled.T @ cand)
            norm = np.linalg.norm(cand)
            if norm > 0.5:
                cand /= norm
                out[:, j] = cand
                filled = np.column_stack([filled, cand])
                break
        else:  # pragma: no cover - cannot happen while k <= d
            raise InvalidRankError("failed to complete orthonormal basis")
    return out


def _fix_signs(U: np.ndarray, V: np.ndarray | None = None):
    """Make the largest-magnitude entry of each basis column positive."""
    for j in range(U.shape[1]):
        i = int(np.argmax(np.abs(U[:, j])))
        if U[i, j] < 0:
            U[:, j] = -U[:, j]
            if V is not None:
                V[:, j] = -V[:, j]
    return U, V


def _orthonormalize(U: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Re-orthonormalize the well-determined columns, keep column order."""
    if not np.any(good):
        return U
    q, _ = np.linalg.qr(U[:, good])
    out = U.copy()
    out[:, good] = q
    return out


def truncated_svd(points, rank: int):
    """Best rank-`rank` affine fit of column-stacked points.

    Returns (subspace, singular_values, right_vectors) where right_vectors is
    n x rank. Singular values are non-negative and non-increasing. The basis
    carries a deterministic sign convention (largest-magnitude entry positive)
    so repeated runs are reproducible.
    """
    pts = _as_matrix(points)
    d, n = pts.shape
    if not (1 <= rank <= min(d, n)):
        raise InvalidRankError(f"rank {rank} not in [1, {min(d, n)}]")
    mean = pts.mean(axis=1)
    centered = pts - mean[:, None]

    if n <= d:
        gram = centered.T @ centered
        evals, evecs = np.linalg.eigh(gram)
        order = np.argsort(-evals, kind="stable")[:rank]
        lam = np.clip(evals[order], 0.0, None)
        V = evecs[:, order]
        sigma = np.sqrt(lam)
        tol = max(sigma[0] if rank else 0.0, 0.0) * 1e-9 + 1e-300
        good = sigma > tol
        U = np.zeros((d, rank))
        U[:, good] = (centered @ V[:, good]) / sigma[good]
        U = _orthonormalize(U, good)
        U = _complete_orthonormal(U, good)
    else:
        cov = centered @ centered.T
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(-evals, kind="stable")[:rank]
        lam = np.clip(evals[order], 0.0, None)
        U = evecs[:, order].copy()
        sigma = np.sqrt(lam)
        tol = max(sigma[0] if rank else 0.0, 0.0) * 1e-9 + 1e-300
        good = sigma > tol
        V = np.zeros((n, rank))
        V[:, good] = (centered.T @ U[:, good]) / sigma[good]
        V = _orthonormalize(V, good)
        V = _complete_orthonormal(V, good)

    U, V = _fix_signs(U, V)
    return AffineSubspace(U, mean), sigma, V


def project(subspace: AffineSubspace, g):
    """Orthogonal projection onto the affine subspace.

    Accepts a single vector (length d) or a d x m matrix of columns.
    """
    arr = np.asarray(g, dtype=np.float64)
    single = arr.ndim == 1
    cols = arr[:, None] if single else arr
    if cols.shape[0] != subspace.ambient_dim:
        raise InvalidInputError("dimension mismatch")
    U, m = subspace.basis, subspace.mean
    centered = cols - m[:, None]
    proj = U @ (U.T @ centered) + m[:, None]
    return proj[:, 0] if single else proj


def encode(subspace: AffineSubspace, g):
    """Latent coordinates U^T (g - mean); columns for matrix input."""
    arr = np.asarray(g, dtype=np.float64)
    single = arr.ndim == 1
    cols = arr[:, None] if single else arr
    if cols.shape[0] != subspace.ambient_dim:
        raise InvalidInputError("dimension mismatch")
    out = subspace.basis.T @ (cols - subspace.mean[:, None])
    return out[:, 0] if single else out


def decode(subspace: AffineSubspace, lam):
    """Map latent coordinates back to the ambient space."""
    arr = np.asarray(lam, dtype=np.float64)
    single = arr.ndim == 1
    cols = arr[:, None] if single else arr
    if cols.shape[0] != subspace.dim:
        raise InvalidInputError("dimension mismatch")
    out = subspace.basis @ cols + subspace.mean[:, None]
    return out[:, 0] if single else out


def solve_affine_coordinates(encoded_vertices, encoded_g, rcond_cap: float = RCOND_CAP):
    """Solve for the affine (sum-to-one) coordinates of encoded_g.

    encoded_vertices is (c-1) x c; the stacked system appends the all-ones row
    so the solution satisfies both the vertex combination and sum-to-one
    constraints. encoded_g may be a single vector or a (c-1) x m matrix.
    """
    verts = _as_matrix(encoded_vertices)
    km1, c = verts.shape
    if km1 + 1 != c:
        raise InvalidInputError("expected (c-1) x c vertex matrix")
    arr = np.asarray(encoded_g, dtype=np.float64)
    single = arr.ndim == 1
    cols = arr[:, None] if single else arr
    if cols.shape[0] != km1:
        raise InvalidInputError("dimension mismatch")
    system = np.vstack([verts, np.ones((1, c))])
    sing = np.linalg.svd(system, compute_uv=False)
    if sing[-1] <= rcond_cap * sing[0]:
        raise DegenerateSimplexError(
            "encoded vertex system is ill-conditioned; server simplex degenerate"
        )
    rhs = np.vstack([cols, np.ones((1, cols.shape[1]))])
    sol = np.linalg.solve(system, rhs)
    return sol[:, 0] if single else sol


def kth_singular_value(points, k: int) -> float:
    """k-th largest singular value of the column-centered point matrix."""
    pts = _as_matrix(points)
    if not (1 <= k <= min(pts.shape)):
        raise InvalidRankError(f"k {k} not in [1, {min(pts.shape)}]")
    centered = pts - pts.mean(axis=1, keepdims=True)
    sing = np.linalg.svd(centered, compute_uv=False)
    return float(sing[k - 1])
