"""Prior user covariance built from rating behavior, and its low-rank factor.

The covariance between two users is estimated over the items they both
rated, with means taken over that common subset and population (1/|S|)
normalization. Pairs sharing fewer than ``min_overlap`` items get 0, which
keeps the matrix structurally sparse and avoids one-sample covariances.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import SymmetricSparse

log = logging.getLogger(__name__)

_DENSE_EIG_CUTOFF = 400  # below this, a full symmetric eigendecomposition is cheap


@dataclass(frozen=True)
class CovarianceSpec:
    """How to build the prior covariance.

    mode "explicit-masked" restricts off-diagonal entries to declared
    friend pairs; "implicit-dense" computes them for every pair with
    rating overlap; "none" disables the prior entirely.
    """

    mode: str = "implicit-dense"
    min_overlap: int = 2

    def __post_init__(self):
        if self.mode not in ("explicit-masked", "implicit-dense", "none"):
            raise ValueError(f"unknown covariance mode {self.mode!r}")
        if self.mode != "none" and self.min_overlap < 2:
            raise ValueError("min_overlap must be >= 2")


def row_covariance(items_i, values_i, items_k, values_k, min_overlap=2):
    """Covariance of two users' ratings over their co-rated items.

    Returns 0 when fewer than ``min_overlap`` items are shared. Means are
    taken over the shared subset only; normalization is population (1/|S|).
    """
    items_i = np.asarray(items_i)
    items_k = np.asarray(items_k)
    common, idx_i, idx_k = np.intersect1d(
        items_i, items_k, assume_unique=True, return_indices=True
    )
    if common.size < min_overlap:
        return 0.0
    vi = np.asarray(values_i, dtype=np.float64)[idx_i]
    vk = np.asarray(values_k, dtype=np.float64)[idx_k]
    return float(np.mean((vi - vi.mean()) * (vk - vk.mean())))


def _pair_covariances_vectorized(ratings, min_overlap):
    """All (i, k >= i) covariances with overlap >= min_overlap.

    Works row by row with sparse products: for user i, the overlap counts,
    co-rated rating products and per-pair rating sums against every other
    user come out of four sparse row-matrix multiplies, so no m x m dense
    intermediate is ever formed.
    """
    R = ratings.to_csr()
    W = R.copy()
    W.data = np.ones_like(W.data)
    Rt = R.T.tocsr()
    Wt = W.T.tocsr()

    rows, cols, vals = [], [], []
    m = ratings.num_users
    for i in range(m):
        ri = R.getrow(i)
        wi = W.getrow(i)
        counts = (wi @ Wt).toarray().ravel()
        prods = (ri @ Rt).toarray().ravel()
        sums_i = (ri @ Wt).toarray().ravel()  # sum of user i's ratings over S
        sums_k = (wi @ Rt).toarray().ravel()  # sum of user k's ratings over S
        ok = counts >= min_overlap
        ok[:i] = False  # keep k >= i only
        if not ok.any():
            continue
        k = np.nonzero(ok)[0]
        n = counts[k]
        cov = prods[k] / n - (sums_i[k] / n) * (sums_k[k] / n)
        keep = cov != 0.0
        rows.append(np.full(keep.sum(), i, dtype=np.int64))
        cols.append(k[keep])
        vals.append(cov[keep])
    if not rows:
        return (np.empty(0, dtype=np.int64),) * 2 + (np.empty(0),)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def build_sigma(ratings, social=None, spec=CovarianceSpec()):
    """Build the prior user covariance matrix.

    Explicit-masked mode computes covariances only for friend pairs (either
    direction) plus the diagonal; implicit-dense mode covers every pair
    with co-rating overlap. The diagonal is always the user's own rating
    variance. The result is exactly symmetric.
    """
    if not len(ratings):
        raise ValueError("cannot build a covariance from an empty rating set")
    if spec.mode == "none":
        raise ValueError("covariance mode 'none' has nothing to build")
    m = ratings.num_users

    if spec.mode == "explicit-masked":
        if social is None:
            raise ValueError("explicit-masked mode requires social edges")
        rows, cols, vals = [], [], []
        pairs = {(min(a, b), max(a, b)) for a, b in map(tuple, social.edges)}
        for i, k in sorted(pairs):
            cov = row_covariance(
                *ratings.user_row(i), *ratings.user_row(k), spec.min_overlap
            )
            if cov != 0.0:
                rows.append(i)
                cols.append(k)
                vals.append(cov)
        # diagonal: the user's own rating variance under the same estimator
        for i in range(m):
            items, values = ratings.user_row(i)
            var = row_covariance(items, values, items, values, spec.min_overlap)
            if var != 0.0:
                rows.append(i)
                cols.append(i)
                vals.append(var)
        rows = np.array(rows, dtype=np.int64)
        cols = np.array(cols, dtype=np.int64)
        vals = np.array(vals, dtype=np.float64)
    else:
        # the vectorized pass covers k >= i, diagonal included
        rows, cols, vals = _pair_covariances_vectorized(ratings, spec.min_overlap)

    sigma = SymmetricSparse(m, rows, cols, vals)
    if np.any(sigma.diagonal() < 0):
        raise AssertionError("variance on the diagonal must be nonnegative")
    return sigma


def low_rank_factor(sigma, d):
    """Rank-d factor X with XX^T the best PSD rank-d approximation of sigma.

    Symmetric eigendecomposition; the d largest eigenvalues are kept,
    negatives clamped to 0, and columns ordered by descending eigenvalue.
    Each eigenvector's first nonzero entry is made positive so the result
    is deterministic.
    """
    m = sigma.size
    if d > m:
        raise ValueError(f"rank d={d} exceeds matrix size m={m}")
    if m <= _DENSE_EIG_CUTOFF or d >= m - 1:
        eigvals, eigvecs = np.linalg.eigh(sigma.to_dense())
        eigvals, eigvecs = eigvals[::-1], eigvecs[:, ::-1]
    else:
        # deterministic Lanczos: fixed start vector
        v0 = np.full(m, 1.0 / np.sqrt(m))
        eigvals, eigvecs = spla.eigsh(sigma.csr().astype(np.float64), k=d, which="LA", v0=v0)
        order = np.argsort(eigvals)[::-1]
        eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    eigvals = np.clip(eigvals[:d], 0.0, None)
    eigvecs = eigvecs[:, :d].copy()
    for col in range(eigvecs.shape[1]):
        nz = np.nonzero(eigvecs[:, col])[0]
        if nz.size and eigvecs[nz[0], col] < 0:
            eigvecs[:, col] = -eigvecs[:, col]
    return eigvecs * np.sqrt(eigvals)
