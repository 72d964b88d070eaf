"""Core numeric types and objective/prediction functions.

Everything here is a pure function over immutable inputs (the matrix
classes never mutate after construction), so concurrent read-only use is
safe.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
import scipy.sparse as sp


class DivergenceError(ArithmeticError):
    """Raised when an update produces non-finite values.

    Carries enough context (phase, iteration, offending triple) for a
    post-mortem.
    """

    def __init__(self, message, *, phase=None, iteration=None, triple=None):
        super().__init__(message)
        self.phase = phase
        self.iteration = iteration
        self.triple = triple


class NotPositiveDefiniteError(ArithmeticError):
    """Log-determinant requested for a matrix that is not positive definite.

    This is diagnostic information (the learned dependency matrix is only
    positive definite with high probability), so it is reported rather than
    silently patched.
    """


class ParseError(ValueError):
    """Malformed input line; carries the 1-based line number."""

    def __init__(self, message, line_number):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass(frozen=True)
class HyperParams:
    """All scalar knobs of the model and its optimizer.

    ``alpha`` weighs the user-dependency bracket, ``beta`` the prior
    covariance, ``gamma`` the l1 sparsity penalty. ``sgd_epochs`` and
    ``admm_iters`` are the per-outer-iteration phase lengths; ``max_iter``
    counts outer alternations.
    """

    d: int = 10
    lambda_u: float = 0.05
    lambda_v: float = 0.05
    alpha: float = 0.0625
    beta: float = 0.0
    gamma: float = 1e-4
    learn_rate: float = 0.03125
    rho: float = 100.0
    sgd_epochs: int = 30
    admm_iters: int = 30
    max_iter: int = 10
    seed: int = 0
    rating_min: float = 1.0
    rating_max: float = 5.0

    def __post_init__(self):
        for name in ("lambda_u", "lambda_v", "alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.learn_rate <= 0:
            raise ValueError(f"learn_rate must be > 0, got {self.learn_rate}")
        if self.rho <= 0:
            raise ValueError(f"rho must be > 0, got {self.rho}")
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        for name in ("sgd_epochs", "admm_iters", "max_iter"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.rating_min < self.rating_max:
            raise ValueError("rating_min must be < rating_max")

    @property
    def bounds(self):
        return (self.rating_min, self.rating_max)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


class SparseRatings:
    """Observed user-item-rating triples with a per-user row view.

    The triple arrays keep their construction order; the row view is a
    CSR-style index over the same data for fast per-user access.
    """

    def __init__(self, num_users, num_items, users, items, values):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if not (users.shape == items.shape == values.shape) or users.ndim != 1:
            raise ValueError("users, items and values must be equal-length 1-d arrays")
        if users.size:
            if users.min() < 0 or users.max() >= num_users:
                raise ValueError("user index out of range")
            if items.min() < 0 or items.max() >= num_items:
                raise ValueError("item index out of range")
            key = users * num_items + items
            if np.unique(key).size != key.size:
                raise ValueError("duplicate (user, item) pair")
        if not np.all(np.isfinite(values)):
            raise ValueError("non-finite rating value")
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        self.users = users
        self.items = items
        self.values = values
        # row view: triples sorted by (user, item), user_ptr[i]:user_ptr[i+1]
        order = np.lexsort((items, users))
        self._row_items = items[order]
        self._row_values = values[order]
        self._user_ptr = np.zeros(num_users + 1, dtype=np.int64)
        np.add.at(self._user_ptr, users + 1, 1)
        np.cumsum(self._user_ptr, out=self._user_ptr)

    def __len__(self):
        return self.users.size

    def user_row(self, i):
        """(items, values) rated by user ``i``, sorted by item index."""
        lo, hi = self._user_ptr[i], self._user_ptr[i + 1]
        return self._row_items[lo:hi], self._row_values[lo:hi]

    def user_counts(self):
        return np.diff(self._user_ptr)

    def item_counts(self):
        counts = np.zeros(self.num_items, dtype=np.int64)
        np.add.at(counts, self.items, 1)
        return counts

    def global_mean(self):
        if not len(self):
            raise ValueError("no ratings")
        return float(self.values.mean())

    def to_csr(self):
        return sp.csr_matrix(
            (self.values, (self.users, self.items)),
            shape=(self.num_users, self.num_items),
        )

    def check_consistency(self):
        """Row view and triple list must contain identical data."""
        order = np.lexsort((self.items, self.users))
        assert np.array_equal(self.items[order], self._row_items)
        assert np.array_equal(self.values[order], self._row_values)
        assert self._user_ptr[-1] == len(self)


class SymmetricSparse:
    """Symmetric m x m sparse matrix in canonical (i <= k) triple storage.

    Symmetry holds by construction: only the upper triangle is stored and
    both (i, k) and (k, i) read the same entry. Exact zeros are dropped.
    Instances are immutable; the expanded CSR view (the per-row adjacency
    used for row-times-matrix products) is built lazily and cached.

    Used both for the learned user-dependency precision matrix and for the
    prior user covariance.
    """

    def __init__(self, size, rows=None, cols=None, vals=None):
        self.size = int(size)
        if rows is None:
            rows = np.empty(0, dtype=np.int64)
            cols = np.empty(0, dtype=np.int64)
            vals = np.empty(0, dtype=np.float64)
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if not (rows.shape == cols.shape == vals.shape) or rows.ndim != 1:
            raise ValueError("rows, cols and vals must be equal-length 1-d arrays")
        if rows.size:
            if min(rows.min(), cols.min()) < 0 or max(rows.max(), cols.max()) >= size:
                raise ValueError("index out of range")
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite entry")
        # canonicalize to i <= k, drop exact zeros, sort
        swap = rows > cols
        r = np.where(swap, cols, rows)
        c = np.where(swap, rows, cols)
        keep = vals != 0.0
        r, c, v = r[keep], c[keep], vals[keep]
        order = np.lexsort((c, r))
        r, c, v = r[order], c[order], v[order]
        if r.size:
            key = r * size + c
            if np.unique(key).size != key.size:
                raise ValueError("duplicate entry for the same (i, k) pair")
        self.rows = r
        self.cols = c
        self.vals = v
        self._csr = None

    @classmethod
    def identity(cls, size):
        idx = np.arange(size)
        return cls(size, idx, idx, np.ones(size))

    @classmethod
    def from_dense(cls, a, *, require_symmetric=True):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("square matrix required")
        if require_symmetric and not np.array_equal(a, a.T):
            raise ValueError("matrix is not exactly symmetric")
        r, c = np.triu_indices(a.shape[0])
        v = a[r, c]
        return cls(a.shape[0], r, c, v)

    @property
    def entry_count(self):
        """Stored nonzeros expanded over the full matrix."""
        off_diag = int(np.count_nonzero(self.rows != self.cols))
        return 2 * off_diag + (self.rows.size - off_diag)

    def sparsity(self):
        """Fraction of zero entries among all m*m positions (diagonal included)."""
        if self.size == 0:
            return 1.0
        return 1.0 - self.entry_count / (self.size * self.size)

    def l1_norm(self):
        """Entrywise l1 norm of the full symmetric matrix."""
        off = self.rows != self.cols
        return float(2.0 * np.abs(self.vals[off]).sum() + np.abs(self.vals[~off]).sum())

    def csr(self):
        """Full symmetric CSR view (per-row adjacency for fast row products)."""
        if self._csr is None:
            off = self.rows != self.cols
            r = np.concatenate([self.rows, self.cols[off]])
            c = np.concatenate([self.cols, self.rows[off]])
            v = np.concatenate([self.vals, self.vals[off]])
            self._csr = sp.csr_matrix((v, (r, c)), shape=(self.size, self.size))
        return self._csr

    def to_dense(self):
        return self.csr().toarray()

    def dot(self, dense):
        """Matrix product (full symmetric matrix) @ dense."""
        if not self.rows.size:
            return np.zeros((self.size,) + dense.shape[1:])
        return self.csr() @ dense

    def diagonal(self):
        diag = np.zeros(self.size)
        on = self.rows == self.cols
        diag[self.rows[on]] = self.vals[on]
        return diag


def predict(user_vec, item_vec, bounds=None):
    """Predicted rating: inner product, optionally clamped into ``bounds``.

    Training residuals use the unclamped value (``bounds=None``); reported
    predictions clamp to the dataset's rating range.
    """
    user_vec = np.asarray(user_vec, dtype=np.float64)
    item_vec = np.asarray(item_vec, dtype=np.float64)
    if user_vec.shape != item_vec.shape:
        raise ValueError(
            f"factor dimension mismatch: {user_vec.shape} vs {item_vec.shape}"
        )
    raw = float(np.dot(user_vec, item_vec))
    if bounds is None:
        return raw
    lo, hi = bounds
    if not lo < hi:
        raise ValueError("invalid clamp bounds")
    return min(max(raw, lo), hi)


def _check_factors(ratings, U, V):
    if U.ndim != 2 or V.ndim != 2 or U.shape[1] != V.shape[1]:
        raise ValueError("factor matrices must be 2-d with a shared latent dim")
    if U.shape[0] != ratings.num_users or V.shape[0] != ratings.num_items:
        raise ValueError("factor matrix rows do not match the rating index space")


def squared_residual_sum(ratings, U, V):
    """Sum of squared residuals over the observed triples only."""
    if not len(ratings):
        return 0.0
    preds = np.einsum("ij,ij->i", U[ratings.users], V[ratings.items])
    return float(np.square(ratings.values - preds).sum())


def pmf_objective(ratings, U, V, lambda_u, lambda_v):
    """Data-fit plus Frobenius regularizers, summed over observed triples.

    0.5 * sum_D (R_ij - U_i.V_j)^2 + (lambda_u/2)||U||_F^2 + (lambda_v/2)||V||_F^2
    """
    _check_factors(ratings, U, V)
    return (
        0.5 * squared_residual_sum(ratings, U, V)
        + 0.5 * lambda_u * float(np.square(U).sum())
        + 0.5 * lambda_v * float(np.square(V).sum())
    )


def coupling_trace(U, theta):
    """tr(U^T Theta U) for a symmetric sparse ``theta``."""
    if theta is None or not theta.rows.size:
        return 0.0
    return float(np.einsum("ij,ij->", theta.dot(U), U))


def latent_objective(ratings, U, V, theta, params):
    """Objective of the latent-factor phase: data fit, regularizers and the
    user-dependency coupling term (alpha/2) tr(U^T Theta U)."""
    return pmf_objective(
        ratings, U, V, params.lambda_u, params.lambda_v
    ) + 0.5 * params.alpha * coupling_trace(U, theta)


def logdet_shifted(theta, shift):
    """log|Theta + shift*I| via Cholesky; raises if the shifted matrix is
    not positive definite."""
    a = theta.to_dense()
    idx = np.arange(theta.size)
    a[idx, idx] += shift
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            f"Theta + {shift:g}*I is not positive definite: {exc}"
        ) from exc
    return float(2.0 * np.log(np.diagonal(chol)).sum())


def dependency_penalty(U, theta, sigma, params):
    """The bracketed user-dependency term of the full objective:

    tr(Theta (UU^T + beta*Sigma)) - (d+beta) log|Theta + (lambda_u/alpha) I|
    + gamma ||Theta||_1
    """
    if params.alpha == 0:
        raise ValueError("dependency penalty undefined for alpha == 0")
    trace = coupling_trace(U, theta)
    if params.beta > 0:
        if sigma is None:
            raise ValueError("beta > 0 requires a prior covariance")
        trace += params.beta * float(theta.csr().multiply(sigma.csr()).sum())
    logdet = logdet_shifted(theta, params.lambda_u / params.alpha)
    return trace - (params.d + params.beta) * logdet + params.gamma * theta.l1_norm()


def prmf_objective(ratings, U, V, theta, sigma, params):
    """Full training objective: data fit, factor regularizers and the
    weighted user-dependency bracket."""
    return pmf_objective(
        ratings, U, V, params.lambda_u, params.lambda_v
    ) + 0.5 * params.alpha * dependency_penalty(U, theta, sigma, params)
