"""Latent-factor training phase: per-triple stochastic gradient descent.

The per-epoch inner loop is JIT-compiled (it touches every observed triple
sequentially and the dependency-coupling term makes each step O(nnz_row *
d)); the public per-triple ``sgd_step`` is the plain-numpy reference used
by the oracle tests.

Seed streams: factor init draws from (seed, 0), the shuffle of global
epoch e from (seed, 1, e). Split sampling uses (seed, 2) in the ingest
module. All randomness flows from these streams.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import DivergenceError, SymmetricSparse, latent_objective

log = logging.getLogger(__name__)

_INIT_STREAM = 0
_SHUFFLE_STREAM = 1


@dataclass(frozen=True)
class EpochSchedule:
    """Epoch count and learning-rate schedule for one latent phase."""

    epochs: int
    learn_rate: float
    shuffle: bool = True
    decay: float = 1.0  # geometric per-epoch factor; 1.0 keeps the rate constant

    def __post_init__(self):
        if self.learn_rate <= 0:
            raise ValueError("learn_rate must be > 0")
        if not (0 < self.decay <= 1.0):
            raise ValueError("decay must be in (0, 1]")

    def rate_at(self, global_epoch):
        return self.learn_rate * self.decay**global_epoch


def init_factors(num_users, num_items, dim, seed):
    """Gaussian factor matrices, mean 0, standard deviation 1/sqrt(dim).

    U and V are drawn from one seeded stream, users first.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, _INIT_STREAM)))
    scale = 1.0 / np.sqrt(dim)
    U = rng.normal(0.0, scale, size=(num_users, dim))
    V = rng.normal(0.0, scale, size=(num_items, dim))
    return U, V


def _shuffle_order(n, seed, global_epoch):
    rng = np.random.default_rng(np.random.SeedSequence((seed, _SHUFFLE_STREAM, global_epoch)))
    return rng.permutation(n)


@njit(cache=True, nogil=True)
def _epoch_kernel(order, users, items, values, U, V, indptr, indices, data,
                  lam_u, lam_v, alpha, lr):
    """One pass over the shuffled triples; returns the position (into
    ``order``) of the first non-finite update, or -1 on success.

    Both row updates read pre-update values: the prediction and each new
    coordinate are computed before anything is written back.
    """
    d = U.shape[1]
    for t in range(order.shape[0]):
        idx = order[t]
        i = users[idx]
        j = items[idx]
        pred = 0.0
        for f in range(d):
            pred += U[i, f] * V[j, f]
        delta = values[idx] - pred
        for f in range(d):
            g = 0.0
            for p in range(indptr[i], indptr[i + 1]):
                g += data[p] * U[indices[p], f]
            new_u = U[i, f] + lr * (delta * V[j, f] - lam_u * U[i, f] - alpha * g)
            new_v = V[j, f] + lr * (delta * U[i, f] - lam_v * V[j, f])
            if not (np.isfinite(new_u) and np.isfinite(new_v)):
                return t
            U[i, f] = new_u
            V[j, f] = new_v
    return -1


def _theta_csr_arrays(theta, num_users):
    if theta is None or not theta.rows.size:
        return (
            np.zeros(num_users + 1, dtype=np.int64),
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.float64),
        )
    csr = theta.csr()
    return (
        csr.indptr.astype(np.int64),
        csr.indices.astype(np.int64),
        csr.data.astype(np.float64),
    )


def sgd_step(triple, U, V, theta, params, learn_rate=None):
    """One per-triple update of (U_i, V_j), in place.

    U_i += lr * (delta*V_j - lambda_u*U_i - alpha*Theta_row_i.U)
    V_j += lr * (delta*U_i  - lambda_v*V_j)

    with delta the unclamped residual; both right-hand sides use the
    pre-update rows.
    """
    i, j, r = triple
    lr = params.learn_rate if learn_rate is None else learn_rate
    delta = r - float(np.dot(U[i], V[j]))
    if theta is None or not theta.rows.size:
        coupling = 0.0
    else:
        csr = theta.csr()
        lo, hi = csr.indptr[i], csr.indptr[i + 1]
        coupling = csr.data[lo:hi] @ U[csr.indices[lo:hi]]
    new_u = U[i] + lr * (delta * V[j] - params.lambda_u * U[i] - params.alpha * coupling)
    new_v = V[j] + lr * (delta * U[i] - params.lambda_v * V[j])
    if not (np.all(np.isfinite(new_u)) and np.all(np.isfinite(new_v))):
        raise DivergenceError(
            f"non-finite factor update at triple {triple}", phase="sgd", triple=triple
        )
    U[i] = new_u
    V[j] = new_v


def run_latent_phase(train, U, V, theta, params, schedule=None, *, epoch_offset=0):
    """Run ``schedule.epochs`` epochs of per-triple SGD over the train set.

    Each epoch visits every training triple exactly once in seeded-shuffled
    order (the permutation of global epoch ``epoch_offset + e`` depends
    only on (seed, epoch index)). Theta stays fixed throughout. Returns
    (U, V, trace) where trace[e] is the latent objective after epoch e;
    U and V are updated in place.
    """
    if schedule is None:
        schedule = EpochSchedule(params.sgd_epochs, params.learn_rate)
    n = len(train)
    indptr, indices, data = _theta_csr_arrays(theta, train.num_users)
    trace = []
    for e in range(schedule.epochs):
        global_epoch = epoch_offset + e
        if n:
            if schedule.shuffle:
                order = _shuffle_order(n, params.seed, global_epoch)
            else:
                order = np.arange(n)
            bad = _epoch_kernel(
                order, train.users, train.items, train.values, U, V,
                indptr, indices, data,
                params.lambda_u, params.lambda_v, params.alpha,
                schedule.rate_at(global_epoch),
            )
            if bad >= 0:
                idx = order[bad]
                triple = (int(train.users[idx]), int(train.items[idx]), float(train.values[idx]))
                raise DivergenceError(
                    f"non-finite factor update at triple {triple} in epoch {global_epoch}",
                    phase="sgd", iteration=global_epoch, triple=triple,
                )
        trace.append(latent_objective(train, U, V, theta, params))
    return U, V, trace


def pmf_train(train, params, schedule=None):
    """Factor-only training: the latent phase with the coupling term off.

    Equivalent to ``run_latent_phase`` with an empty dependency matrix.
    Returns (U, V, trace).
    """
    U, V = init_factors(train.num_users, train.num_items, params.d, params.seed)
    theta = SymmetricSparse(train.num_users)
    return run_latent_phase(train, U, V, theta, params, schedule)
