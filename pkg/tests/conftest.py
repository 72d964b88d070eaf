import numpy as np
import pytest

from prmf.core import SparseRatings, SymmetricSparse


def random_ratings(rng, m, n, density=0.5, lo=1.0, hi=5.0):
    """Random observed triples over an m x n index space."""
    mask = rng.random((m, n)) < density
    if not mask.any():
        mask[0, 0] = True
    users, items = np.nonzero(mask)
    values = rng.uniform(lo, hi, size=users.size)
    return SparseRatings(m, n, users, items, values)


def random_symmetric_sparse(rng, m, density=0.4, scale=1.0):
    """Random symmetric sparse matrix in canonical storage."""
    r, c = np.triu_indices(m)
    keep = rng.random(r.size) < density
    vals = rng.normal(0, scale, size=r.size) * keep
    return SymmetricSparse(m, r, c, vals)


def random_shifted_pd_sparse(rng, m, shift, density=0.4, scale=0.3, margin=0.2):
    """Random symmetric sparse matrix whose shift by ``shift * I`` is PD."""
    base = random_symmetric_sparse(rng, m, density, scale)
    dense = base.to_dense()
    lift = max(0.0, margin - float(np.linalg.eigvalsh(dense).min()) - shift)
    idx = np.arange(m)
    dense[idx, idx] += lift
    return SymmetricSparse.from_dense(dense)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
