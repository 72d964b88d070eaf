"""Dataset parsing, filtering and reproducible train/validation/test splits."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import ParseError, SparseRatings

log = logging.getLogger(__name__)

FORMAT_SEPARATORS = {"tsv": "\t", "double-colon": "::"}


@dataclass(frozen=True)
class RawRecord:
    user: str
    item: str
    rating: float
    timestamp: int | None = None


class IdMap:
    """Bijective map between external ids and dense internal indices."""

    def __init__(self, external_ids):
        self.to_index = {}
        self.from_index = []
        for ext in external_ids:
            if ext not in self.to_index:
                self.to_index[ext] = len(self.from_index)
                self.from_index.append(ext)

    def __len__(self):
        return len(self.from_index)

    def index(self, external_id):
        return self.to_index[external_id]

    def external(self, index):
        return self.from_index[index]


@dataclass
class SocialEdges:
    """Directed trust/friendship pairs between known users (indices)."""

    edges: np.ndarray  # (k, 2) int array
    dropped_unknown: int = 0
    dropped_self: int = 0

    def __len__(self):
        return self.edges.shape[0]


def _iter_lines(source):
    if hasattr(source, "read"):
        data = source.read()
        if isinstance(data, bytes):
            data = data.decode("utf-8")
        yield from data.splitlines()
    else:
        with open(source, "r", encoding="utf-8") as fh:
            for line in fh:
                yield line.rstrip("\n").rstrip("\r")


def parse_ratings(source, fmt):
    """Parse rating lines into RawRecords, preserving file order.

    ``fmt`` selects the field separator: "tsv" for tab-separated
    user/item/rating[/timestamp], "double-colon" for the "::"-separated
    variant. The format is declared, never sniffed.
    """
    if fmt not in FORMAT_SEPARATORS:
        raise ValueError(f"unknown ratings format {fmt!r}")
    sep = FORMAT_SEPARATORS[fmt]
    records = []
    for lineno, line in enumerate(_iter_lines(source), start=1):
        if not line.strip():
            continue
        parts = line.split(sep)
        if len(parts) < 3:
            raise ParseError(f"expected at least 3 fields, got {len(parts)}", lineno)
        try:
            rating = float(parts[2])
        except ValueError:
            raise ParseError(f"bad rating value {parts[2]!r}", lineno) from None
        timestamp = None
        if len(parts) >= 4 and parts[3].strip():
            try:
                timestamp = int(parts[3])
            except ValueError:
                raise ParseError(f"bad timestamp {parts[3]!r}", lineno) from None
        records.append(RawRecord(parts[0].strip(), parts[1].strip(), rating, timestamp))
    return records


def filter_min_item_ratings(records, min_count):
    """Keep records whose item has at least ``min_count`` ratings.

    Applied once to the input as a whole, not iterated to a fixpoint.
    """
    if min_count < 0:
        raise ValueError("min_count must be >= 0")
    if min_count <= 1:
        return list(records)
    counts = {}
    for rec in records:
        counts[rec.item] = counts.get(rec.item, 0) + 1
    return [rec for rec in records if counts[rec.item] >= min_count]


@dataclass
class Splits:
    train: SparseRatings
    validation: SparseRatings
    test: SparseRatings
    user_map: IdMap
    item_map: IdMap


def split(records, train_fraction, validation_fraction, seed):
    """Disjoint uniform-random train/validation/test partition.

    Sizes use floor arithmetic with the remainder going to train:
    ``test = N - floor(train_fraction*N)`` and the validation set is
    ``floor(validation_fraction * pool)`` records drawn from the training
    pool. Id maps are built from the full record set so every user/item is
    indexable regardless of which side it lands on.
    """
    records = list(records)
    if not records:
        raise ValueError("cannot split an empty record set")
    if not (0 < train_fraction < 1):
        raise ValueError("train_fraction must be in (0, 1)")
    if not (0 <= validation_fraction < 1):
        raise ValueError("validation_fraction must be in [0, 1)")

    user_map = IdMap(rec.user for rec in records)
    item_map = IdMap(rec.item for rec in records)
    users = np.array([user_map.index(rec.user) for rec in records], dtype=np.int64)
    items = np.array([item_map.index(rec.item) for rec in records], dtype=np.int64)
    values = np.array([rec.rating for rec in records], dtype=np.float64)

    n = len(records)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))
    perm = rng.permutation(n)
    n_pool = int(np.floor(train_fraction * n))
    pool, test_idx = perm[:n_pool], perm[n_pool:]
    n_val = int(np.floor(validation_fraction * n_pool))
    val_idx, train_idx = pool[:n_val], pool[n_val:]

    def build(idx):
        return SparseRatings(
            len(user_map), len(item_map), users[idx], items[idx], values[idx]
        )

    return Splits(build(train_idx), build(val_idx), build(test_idx), user_map, item_map)


def parse_social(source, user_map):
    """Parse whitespace-separated user-user lines into index pairs.

    Edges naming users absent from ``user_map`` are dropped (counted),
    as are self-loops.
    """
    edges = []
    dropped_unknown = 0
    dropped_self = 0
    for lineno, line in enumerate(_iter_lines(source), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) < 2:
            raise ParseError(f"expected 2 user ids, got {len(parts)}", lineno)
        a, b = parts[0], parts[1]
        if a not in user_map.to_index or b not in user_map.to_index:
            dropped_unknown += 1
            continue
        ia, ib = user_map.index(a), user_map.index(b)
        if ia == ib:
            dropped_self += 1
            continue
        edges.append((ia, ib))
    if dropped_unknown:
        log.warning("dropped %d social edges referencing unknown users", dropped_unknown)
    arr = np.array(edges, dtype=np.int64).reshape(-1, 2)
    return SocialEdges(arr, dropped_unknown, dropped_self)
