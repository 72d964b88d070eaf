import io
from collections import Counter

import numpy as np
import pytest

from prmf.core import ParseError
from prmf.ingest import (
    IdMap,
    RawRecord,
    filter_min_item_ratings,
    parse_ratings,
    parse_social,
    split,
)


class TestParseRatings:
    def test_tab_format(self):
        records = parse_ratings(io.StringIO("196\t242\t3\t881250949"), "tsv")
        assert records == [RawRecord("196", "242", 3.0, 881250949)]

    def test_double_colon_format(self):
        records = parse_ratings(io.StringIO("1::1193::5::978300760"), "double-colon")
        assert records == [RawRecord("1", "1193", 5.0, 978300760)]

    def test_missing_fields(self):
        with pytest.raises(ParseError) as err:
            parse_ratings(io.StringIO("196\t242"), "tsv")
        assert err.value.line_number == 1

    def test_error_reports_later_line(self):
        with pytest.raises(ParseError) as err:
            parse_ratings(io.StringIO("1\t2\t3\n1\t2\tbad"), "tsv")
        assert err.value.line_number == 2

    def test_empty_input(self):
        assert parse_ratings(io.StringIO(""), "tsv") == []

    def test_no_timestamp(self):
        records = parse_ratings(io.StringIO("1\t2\t4.5"), "tsv")
        assert records == [RawRecord("1", "2", 4.5, None)]

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            parse_ratings(io.StringIO(""), "csv")

    def test_preserves_file_order(self):
        text = "3\t1\t5\n1\t1\t4\n2\t1\t3"
        records = parse_ratings(io.StringIO(text), "tsv")
        assert [r.user for r in records] == ["3", "1", "2"]


def _records(pairs):
    return [RawRecord(str(u), str(i), 3.0) for u, i in pairs]


class TestFilterMinItemRatings:
    def test_threshold(self):
        records = _records([(1, "a"), (2, "a"), (3, "a"), (1, "b"), (2, "b")])
        kept = filter_min_item_ratings(records, 3)
        assert {r.item for r in kept} == {"a"}
        assert len(kept) == 3

    def test_zero_is_identity(self):
        records = _records([(1, "a"), (2, "b")])
        assert filter_min_item_ratings(records, 0) == records

    def test_one_is_identity(self):
        records = _records([(1, "a"), (2, "b")])
        assert filter_min_item_ratings(records, 1) == records

    def test_applied_once_not_to_fixpoint(self):
        # dropping b's records leaves a with 2 ratings, below the threshold;
        # a single pass keeps it anyway
        records = _records([(1, "a"), (2, "a"), (1, "b"), (3, "a")])
        kept = filter_min_item_ratings(records, 3)
        assert {r.item for r in kept} == {"a"}


class TestSplit:
    def test_floor_arithmetic_ten(self):
        records = _records([(u, u) for u in range(10)])
        s = split(records, 0.8, 0.1, seed=0)
        assert (len(s.train), len(s.validation), len(s.test)) == (8, 0, 2)

    def test_floor_arithmetic_hundred(self):
        records = _records([(u, u % 7) for u in range(100)])
        s = split(records, 0.8, 0.1, seed=0)
        assert (len(s.train), len(s.validation), len(s.test)) == (72, 8, 20)

    def test_deterministic(self):
        records = _records([(u, u % 5) for u in range(40)])
        a = split(records, 0.8, 0.1, seed=7)
        b = split(records, 0.8, 0.1, seed=7)
        for part in ("train", "validation", "test"):
            pa, pb = getattr(a, part), getattr(b, part)
            assert np.array_equal(pa.users, pb.users)
            assert np.array_equal(pa.items, pb.items)
            assert np.array_equal(pa.values, pb.values)

    def test_different_seed_changes_partition(self):
        records = _records([(u, u % 5) for u in range(40)])
        a = split(records, 0.8, 0.1, seed=7)
        b = split(records, 0.8, 0.1, seed=8)
        assert not (
            np.array_equal(a.test.users, b.test.users)
            and np.array_equal(a.test.items, b.test.items)
        )

    def test_partition_is_disjoint_and_complete(self):
        rng = np.random.default_rng(3)
        pairs = [(int(u), int(i)) for u, i in
                 {(rng.integers(0, 20), rng.integers(0, 30)) for _ in range(150)}]
        records = [RawRecord(str(u), str(i), float(1 + (u + i) % 5)) for u, i in pairs]
        s = split(records, 0.8, 0.1, seed=1)
        combined = Counter()
        for part in (s.train, s.validation, s.test):
            for u, i, v in zip(part.users, part.items, part.values):
                combined[(u, i, v)] += 1
        original = Counter(
            (s.user_map.index(r.user), s.item_map.index(r.item), r.rating)
            for r in records
        )
        assert combined == original  # union equals input, multiplicities included

    def test_empty_records_rejected(self):
        with pytest.raises(ValueError):
            split([], 0.8, 0.1, seed=0)

    def test_id_maps_cover_all_records(self):
        records = _records([(1, "x"), (2, "y"), (3, "z")])
        s = split(records, 0.5, 0.0, seed=0)
        assert len(s.user_map) == 3 and len(s.item_map) == 3


class TestIdMap:
    def test_round_trip(self):
        m = IdMap(["u9", "u2", "u9", "u5"])
        assert len(m) == 3
        for idx in range(len(m)):
            assert m.index(m.external(idx)) == idx

    def test_contiguous_from_zero(self):
        m = IdMap(["b", "a", "c"])
        assert [m.index(x) for x in ["b", "a", "c"]] == [0, 1, 2]


class TestParseSocial:
    def _map(self):
        return IdMap(["1", "2", "7"])

    def test_known_edge(self):
        edges = parse_social(io.StringIO("1 2"), self._map())
        assert edges.edges.tolist() == [[0, 1]]

    def test_unknown_user_dropped_with_count(self):
        edges = parse_social(io.StringIO("1 999"), self._map())
        assert len(edges) == 0
        assert edges.dropped_unknown == 1

    def test_self_loop_dropped(self):
        edges = parse_social(io.StringIO("7 7"), self._map())
        assert len(edges) == 0
        assert edges.dropped_self == 1

    def test_malformed_line(self):
        with pytest.raises(ParseError) as err:
            parse_social(io.StringIO("1 2\nonlyone"), self._map())
        assert err.value.line_number == 2
