"""Inverted-index tests: quantization, search oracle, serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_sparse_rep
from csplade._kernels import varint_decode, varint_encode
from csplade.index import (IndexFormatError, brute_force_search, build_index,
                           deserialize, index_size_bytes, read_run, search,
                           serialize, write_run)
from csplade.splade import SparseRep


def rep(pairs, vocab_size=10):
    terms = np.array([t for t, _ in pairs], dtype=np.int64)
    weights = np.array([w for _, w in pairs], dtype=np.float32)
    return SparseRep(terms, weights, vocab_size)


class TestVarint:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 2 ** 32 - 1), max_size=40))
    def test_round_trip(self, values):
        arr = np.array(values, dtype=np.uint64)
        buf = varint_encode(arr)
        out, end = varint_decode(buf, len(values))
        assert end == len(buf)
        np.testing.assert_array_equal(out, np.array(values, dtype=np.uint32))

    def test_known_encodings(self):
        assert varint_encode(np.array([0], dtype=np.uint64)) == b"\x00"
        assert varint_encode(np.array([127], dtype=np.uint64)) == b"\x7f"
        assert varint_encode(np.array([128], dtype=np.uint64)) == b"\x80\x01"
        assert varint_encode(np.array([300], dtype=np.uint64)) == b"\xac\x02"


class TestBuildIndex:
    def test_empty(self):
        idx = build_index([], bits=8)
        assert idx.doc_count == 0 and not idx.postings

    def test_single_doc_max_impact(self):
        idx = build_index([("d0", rep([(7, 2.0)]))], bits=8)
        assert idx.scale == pytest.approx(2.0)
        assert idx.postings[7].impacts.tolist() == [255]

    def test_bits_zero_stores_exact_weights(self):
        r = rep([(1, 0.125), (4, 1.75)])
        idx = build_index([("d0", r)], bits=0)
        assert idx.postings[1].impacts[0] == np.float32(0.125)
        assert idx.postings[4].impacts[0] == np.float32(1.75)

    def test_quantization_floor_is_one(self):
        idx = build_index([("d0", rep([(1, 1e-5), (2, 100.0)]))], bits=8)
        assert idx.postings[1].impacts[0] == 1  # never dropped to zero

    def test_quantization_monotone(self):
        rng = np.random.default_rng(0)
        w = np.sort(rng.uniform(0.01, 5.0, 20))
        reps = [(f"d{i}", rep([(1, float(x))])) for i, x in enumerate(w)]
        idx = build_index(reps, bits=8)
        impacts = idx.postings[1].impacts
        assert (np.diff(impacts.astype(int)) >= 0).all()

    def test_duplicate_doc_id_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            build_index([("d0", rep([(1, 1.0)])), ("d0", rep([(2, 1.0)]))])

    def test_invalid_bits(self):
        with pytest.raises(ValueError, match="bits"):
            build_index([], bits=4)


class TestSearch:
    def test_disjoint_query_empty_result(self):
        idx = build_index([("d0", rep([(1, 1.0)]))], bits=0)
        assert len(search(idx, rep([(5, 1.0)]), 10)) == 0

    def test_hand_ranking(self):
        docs = [("a", rep([(1, 1.0), (2, 2.0)])),
                ("b", rep([(1, 3.0)])),
                ("c", rep([(2, 1.0)]))]
        idx = build_index(docs, bits=0)
        result = search(idx, rep([(1, 1.0), (2, 1.0)]), 3)
        # scores: a=3, b=3, c=1; tie a-vs-b broken by input ordinal
        assert result.doc_ids == ["a", "b", "c"]
        np.testing.assert_allclose(result.scores, [3.0, 3.0, 1.0], atol=1e-6)

    def test_k_exceeds_doc_count(self):
        idx = build_index([("d0", rep([(1, 1.0)]))], bits=0)
        assert len(search(idx, rep([(1, 1.0)]), 99)) == 1

    def test_k_must_be_positive(self):
        idx = build_index([], bits=0)
        with pytest.raises(ValueError, match="k"):
            search(idx, rep([(1, 1.0)]), 0)

    def test_vocab_mismatch(self):
        idx = build_index([("d0", rep([(1, 1.0)], 10))], bits=0)
        with pytest.raises(ValueError, match="vocab"):
            search(idx, rep([(1, 1.0)], 11), 5)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_matches_brute_force_oracle(self, seed):
        rng = np.random.default_rng(seed)
        docs = [(f"d{i}", random_sparse_rep(rng, 20)) for i in range(30)]
        idx = build_index(docs, bits=0)
        q = random_sparse_rep(rng, 20)
        got = search(idx, q, 10)
        want = brute_force_search(docs, q, 10)
        assert got.doc_ids == want.doc_ids
        np.testing.assert_allclose(got.scores, want.scores, atol=1e-5)

    def test_scores_non_negative_and_sorted(self):
        rng = np.random.default_rng(7)
        docs = [(f"d{i}", random_sparse_rep(rng, 20)) for i in range(40)]
        idx = build_index(docs, bits=8)
        result = search(idx, random_sparse_rep(rng, 20, max_nnz=8), 15)
        assert (result.scores > 0).all()
        assert (np.diff(result.scores) <= 1e-12).all()


class TestSerialization:
    def _random_index(self, seed, bits, n=25):
        rng = np.random.default_rng(seed)
        return build_index([(f"d{i}", random_sparse_rep(rng, 20)) for i in range(n)],
                           bits=bits)

    @pytest.mark.parametrize("bits", [0, 8, 16])
    def test_round_trip(self, tmp_path, bits):
        idx = self._random_index(1, bits)
        path = tmp_path / "idx.bin"
        serialize(idx, path)
        loaded = deserialize(path)
        assert loaded.doc_ids == idx.doc_ids
        assert loaded.bits == idx.bits and loaded.scale == np.float32(idx.scale)
        for t, plist in idx.postings.items():
            np.testing.assert_array_equal(loaded.postings[t].ordinals, plist.ordinals)
            np.testing.assert_array_equal(loaded.postings[t].impacts, plist.impacts)

    def test_round_trip_preserves_search(self, tmp_path):
        idx = self._random_index(2, 8)
        path = tmp_path / "idx.bin"
        serialize(idx, path)
        loaded = deserialize(path)
        q = random_sparse_rep(np.random.default_rng(99), 20)
        a, b = search(idx, q, 10), search(loaded, q, 10)
        assert a.doc_ids == b.doc_ids
        np.testing.assert_array_equal(a.scores, b.scores)

    def test_size_matches_file(self, tmp_path):
        for bits in (0, 8, 16):
            idx = self._random_index(3, bits)
            path = tmp_path / f"idx{bits}.bin"
            serialize(idx, path)
            assert index_size_bytes(idx) == path.stat().st_size

    def test_empty_index_is_header_plus_count(self, tmp_path):
        idx = build_index([], bits=8)
        path = tmp_path / "empty.bin"
        serialize(idx, path)
        # magic (7) + header (13) + posting-list count (4)
        assert path.stat().st_size == 24
        assert deserialize(path).doc_count == 0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTANIDX" + b"\x00" * 20)
        with pytest.raises(IndexFormatError, match="magic"):
            deserialize(path)

    def test_truncation_reports_offset(self, tmp_path):
        idx = self._random_index(4, 8)
        path = tmp_path / "t.bin"
        serialize(idx, path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(IndexFormatError, match=r"byte \d+"):
            deserialize(path)

    def test_build_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        serialize(self._random_index(5, 8), a)
        serialize(self._random_index(5, 8), b)
        assert a.read_bytes() == b.read_bytes()


class TestRunFormat:
    def test_round_trip(self, tmp_path):
        run = {"q1": [("d3", 2.5), ("d1", 1.0)], "q2": [("d2", 0.75)]}
        path = tmp_path / "run.txt"
        write_run(path, run, tag="test")
        assert read_run(path) == {"q1": [("d3", 2.5), ("d1", 1.0)],
                                  "q2": [("d2", 0.75)]}

    def test_format_columns(self, tmp_path):
        path = tmp_path / "run.txt"
        write_run(path, {"q1": [("d1", 1.5)]}, tag="sys")
        assert path.read_text() == "q1 Q0 d1 1 1.500000 sys\n"

    def test_bad_column_count(self, tmp_path):
        path = tmp_path / "run.txt"
        path.write_text("q1 Q0 d1 1 1.0\n")
        with pytest.raises(IndexFormatError, match="columns"):
            read_run(path)
