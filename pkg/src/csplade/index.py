"""Impact-quantized inverted index with exact top-k retrieval.

Impacts are linearly quantized against the collection-wide maximum
weight (floor 1 so no posting vanishes), doc ordinals are delta+varint
coded, and scoring is term-at-a-time into a dense float64 accumulator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ._kernels import accumulate_postings, varint_decode, varint_encode
from .splade import SparseRep

MAGIC = b"CSPIDX1"
_HEADER = struct.Struct("<IIBf")  # vocab_size, doc_count, bits, scale (13 bytes)


class IndexFormatError(ValueError):
    pass


@dataclass
class PostingList:
    term_id: int
    ordinals: np.ndarray   # strictly increasing uint32
    impacts: np.ndarray    # uint8/uint16 or float32 when unquantized


class InvertedIndex:
    def __init__(self, vocab_size, bits, scale, doc_ids, postings):
        self.vocab_size = vocab_size
        self.bits = bits
        self.scale = scale
        self.doc_ids = list(doc_ids)
        self.postings = postings  # dict term_id -> PostingList

    @property
    def doc_count(self):
        return len(self.doc_ids)

    def dequant_factor(self):
        if self.bits == 0:
            return 1.0
        return self.scale / (2 ** self.bits - 1)


def _impact_dtype(bits):
    return {0: np.float32, 8: np.uint8, 16: np.uint16}[bits]


def build_index(reps, bits=8) -> InvertedIndex:
    """reps: iterable of (doc_id, SparseRep); ordinals follow input order."""
    if bits not in (0, 8, 16):
        raise ValueError(f"bits must be 0, 8 or 16, got {bits}")
    doc_ids = []
    seen = set()
    term_docs = {}
    term_weights = {}
    vocab_size = None
    max_weight = 0.0
    for doc_id, rep in reps:
        if doc_id in seen:
            raise ValueError(f"duplicate doc id {doc_id!r}")
        seen.add(doc_id)
        ordinal = len(doc_ids)
        doc_ids.append(doc_id)
        if vocab_size is None:
            vocab_size = rep.vocab_size
        elif rep.vocab_size != vocab_size:
            raise ValueError("mixed vocab sizes in one index")
        if len(rep):
            max_weight = max(max_weight, float(rep.weights.max()))
        for t, w in zip(rep.term_ids, rep.weights):
            term_docs.setdefault(int(t), []).append(ordinal)
            term_weights.setdefault(int(t), []).append(float(w))

    scale = max_weight if max_weight > 0 else 1.0
    dtype = _impact_dtype(bits)
    postings = {}
    for t in sorted(term_docs):
        ords = np.array(term_docs[t], dtype=np.uint32)
        weights = np.array(term_weights[t], dtype=np.float64)
        if bits == 0:
            impacts = weights.astype(np.float32)
        else:
            q = np.maximum(1, np.round(weights / scale * (2 ** bits - 1)))
            impacts = q.astype(dtype)
        postings[t] = PostingList(t, ords, impacts)
    return InvertedIndex(vocab_size if vocab_size is not None else 0,
                         bits, float(scale), doc_ids, postings)


@dataclass
class SearchResult:
    doc_ids: list
    scores: np.ndarray

    def __len__(self):
        return len(self.doc_ids)

    def ranking(self):
        return list(zip(self.doc_ids, self.scores))


def search(index: InvertedIndex, q: SparseRep, k: int) -> SearchResult:
    """Exact top-k by dot product over dequantized impacts.

    Ties break by ascending doc ordinal. Docs with score 0 are never
    returned, so an empty query rep yields an empty result.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if index.vocab_size and q.vocab_size != index.vocab_size:
        raise ValueError(f"vocab mismatch: query {q.vocab_size} vs index {index.vocab_size}")
    acc = np.zeros(index.doc_count, dtype=np.float64)
    factor = index.dequant_factor()
    for t, qw in zip(q.term_ids, q.weights):
        plist = index.postings.get(int(t))
        if plist is None:
            continue
        accumulate_postings(plist.ordinals.astype(np.int64),
                            plist.impacts.astype(np.float64) * factor,
                            float(qw), acc)
    cand = np.flatnonzero(acc > 0)
    if cand.size == 0:
        return SearchResult([], np.empty(0))
    # sort by (-score, ordinal); lexsort uses the last key as primary
    order = np.lexsort((cand, -acc[cand]))[:k]
    chosen = cand[order]
    return SearchResult([index.doc_ids[i] for i in chosen], acc[chosen])


def brute_force_search(reps, q: SparseRep, k: int) -> SearchResult:
    """Independent oracle: densify every doc and dot it with the query."""
    qd = q.to_dense()
    doc_ids, scores = [], []
    for doc_id, rep in reps:
        doc_ids.append(doc_id)
        scores.append(float(rep.to_dense() @ qd))
    scores = np.array(scores)
    cand = np.flatnonzero(scores > 0)
    order = np.lexsort((cand, -scores[cand]))[:k]
    chosen = cand[order]
    return SearchResult([doc_ids[i] for i in chosen], scores[chosen])


# --- serialization ---

def _doc_table_bytes(doc_ids):
    chunks = []
    for d in doc_ids:
        raw = d.encode("utf-8")
        chunks.append(varint_encode(np.array([len(raw)], dtype=np.uint64)))
        chunks.append(raw)
    return b"".join(chunks)


def _postings_bytes(index):
    chunks = [struct.pack("<I", len(index.postings))]
    for t in sorted(index.postings):
        plist = index.postings[t]
        ords = plist.ordinals.astype(np.uint64)
        deltas = np.empty_like(ords)
        if len(ords):
            deltas[0] = ords[0]
            deltas[1:] = np.diff(ords)
        chunks.append(struct.pack("<II", t, len(ords)))
        chunks.append(varint_encode(deltas))
        chunks.append(np.ascontiguousarray(plist.impacts).tobytes())
    return b"".join(chunks)


def serialize(index: InvertedIndex, path):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(index.vocab_size, index.doc_count, index.bits, index.scale))
        f.write(_doc_table_bytes(index.doc_ids))
        f.write(_postings_bytes(index))


def index_size_bytes(index: InvertedIndex) -> int:
    """Exact serialized size without writing."""
    n = len(MAGIC) + _HEADER.size
    n += len(_doc_table_bytes(index.doc_ids))
    n += len(_postings_bytes(index))
    return n


def deserialize(path) -> InvertedIndex:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise IndexFormatError(f"bad magic at byte 0 in {path}")
    pos = len(MAGIC)
    try:
        vocab_size, doc_count, bits, scale = _HEADER.unpack_from(blob, pos)
    except struct.error:
        raise IndexFormatError(f"truncated header at byte {pos}") from None
    pos += _HEADER.size
    doc_ids = []
    try:
        for _ in range(doc_count):
            (n,), pos = varint_decode(blob, 1, pos)
            doc_ids.append(blob[pos: pos + int(n)].decode("utf-8"))
            if len(doc_ids[-1].encode("utf-8")) != int(n):
                raise IndexFormatError(f"truncated doc table at byte {pos}")
            pos += int(n)
        if pos + 4 > len(blob):
            raise IndexFormatError(f"truncated posting-list count at byte {pos}")
        (n_lists,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        postings = {}
        dtype = _impact_dtype(bits)
        width = np.dtype(dtype).itemsize
        for _ in range(n_lists):
            if pos + 8 > len(blob):
                raise IndexFormatError(f"truncated posting header at byte {pos}")
            t, count = struct.unpack_from("<II", blob, pos)
            pos += 8
            deltas, pos = varint_decode(blob, count, pos)
            ords = np.cumsum(deltas.astype(np.uint64)).astype(np.uint32)
            if pos + count * width > len(blob):
                raise IndexFormatError(f"truncated impacts at byte {pos}")
            impacts = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).copy()
            pos += count * width
            postings[t] = PostingList(t, ords, impacts)
    except IndexError:
        raise IndexFormatError(f"truncated file near byte {pos}") from None
    if pos != len(blob):
        raise IndexFormatError(f"trailing bytes at offset {pos}")
    return InvertedIndex(vocab_size, bits, scale, doc_ids, postings)


# --- TREC run format ---

def write_run(path, run, tag="csplade"):
    """run: dict qid -> SearchResult (or list of (docid, score))."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for qid, result in run.items():
            pairs = result.ranking() if isinstance(result, SearchResult) else result
            for rank, (docid, score) in enumerate(pairs, 1):
                f.write(f"{qid} Q0 {docid} {rank} {score:.6f} {tag}\n")


def read_run(path):
    run = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise IndexFormatError(f"{path}:{lineno}: expected 6 run columns")
            qid, _, docid, _, score, _ = parts
            run.setdefault(qid, []).append((docid, float(score)))
    return run
