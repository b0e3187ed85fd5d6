"""BM25 baseline and TREC-style ranking metrics."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .index import SearchResult

DEFAULT_K1 = 0.9
DEFAULT_B = 0.4


@dataclass
class CollectionStats:
    n_docs: int
    avg_doc_len: float
    doc_freq: dict          # term -> document frequency
    doc_len: dict           # doc id -> token count
    doc_tf: dict            # doc id -> Counter of term frequencies


def _terms(text):
    return text.lower().split()


def build_stats(corpus) -> CollectionStats:
    """corpus: dict doc_id -> raw text."""
    doc_freq = {}
    doc_len = {}
    doc_tf = {}
    total = 0
    for doc_id, text in corpus.items():
        toks = _terms(text)
        tf = Counter(toks)
        doc_tf[doc_id] = tf
        doc_len[doc_id] = len(toks)
        total += len(toks)
        for term in tf:
            doc_freq[term] = doc_freq.get(term, 0) + 1
    n = len(corpus)
    return CollectionStats(n, total / n if n else 0.0, doc_freq, doc_len, doc_tf)


def _idf(stats, term):
    df = stats.doc_freq.get(term, 0)
    return max(0.0, math.log(1.0 + (stats.n_docs - df + 0.5) / (df + 0.5)))


def bm25_score(query_tokens, doc_tokens, stats: CollectionStats,
               k1=DEFAULT_K1, b=DEFAULT_B) -> float:
    tf = Counter(doc_tokens)
    dl = len(doc_tokens)
    norm = k1 * (1.0 - b + b * dl / stats.avg_doc_len) if stats.avg_doc_len else k1
    score = 0.0
    for term in query_tokens:
        f = tf.get(term, 0)
        if f == 0:
            continue
        score += _idf(stats, term) * f * (k1 + 1.0) / (f + norm)
    return score


def bm25_search(corpus, query_text, stats: CollectionStats, k,
                k1=DEFAULT_K1, b=DEFAULT_B) -> SearchResult:
    """Exhaustive BM25 over the collection; ties break by doc id ascending."""
    q = _terms(query_text)
    scored = []
    for doc_id in corpus:
        tf = stats.doc_tf[doc_id]
        dl = stats.doc_len[doc_id]
        norm = k1 * (1.0 - b + b * dl / stats.avg_doc_len) if stats.avg_doc_len else k1
        s = 0.0
        for term in q:
            f = tf.get(term, 0)
            if f:
                s += _idf(stats, term) * f * (k1 + 1.0) / (f + norm)
        if s > 0:
            scored.append((doc_id, s))
    scored.sort(key=lambda x: (-x[1], x[0]))
    top = scored[:k]
    return SearchResult([d for d, _ in top], np.array([s for _, s in top]))


# --- metrics; run: dict qid -> ranked list of (docid, score) ---

def _ranked_ids(entry):
    if isinstance(entry, SearchResult):
        return entry.doc_ids
    return [d for d, _ in entry]


def _check_no_dups(qid, ids):
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate docid in run for query {qid}")


def _evaluated_queries(run, qrels):
    """Queries that have at least one positively judged doc."""
    for qid, judged in qrels.items():
        if any(rel > 0 for rel in judged.values()):
            yield qid, judged


def mrr_at_k(run, qrels, k):
    per_query = {}
    for qid, judged in _evaluated_queries(run, qrels):
        ids = _ranked_ids(run.get(qid, []))[:k]
        _check_no_dups(qid, ids)
        rr = 0.0
        for rank, docid in enumerate(ids, 1):
            if judged.get(docid, 0) > 0:
                rr = 1.0 / rank
                break
        per_query[qid] = rr
    mean = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return per_query, mean


def recall_at_k(run, qrels, k):
    per_query = {}
    for qid, judged in _evaluated_queries(run, qrels):
        relevant = {d for d, rel in judged.items() if rel > 0}
        ids = _ranked_ids(run.get(qid, []))[:k]
        _check_no_dups(qid, ids)
        per_query[qid] = len(relevant.intersection(ids)) / len(relevant)
    mean = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return per_query, mean


def ndcg_at_k(run, qrels, k):
    """Gain 2^rel - 1, log2(rank+1) discount, ideal DCG from the qrels."""
    per_query = {}
    for qid, judged in _evaluated_queries(run, qrels):
        ids = _ranked_ids(run.get(qid, []))[:k]
        _check_no_dups(qid, ids)
        dcg = 0.0
        for rank, docid in enumerate(ids, 1):
            rel = judged.get(docid, 0)
            if rel > 0:
                dcg += (2 ** rel - 1) / math.log2(rank + 1)
        ideal = sorted((rel for rel in judged.values() if rel > 0), reverse=True)[:k]
        idcg = sum((2 ** rel - 1) / math.log2(rank + 1)
                   for rank, rel in enumerate(ideal, 1))
        per_query[qid] = dcg / idcg if idcg > 0 else 0.0
    mean = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return per_query, mean


METRICS = {"mrr": mrr_at_k, "recall": recall_at_k, "ndcg": ndcg_at_k}


def metrics_csv(path, run, qrels, k):
    """Write per-query and aggregate metrics as `qid,metric,value` rows."""
    lines = ["qid,metric,value"]
    for name, fn in METRICS.items():
        per_query, mean = fn(run, qrels, k)
        for qid in sorted(per_query):
            lines.append(f"{qid},{name}@{k},{per_query[qid]:.6f}")
        lines.append(f"all,{name}@{k},{mean:.6f}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
