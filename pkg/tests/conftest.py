"""Shared fixtures: synthetic benchmark data and small helper models."""

import numpy as np
import pytest

from csplade.corpus import SynthSpec, build_vocab, synth_generate
from csplade.encoder import BIDIRECTIONAL, EncoderConfig, EncoderModel
from csplade.evalkit import mrr_at_k
from csplade.index import build_index, search
from csplade.trainer import encode_texts


@pytest.fixture(scope="session")
def synth():
    """The standard benchmark: 1k docs, 100 queries, seed 0."""
    corpus, queries, qrels, triples = synth_generate(SynthSpec(seed=0))
    vocab = build_vocab(list(corpus.values()) + list(queries.values()))
    return {
        "corpus": corpus,
        "queries": queries,
        "qrels": qrels,
        "triples": triples,
        "vocab": vocab,
        "texts": list(corpus.values()) + list(queries.values()),
    }


@pytest.fixture(scope="session")
def tiny_model():
    """Small untrained bidirectional model over a 30-token vocabulary."""
    cfg = EncoderConfig(vocab_size=30, d_model=16, n_layers=1, n_heads=2,
                        max_seq_len=16, mask_mode=BIDIRECTIONAL, seed=3)
    return EncoderModel(cfg)


def evaluate_mrr(model, data, k=10, echo_mode=False):
    """Encode the benchmark, retrieve top-k, and return mean MRR@k."""
    reps = encode_texts(model, data["vocab"], data["corpus"].values(),
                        echo_mode=echo_mode)
    idx = build_index(list(zip(data["corpus"].keys(), reps)), bits=0)
    run = {}
    qreps = encode_texts(model, data["vocab"], data["queries"].values(),
                         echo_mode=echo_mode)
    for qid, rep in zip(data["queries"].keys(), qreps):
        run[qid] = search(idx, rep, k).ranking() if rep.nnz else []
    return mrr_at_k(run, data["qrels"], k)[1]


def random_sparse_rep(rng, vocab_size, max_nnz=12):
    """A random valid SparseRep for property and oracle tests."""
    from csplade.splade import SparseRep
    nnz = int(rng.integers(0, max_nnz + 1))
    terms = np.sort(rng.choice(vocab_size, size=nnz, replace=False))
    weights = rng.uniform(0.05, 3.0, size=nnz).astype(np.float32)
    return SparseRep(terms, weights, vocab_size)
