"""Sparse-representation math: pooling, scoring, and training losses.

The pooling transform is max-over-positions, ReLU, then log(1 + .),
which yields a non-negative vocabulary-sized vector suitable for an
inverted index. Losses: InfoNCE ranking, squared-mean-activation
sparsity penalty, and the two-term adaptation loss (plain causal LM
cross-entropy plus the same cross-entropy on the log-saturated logits).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PLAIN_RELU = "plain_relu"
REPARAM_RELU = "reparam_relu"

WEIGHT_FLOOR = 1e-6  # pooled entries at or below this are dropped as float noise


@dataclass
class SparseRep:
    """Sorted (term_id, weight > 0) pairs over a fixed vocabulary."""

    term_ids: np.ndarray
    weights: np.ndarray
    vocab_size: int

    def __post_init__(self):
        self.term_ids = np.asarray(self.term_ids, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float32)
        if self.term_ids.shape != self.weights.shape:
            raise ValueError("term_ids and weights must have equal length")
        if len(self.term_ids):
            if not np.all(np.diff(self.term_ids) > 0):
                raise ValueError("term_ids must be strictly increasing")
            if self.term_ids[-1] >= self.vocab_size or self.term_ids[0] < 0:
                raise ValueError("term_id out of vocabulary range")
            if not np.all(self.weights > 0):
                raise ValueError("weights must be strictly positive")

    def __len__(self):
        return len(self.term_ids)

    @property
    def nnz(self):
        return len(self.term_ids)

    def to_dense(self, dtype=np.float64):
        dense = np.zeros(self.vocab_size, dtype=dtype)
        dense[self.term_ids] = self.weights
        return dense


@dataclass
class LossBreakdown:
    rank_loss: float
    flops_q: float
    flops_d: float
    lambda_q: float
    lambda_d: float
    total: float

    @classmethod
    def combine(cls, rank_loss, flops_q, flops_d, lambda_q, lambda_d):
        total = rank_loss + lambda_q * flops_q + lambda_d * flops_d
        return cls(rank_loss, flops_q, flops_d, lambda_q, lambda_d, total)


def log_saturate(logits, mode=PLAIN_RELU):
    """log(1 + relu(x)) on a tensor; mode only changes the backward path."""
    act = ad.relu if mode == PLAIN_RELU else ad.reparam_relu
    return ad.log1p(act(logits))


def pool_reps(logits: Tensor, span_mask: np.ndarray, mode=PLAIN_RELU) -> Tensor:
    """Differentiable pooling: (B, L, V) logits + (B, L) span mask -> (B, V)."""
    span_mask = np.asarray(span_mask, dtype=bool)
    if not span_mask.any(axis=1).all():
        raise ValueError("pool_reps: every sequence needs a non-empty content span")
    masked = ad.masked_fill(logits, ~span_mask[:, :, None], -1e30)
    return log_saturate(ad.max_over_axis(masked, axis=1), mode)


def splade_pool(logits: np.ndarray, content_span, mode=PLAIN_RELU) -> SparseRep:
    """Pool a (V, L) logit matrix over span columns into a SparseRep.

    The activation mode does not affect forward values, so the result is
    identical for both modes; it is accepted for interface symmetry.
    """
    start, stop = content_span
    if stop <= start:
        raise ValueError(f"splade_pool: empty content span {content_span}")
    pooled = logits[:, start:stop].max(axis=1)
    weights = np.log1p(np.maximum(pooled, 0.0)).astype(np.float32)
    keep = np.flatnonzero(weights > WEIGHT_FLOOR)
    return SparseRep(keep, weights[keep], vocab_size=logits.shape[0])


def dot_score(q: SparseRep, d: SparseRep) -> float:
    if q.vocab_size != d.vocab_size:
        raise ValueError(f"vocab mismatch: {q.vocab_size} vs {d.vocab_size}")
    qi, di = 0, 0
    total = 0.0
    qt, dt = q.term_ids, d.term_ids
    while qi < len(qt) and di < len(dt):
        if qt[qi] == dt[di]:
            total += float(q.weights[qi]) * float(d.weights[di])
            qi += 1
            di += 1
        elif qt[qi] < dt[di]:
            qi += 1
        else:
            di += 1
    return total


def rank_loss(q: SparseRep, pos: SparseRep, negs) -> float:
    """InfoNCE: -log softmax(s(q,pos)) over positive + negatives."""
    if not negs:
        raise ValueError("rank_loss: negatives must be non-empty")
    scores = np.array([dot_score(q, pos)] + [dot_score(q, n) for n in negs])
    m = scores.max()
    return float(m + np.log(np.exp(scores - m).sum()) - scores[0])


def flops_reg(batch) -> float:
    """Sum over terms of the squared mean activation across the batch."""
    if not batch:
        raise ValueError("flops_reg: batch must be non-empty")
    vocab = batch[0].vocab_size
    sums = np.zeros(vocab, dtype=np.float64)
    for rep in batch:
        sums[rep.term_ids] += rep.weights
    means = sums / len(batch)
    return float(np.sum(means * means))


def flops_reg_t(reps: Tensor) -> Tensor:
    """Tensor version over a dense (B, V) rep matrix."""
    means = ad.mean_over_axis(reps, axis=0)
    return ad.sum_over_axis(ad.mul(means, means))


def rank_loss_t(q_reps: Tensor, d_reps: Tensor, positive_cols: np.ndarray) -> Tensor:
    """Tensor InfoNCE: scores (B, ND) = q_reps @ d_reps.T, softmax CE."""
    scores = ad.matmul(q_reps, ad.transpose(d_reps))
    return ad.softmax_cross_entropy(scores, positive_cols)


def adaptation_loss(logits, token_ids, lambda_relu=1.0, target_weights=None):
    """Two-term adaptation loss on (V, L) logits against next-token targets.

    Returns (total, clm, relu_clm) as scalar Tensors sharing one graph,
    so a single backward covers both terms. `target_weights` optionally
    down-weights padded target positions.
    """
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    token_ids = np.asarray(token_ids, dtype=np.int64)
    v, l = logits.shape
    if l < 2:
        raise ValueError(f"adaptation_loss: need sequence length >= 2, got {l}")
    # columns are positions: predict token t+1 from position t
    pred = _slice_rows(ad.transpose(logits), l - 1)      # (L-1, V)
    targets = token_ids[1:]
    clm = ad.softmax_cross_entropy(pred, targets, target_weights)
    relu_clm = ad.softmax_cross_entropy(log_saturate(pred), targets, target_weights)
    total = ad.add(clm, ad.scale(relu_clm, lambda_relu))
    return total, clm, relu_clm


def adaptation_loss_batch(logits: Tensor, ids: np.ndarray, lengths: np.ndarray,
                          lambda_relu=1.0):
    """Batched adaptation loss on (B, L, V) logits; pads excluded."""
    b, l, v = logits.shape
    if l < 2:
        raise ValueError("adaptation_loss_batch: need sequence length >= 2")
    pred = ad.reshape(_cols(logits, l - 1), (b * (l - 1), v))
    targets = ids[:, 1:].reshape(-1)
    weights = (np.arange(1, l)[None, :] < lengths[:, None]).astype(np.float32).reshape(-1)
    clm = ad.softmax_cross_entropy(pred, targets, weights)
    relu_clm = ad.softmax_cross_entropy(log_saturate(pred), targets, weights)
    total = ad.add(clm, ad.scale(relu_clm, lambda_relu))
    return total, clm, relu_clm


def _slice_rows(t: Tensor, n):
    """First n rows of a 2-D tensor, differentiably (selection matmul)."""
    sel = np.eye(t.shape[0], dtype=t.data.dtype)[:n]
    return ad.matmul(Tensor(sel), t)


def _cols(t: Tensor, n):
    """First n entries of axis 1 of a 3-D tensor, differentiably."""
    b, l, v = t.shape
    sel = np.eye(l, dtype=t.data.dtype)[:n]          # (n, L)
    # (B, L, V) -> (B, n, V)
    return ad.matmul(Tensor(sel), t)


def reparam_relu(x):
    """Module-level alias: forward relu, gelu-gradient backward."""
    return ad.reparam_relu(x)


# --- SparseRep text format: docid<TAB>term:weight term:weight ... ---

def write_reps(path, reps):
    """reps: iterable of (doc_id, SparseRep)."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for doc_id, rep in reps:
            pairs = " ".join(f"{t}:{w:.6f}" for t, w in zip(rep.term_ids, rep.weights))
            f.write(f"{doc_id}\t{pairs}\n")


def read_reps(path, vocab_size):
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            doc_id, _, rest = line.partition("\t")
            terms, weights = [], []
            if rest:
                for pair in rest.split(" "):
                    t, _, w = pair.partition(":")
                    try:
                        terms.append(int(t))
                        weights.append(float(w))
                    except ValueError:
                        raise ValueError(f"{path}:{lineno}: bad term:weight pair {pair!r}") from None
            out.append((doc_id, SparseRep(np.array(terms, dtype=np.int64),
                                          np.array(weights, dtype=np.float32), vocab_size)))
    return out
