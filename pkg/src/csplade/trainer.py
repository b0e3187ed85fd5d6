"""Two-phase training: adaptation on unlabeled text, then contrastive.

Also holds the AdamW optimizer, the cosine-with-warmup schedule, the
dead-dimension diagnostic, and the batch encode helpers shared with the
CLI inference path.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import splade
from .autodiff import Tensor
from .corpus import Vocabulary, tokenize
from .encoder import (BIDIRECTIONAL, CAUSAL, PAD_ID, EncoderModel,
                      TokenSequence, echo_expand)
from .splade import (PLAIN_RELU, WEIGHT_FLOOR, LossBreakdown, SparseRep,
                     adaptation_loss_batch, flops_reg_t, pool_reps,
                     splade_pool)

VARIANTS = {
    "causal": (CAUSAL, False),
    "echo": (CAUSAL, True),
    "bi": (BIDIRECTIONAL, False),
}


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class AdaptConfig:
    steps: int = 500
    batch_size: int = 16
    seq_len: int = 128
    lr: float = 3e-3
    warmup_steps: int = 20
    lambda_relu: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps > 0 and self.warmup_steps >= self.steps:
            raise ValueError("warmup_steps must be < steps")
        if self.lambda_relu < 0:
            raise ValueError("lambda_relu must be >= 0")


@dataclass
class ContrastiveConfig:
    epochs: int = 3
    global_batch_size: int = 8
    hard_negatives_per_positive: int = 3
    lr: float = 2e-3
    warmup_fraction: float = 0.05
    lambda_q: float = 0.003
    lambda_d: float = 0.003
    mask_mode: str = CAUSAL
    echo_mode: bool = False
    activation_mode: str = PLAIN_RELU
    seed: int = 0

    def __post_init__(self):
        if self.hard_negatives_per_positive < 0:
            raise ValueError("hard_negatives_per_positive must be >= 0")
        if self.lambda_q < 0 or self.lambda_d < 0:
            raise ValueError("FLOPs coefficients must be >= 0")


@dataclass
class TrainReport:
    steps: list = field(default_factory=list)
    rank_loss: list = field(default_factory=list)
    flops_q: list = field(default_factory=list)
    flops_d: list = field(default_factory=list)
    clm: list = field(default_factory=list)
    relu_clm: list = field(default_factory=list)
    total: list = field(default_factory=list)
    dead_frac: list = field(default_factory=list)
    avg_nnz_q: list = field(default_factory=list)
    avg_nnz_d: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)

    CSV_HEADER = "step,rank_loss,flops_q,flops_d,clm,relu_clm,total,dead_frac,avg_nnz_q,avg_nnz_d,lr"

    def append(self, step, rank_loss=0.0, flops_q=0.0, flops_d=0.0, clm=0.0,
               relu_clm=0.0, total=0.0, dead_frac=0.0, avg_nnz_q=0.0,
               avg_nnz_d=0.0, lr=0.0, wall_clock=0.0):
        self.steps.append(step)
        self.rank_loss.append(rank_loss)
        self.flops_q.append(flops_q)
        self.flops_d.append(flops_d)
        self.clm.append(clm)
        self.relu_clm.append(relu_clm)
        self.total.append(total)
        self.dead_frac.append(dead_frac)
        self.avg_nnz_q.append(avg_nnz_q)
        self.avg_nnz_d.append(avg_nnz_d)
        self.lr.append(lr)
        self.wall_clock.append(wall_clock)

    def __len__(self):
        return len(self.steps)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.CSV_HEADER + "\n")
            for i in range(len(self.steps)):
                f.write(f"{self.steps[i]},{self.rank_loss[i]:.6f},{self.flops_q[i]:.6f},"
                        f"{self.flops_d[i]:.6f},{self.clm[i]:.6f},{self.relu_clm[i]:.6f},"
                        f"{self.total[i]:.6f},{self.dead_frac[i]:.6f},"
                        f"{self.avg_nnz_q[i]:.3f},{self.avg_nnz_d[i]:.3f},"
                        f"{self.lr[i]:.8f}\n")

    @classmethod
    def from_csv(cls, path):
        report = cls()
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().rstrip("\n")
            if header != cls.CSV_HEADER:
                raise ValueError(f"unexpected report header in {path}")
            for line in f:
                vals = line.rstrip("\n").split(",")
                report.append(int(vals[0]), *[float(v) for v in vals[1:]])
        return report


def cosine_lr(step, total_steps, warmup_steps, peak):
    """Linear warmup to `peak`, then cosine decay to zero."""
    if total_steps <= 0:
        return 0.0
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    if total_steps == warmup_steps:
        return peak
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak * 0.5 * (1.0 + np.cos(np.pi * min(frac, 1.0)))


class AdamW:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = dict(params)
        self.beta1, self.beta2 = beta1, beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= np.float32(lr) * (update + self.weight_decay * p.data).astype(np.float32)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def pack_sequences(seqs):
    """Pad a list of TokenSequence to (ids, lengths, span_mask) arrays."""
    max_len = max(s.length for s in seqs)
    ids = np.full((len(seqs), max_len), PAD_ID, dtype=np.int64)
    lengths = np.zeros(len(seqs), dtype=np.int64)
    span_mask = np.zeros((len(seqs), max_len), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : s.length] = s.ids
        lengths[i] = s.length
        start, stop = s.span
        span_mask[i, start:stop] = True
    return ids, lengths, span_mask


def prepare_sequence(text, vocab, model_cfg, echo_mode):
    """Tokenize and optionally echo-expand to fit the model window."""
    if echo_mode:
        budget = (model_cfg.max_seq_len - 3) // 2 + 2  # room to repeat content
        seq = tokenize(text, vocab, max_len=budget)
        return echo_expand(seq, model_cfg.max_seq_len)
    return tokenize(text, vocab, max_len=model_cfg.max_seq_len)


def encode_reps_tensor(model, seqs, activation_mode=PLAIN_RELU):
    """Differentiable batch encode: sequences -> pooled (B, V) reps."""
    ids, lengths, span_mask = pack_sequences(seqs)
    logits = model.forward_batch(ids, lengths)
    return pool_reps(logits, span_mask, activation_mode)


def encode_texts(model, vocab, texts, echo_mode=False):
    """Inference path: raw texts -> list of SparseRep."""
    reps = []
    for text in texts:
        seq = prepare_sequence(text, vocab, model.cfg, echo_mode)
        reps.append(splade_pool(model.forward_logits(seq), seq.span))
    return reps


def dead_dim_fraction(reps, sample_size=None) -> float:
    """Fraction of representations with an empty support."""
    if isinstance(reps, Tensor):
        dense = reps.data
        empty = (dense > WEIGHT_FLOOR).sum(axis=1) == 0
        pool = empty
    else:
        if not reps:
            raise ValueError("dead_dim_fraction: empty batch")
        pool = np.array([rep.nnz == 0 for rep in reps])
    if sample_size is not None:
        pool = pool[:sample_size]
    return float(pool.mean())


def _nnz_mean(reps: Tensor) -> float:
    return float((reps.data > WEIGHT_FLOOR).sum(axis=1).mean())


def run_adaptation(model: EncoderModel, texts, vocab: Vocabulary, cfg: AdaptConfig):
    """Adapt the model on unlabeled text: CLM plus log-saturated CLM loss."""
    texts = list(texts)
    if not texts:
        raise ValueError("run_adaptation: corpus must be non-empty")
    report = TrainReport()
    if cfg.steps == 0:
        return model, report
    rng = np.random.default_rng(cfg.seed)
    seq_len = min(cfg.seq_len, model.cfg.max_seq_len)
    tokenized = [tokenize(t, vocab, max_len=seq_len) for t in texts]
    optimizer = AdamW(model.params)

    for step in range(cfg.steps):
        picks = rng.integers(0, len(tokenized), size=cfg.batch_size)
        batch = [tokenized[i] for i in picks]
        ids, lengths, _ = pack_sequences(batch)
        t0 = time.perf_counter()
        optimizer.zero_grad()
        logits = model.forward_batch(ids, lengths)
        total, clm, relu_clm = adaptation_loss_batch(logits, ids, lengths,
                                                     lambda_relu=cfg.lambda_relu)
        if not np.isfinite(total.data):
            raise TrainingDivergedError(
                f"adaptation step {step}: non-finite loss "
                f"(clm={float(clm.data)}, relu_clm={float(relu_clm.data)})")
        total.backward()
        lr = cosine_lr(step, cfg.steps, cfg.warmup_steps, cfg.lr)
        optimizer.step(lr)
        report.append(step, clm=float(clm.data), relu_clm=float(relu_clm.data),
                      total=float(total.data), lr=lr,
                      wall_clock=time.perf_counter() - t0)
    return model, report


def run_contrastive(model: EncoderModel, triples, corpus, queries,
                    vocab: Vocabulary, cfg: ContrastiveConfig, on_step=None):
    """Contrastive phase: hard negatives plus all other in-batch documents."""
    for t in triples:
        if not t["positive_ids"]:
            raise ValueError(f"triple for {t['query_id']} has no positive")
    report = TrainReport()
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = (len(triples) + cfg.global_batch_size - 1) // cfg.global_batch_size
    total_steps = cfg.epochs * steps_per_epoch
    warmup = int(round(cfg.warmup_fraction * total_steps))
    optimizer = AdamW(model.params)
    h = cfg.hard_negatives_per_positive
    step = 0
    seq_cache = {}

    def seq_for(text_map, key):
        if key not in seq_cache:
            seq_cache[key] = prepare_sequence(text_map[key[1]], vocab, model.cfg,
                                              cfg.echo_mode)
        return seq_cache[key]

    for _ in range(cfg.epochs):
        order = rng.permutation(len(triples))
        for b0 in range(0, len(order), cfg.global_batch_size):
            chosen = order[b0: b0 + cfg.global_batch_size]
            q_seqs, d_seqs = [], []
            for ti in chosen:
                triple = triples[ti]
                q_seqs.append(seq_for(queries, ("q", triple["query_id"])))
                pos_id = triple["positive_ids"][0]
                if len(triple["positive_ids"]) > 1:
                    pos_id = triple["positive_ids"][int(rng.integers(len(triple["positive_ids"])))]
                d_seqs.append(seq_for(corpus, ("d", pos_id)))
                pool = triple["negative_ids"]
                if h > 0 and pool:
                    picks = rng.choice(len(pool), size=min(h, len(pool)), replace=False)
                    for i in sorted(picks):
                        d_seqs.append(seq_for(corpus, ("d", pool[i])))

            t0 = time.perf_counter()
            optimizer.zero_grad()
            docs_per_query = len(d_seqs) // len(q_seqs)
            q_reps = encode_reps_tensor(model, q_seqs, cfg.activation_mode)
            d_reps = encode_reps_tensor(model, d_seqs, cfg.activation_mode)
            positives = np.arange(len(q_seqs)) * docs_per_query
            rank = splade.rank_loss_t(q_reps, d_reps, positives)
            fq = flops_reg_t(q_reps)
            fd = flops_reg_t(d_reps)
            total = ad.add(rank, ad.add(ad.scale(fq, cfg.lambda_q),
                                        ad.scale(fd, cfg.lambda_d)))
            breakdown = LossBreakdown.combine(float(rank.data), float(fq.data),
                                              float(fd.data), cfg.lambda_q, cfg.lambda_d)
            if not np.isfinite(total.data):
                raise TrainingDivergedError(
                    f"contrastive step {step}: non-finite loss {breakdown}")
            dead_q = dead_dim_fraction(q_reps)
            dead_d = dead_dim_fraction(d_reps)
            dead = (dead_q * len(q_seqs) + dead_d * len(d_seqs)) / (len(q_seqs) + len(d_seqs))
            if dead_q == 1.0 and dead_d == 1.0:
                warnings.warn(
                    f"step {step}: all representations empty (dead_dim_fraction=1.0); "
                    "training is stalled by dead ReLU units", RuntimeWarning)
            total.backward()
            lr = cosine_lr(step, total_steps, warmup, cfg.lr)
            optimizer.step(lr)
            report.append(step, rank_loss=breakdown.rank_loss, flops_q=breakdown.flops_q,
                          flops_d=breakdown.flops_d, total=breakdown.total,
                          dead_frac=dead, avg_nnz_q=_nnz_mean(q_reps),
                          avg_nnz_d=_nnz_mean(d_reps), lr=lr,
                          wall_clock=time.perf_counter() - t0)
            if on_step is not None:
                on_step(step, report)
            step += 1
    return model, report
