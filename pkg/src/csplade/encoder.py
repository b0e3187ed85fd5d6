"""Toy decoder-only transformer with switchable attention masking.

Produces per-position vocabulary logits through a weight-tied LM head.
The causal/bidirectional mask switch and the echo-input expansion are
the two mechanisms that control how much right-context a position sees.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
SEP_ID = BOS_ID  # separator between echo occurrences reuses BOS

CAUSAL = "causal"
BIDIRECTIONAL = "bidirectional"

CHECKPOINT_MAGIC = b"CSPL1"

_ATTN_NEG = -1e9  # exp(-1e9 - max) underflows to exactly 0.0, so masked
                  # positions contribute bit-exact zeros to attention sums


class SequenceTooLongError(ValueError):
    pass


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 64
    mask_mode: str = CAUSAL
    echo_mode: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4 (PAD/BOS/EOS/UNK reserved)")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.mask_mode not in (CAUSAL, BIDIRECTIONAL):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.echo_mode and self.max_seq_len < 2:
            raise ValueError("echo_mode needs max_seq_len >= 2")

    def to_text(self):
        lines = []
        for k in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len",
                  "mask_mode", "echo_mode", "seed"):
            lines.append(f"{k}={getattr(self, k)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = {}
        for line in text.strip().splitlines():
            k, _, v = line.partition("=")
            kv[k] = v
        return cls(
            vocab_size=int(kv["vocab_size"]),
            d_model=int(kv["d_model"]),
            n_layers=int(kv["n_layers"]),
            n_heads=int(kv["n_heads"]),
            max_seq_len=int(kv["max_seq_len"]),
            mask_mode=kv["mask_mode"],
            echo_mode=kv["echo_mode"] == "True",
            seed=int(kv["seed"]),
        )


@dataclass
class TokenSequence:
    """Token ids plus the span of positions eligible for pooling."""

    ids: np.ndarray
    span: tuple  # half-open (start, stop) into ids

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        start, stop = self.span
        if not (0 <= start <= stop <= len(self.ids)):
            raise ValueError(f"span {self.span} outside sequence of length {len(self.ids)}")

    @property
    def length(self):
        return len(self.ids)


def echo_expand(seq: TokenSequence, max_seq_len: int) -> TokenSequence:
    """[BOS, x.., SEP, x.., EOS] with the span on the second occurrence.

    The second copy attends to the full first copy under a causal mask,
    which is what buys bidirectional context without changing the model.
    """
    ids = seq.ids
    content = ids[(ids != BOS_ID) & (ids != EOS_ID) & (ids != PAD_ID)]
    n = len(content)
    if n == 0:
        raise ValueError("echo_expand: no content tokens to echo")
    total = 2 * n + 3
    if total > max_seq_len:
        raise SequenceTooLongError(
            f"echo_expand: doubled length {total} exceeds max_seq_len {max_seq_len}")
    out = np.concatenate([[BOS_ID], content, [SEP_ID], content, [EOS_ID]]).astype(np.int64)
    return TokenSequence(out, span=(n + 2, 2 * n + 2))


def _init_params(cfg: EncoderConfig):
    """Ordered parameter dict; iteration order is the checkpoint block order."""
    rng = np.random.default_rng(cfg.seed)
    d, v = cfg.d_model, cfg.vocab_size
    proj_std = 0.02 / np.sqrt(cfg.n_layers)

    def p(arr):
        return Tensor(arr.astype(np.float32), requires_grad=True)

    params = {}
    params["tok_emb"] = p(rng.normal(0.0, 0.02, (v, d)))
    params["pos_emb"] = p(rng.normal(0.0, 0.02, (cfg.max_seq_len, d)))
    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        params[pre + "ln1_g"] = p(np.ones(d))
        params[pre + "ln1_b"] = p(np.zeros(d))
        for name in ("wq", "wk", "wv", "wo"):
            params[pre + name] = p(rng.normal(0.0, proj_std, (d, d)))
        for name in ("bq", "bk", "bv", "bo"):
            params[pre + name] = p(np.zeros(d))
        params[pre + "ln2_g"] = p(np.ones(d))
        params[pre + "ln2_b"] = p(np.zeros(d))
        params[pre + "w1"] = p(rng.normal(0.0, proj_std, (d, 4 * d)))
        params[pre + "b1"] = p(np.zeros(4 * d))
        params[pre + "w2"] = p(rng.normal(0.0, proj_std, (4 * d, d)))
        params[pre + "b2"] = p(np.zeros(d))
    params["lnf_g"] = p(np.ones(d))
    params["lnf_b"] = p(np.zeros(d))
    params["logit_bias"] = p(np.zeros(v))
    return params


class EncoderModel:
    """Decoder transformer; LM head is the transposed token embedding."""

    def __init__(self, cfg: EncoderConfig, params=None):
        self.cfg = cfg
        self.params = params if params is not None else _init_params(cfg)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def apply_logit_offset(self, offset: float):
        """Shift all output logits by a constant.

        With a large negative offset every pooled pre-activation is below
        zero, which reproduces the dead-ReLU initialization failure.
        """
        self.params["logit_bias"].data += np.float32(offset)

    def forward_batch(self, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Batched forward: ids (B, L) padded with PAD -> logits (B, L, V)."""
        cfg = self.cfg
        ids = np.asarray(ids, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        b, l = ids.shape
        if l > cfg.max_seq_len:
            raise SequenceTooLongError(f"sequence length {l} exceeds max_seq_len {cfg.max_seq_len}")
        pm = self.params
        d, h = cfg.d_model, cfg.n_heads
        dh = d // h

        valid = np.arange(l)[None, :] < lengths[:, None]          # (B, L)
        allowed = valid[:, None, None, :]                          # keys must be valid
        if cfg.mask_mode == CAUSAL:
            causal = np.tril(np.ones((l, l), dtype=bool))
            allowed = allowed & causal[None, None, :, :]
        banned = ~np.broadcast_to(allowed, (b, 1, l, l))

        x = ad.add(ad.embedding(pm["tok_emb"], ids),
                   ad.embedding(pm["pos_emb"], np.broadcast_to(np.arange(l), (b, l))))

        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            hn = ad.layer_norm(x, pm[pre + "ln1_g"], pm[pre + "ln1_b"])
            q = ad.add(ad.matmul(hn, pm[pre + "wq"]), pm[pre + "bq"])
            k = ad.add(ad.matmul(hn, pm[pre + "wk"]), pm[pre + "bk"])
            v = ad.add(ad.matmul(hn, pm[pre + "wv"]), pm[pre + "bv"])
            # (B, L, d) -> (B, H, L, dh)
            q = ad.transpose(ad.reshape(q, (b, l, h, dh)), (0, 2, 1, 3))
            k = ad.transpose(ad.reshape(k, (b, l, h, dh)), (0, 2, 1, 3))
            v = ad.transpose(ad.reshape(v, (b, l, h, dh)), (0, 2, 1, 3))
            scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
            scores = ad.masked_fill(scores, banned, _ATTN_NEG)
            attn = ad.softmax(scores, axis=-1)
            ctx = ad.matmul(attn, v)
            ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, l, d))
            x = ad.add(x, ad.add(ad.matmul(ctx, pm[pre + "wo"]), pm[pre + "bo"]))

            hn = ad.layer_norm(x, pm[pre + "ln2_g"], pm[pre + "ln2_b"])
            mid = ad.gelu(ad.add(ad.matmul(hn, pm[pre + "w1"]), pm[pre + "b1"]))
            x = ad.add(x, ad.add(ad.matmul(mid, pm[pre + "w2"]), pm[pre + "b2"]))

        x = ad.layer_norm(x, pm["lnf_g"], pm["lnf_b"])
        logits = ad.add(ad.matmul(x, ad.transpose(pm["tok_emb"])), pm["logit_bias"])
        return logits

    def forward_logits(self, seq: TokenSequence) -> np.ndarray:
        """Single-sequence inference path; returns a (V, L) float array."""
        ids = seq.ids[None, :]
        logits = self.forward_batch(ids, np.array([seq.length]))
        return logits.data[0].T.copy()

    # --- checkpoint format: magic, config key=value block, blank line,
    #     raw little-endian float32 parameter blocks in dict order ---

    def save(self, path):
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC + b"\n")
            f.write(self.cfg.to_text().encode("utf-8"))
            f.write(b"\n")
            for p in self.params.values():
                f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            blob = f.read()
        if not blob.startswith(CHECKPOINT_MAGIC + b"\n"):
            raise ValueError(f"bad checkpoint magic in {path}")
        head_end = blob.index(b"\n\n", len(CHECKPOINT_MAGIC))
        cfg = EncoderConfig.from_text(blob[len(CHECKPOINT_MAGIC) + 1:head_end].decode("utf-8"))
        model = cls(cfg)
        buf = io.BytesIO(blob[head_end + 2:])
        for name, p in model.params.items():
            raw = buf.read(p.data.size * 4)
            if len(raw) != p.data.size * 4:
                raise ValueError(f"checkpoint truncated at parameter {name}")
            p.data = np.frombuffer(raw, dtype="<f4").reshape(p.data.shape).astype(np.float32)
        if buf.read(1):
            raise ValueError("trailing bytes after final parameter block")
        return model
