"""Command-line pipeline: synth -> adapt -> train -> encode -> index ->
search -> eval, plus the quantization latency benchmark.

Every subcommand writes a JSON manifest (sorted keys) with the fully
resolved configuration next to its outputs, and is bit-reproducible for
a fixed seed. Subcommands communicate through files only.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, corpus as corpus_mod, evalkit, index as index_mod
from . import quant, splade, trainer
from .encoder import EncoderConfig, EncoderModel
from .trainer import VARIANTS, AdaptConfig, ContrastiveConfig


def _apply_thread_cap():
    cap = os.environ.get("CSPLADE_THREADS")
    if cap:
        try:
            import numba
            numba.set_num_threads(max(1, int(cap)))
        except (ImportError, ValueError):
            pass


def write_manifest(path, subcommand, args, outputs):
    config = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "outputs": sorted(str(o) for o in outputs),
        "seed": config.get("seed"),
        "version": __version__,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")


def _variant_of(args, model):
    mask_mode, echo_mode = VARIANTS[args.variant]
    model.cfg.mask_mode = mask_mode
    model.cfg.echo_mode = echo_mode
    return mask_mode, echo_mode


def cmd_synth(args):
    spec = corpus_mod.SynthSpec(
        n_docs=args.docs, n_queries=args.queries,
        base_vocab_size=args.base_vocab, n_synonym_pairs=args.synonym_pairs,
        doc_len_range=(args.doc_len_min, args.doc_len_max),
        hard_negatives_per_query=args.hard_negs, seed=args.seed)
    collection, queries, qrels, triples = corpus_mod.synth_generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus_mod.save_tsv(out / "corpus.tsv", collection)
    corpus_mod.save_tsv(out / "queries.tsv", queries)
    corpus_mod.save_qrels(out / "qrels.txt", qrels)
    corpus_mod.save_triples(out / "triples.jsonl", triples)
    write_manifest(out / "manifest.json", "synth", args,
                   [out / n for n in ("corpus.tsv", "queries.tsv", "qrels.txt", "triples.jsonl")])
    return 0


def cmd_adapt(args):
    collection = corpus_mod.load_corpus(args.corpus)
    if args.vocab and Path(args.vocab).exists():
        vocab = corpus_mod.Vocabulary.load(args.vocab)
    else:
        vocab = corpus_mod.build_vocab(collection.values(), size=args.vocab_size)
    vocab_out = Path(args.vocab_out or (Path(args.out).with_suffix(".vocab.txt")))
    vocab.save(vocab_out)

    if args.model:
        model = EncoderModel.load(args.model)
    else:
        mask_mode, echo_mode = VARIANTS[args.variant]
        cfg = EncoderConfig(vocab_size=vocab.size, d_model=args.d_model,
                            n_layers=args.layers, n_heads=args.heads,
                            max_seq_len=args.max_seq_len, mask_mode=mask_mode,
                            echo_mode=echo_mode, seed=args.seed)
        model = EncoderModel(cfg)
    _variant_of(args, model)
    cfg = AdaptConfig(steps=args.steps, batch_size=args.batch, seq_len=args.seq_len,
                      lr=args.lr, warmup_steps=args.warmup,
                      lambda_relu=args.lambda_relu, seed=args.seed)
    model, report = trainer.run_adaptation(model, collection.values(), vocab, cfg)
    model.save(args.out)
    outputs = [args.out, vocab_out]
    if args.report:
        report.to_csv(args.report)
        outputs.append(args.report)
    write_manifest(str(args.out) + ".manifest.json", "adapt", args, outputs)
    return 0


def cmd_train(args):
    model = EncoderModel.load(args.model)
    vocab = corpus_mod.Vocabulary.load(args.vocab)
    collection = corpus_mod.load_corpus(args.corpus)
    queries = corpus_mod.load_queries(args.queries)
    triples = corpus_mod.load_triples(args.triples)
    mask_mode, echo_mode = _variant_of(args, model)
    cfg = ContrastiveConfig(
        epochs=args.epochs, global_batch_size=args.batch,
        hard_negatives_per_positive=args.hard_negs, lr=args.lr,
        warmup_fraction=args.warmup_fraction, lambda_q=args.lambda_q,
        lambda_d=args.lambda_d, mask_mode=mask_mode, echo_mode=echo_mode,
        seed=args.seed)
    model, report = trainer.run_contrastive(model, triples, collection, queries, vocab, cfg)
    model.save(args.out)
    outputs = [args.out]
    if args.report:
        report.to_csv(args.report)
        outputs.append(args.report)
    write_manifest(str(args.out) + ".manifest.json", "train", args, outputs)
    return 0


def cmd_encode(args):
    model = EncoderModel.load(args.model)
    vocab = corpus_mod.Vocabulary.load(args.vocab)
    _, echo_mode = _variant_of(args, model)
    texts = corpus_mod.load_tsv(args.input)
    reps = trainer.encode_texts(model, vocab, texts.values(), echo_mode=echo_mode)
    splade.write_reps(args.out, zip(texts.keys(), reps))
    write_manifest(str(args.out) + ".manifest.json", "encode", args, [args.out])
    return 0


def cmd_index(args):
    vocab = corpus_mod.Vocabulary.load(args.vocab)
    reps = splade.read_reps(args.reps, vocab.size)
    idx = index_mod.build_index(reps, bits=args.bits)
    index_mod.serialize(idx, args.out)
    write_manifest(str(args.out) + ".manifest.json", "index", args, [args.out])
    return 0


def cmd_search(args):
    queries = corpus_mod.load_queries(args.queries)
    run = {}
    if args.bm25:
        if not args.corpus:
            raise ValueError("--bm25 search requires --corpus")
        collection = corpus_mod.load_corpus(args.corpus)
        stats = evalkit.build_stats(collection)
        for qid, text in queries.items():
            run[qid] = evalkit.bm25_search(collection, text, stats, args.k)
        tag = "bm25"
    else:
        if not (args.index and args.model and args.vocab):
            raise ValueError("model search requires --index, --model and --vocab")
        idx = index_mod.deserialize(args.index)
        model = EncoderModel.load(args.model)
        vocab = corpus_mod.Vocabulary.load(args.vocab)
        _, echo_mode = _variant_of(args, model)
        for qid, text in queries.items():
            rep = trainer.encode_texts(model, vocab, [text], echo_mode=echo_mode)[0]
            run[qid] = index_mod.search(idx, rep, args.k)
        tag = f"csplade-{args.variant}"
    index_mod.write_run(args.out, run, tag=tag)
    write_manifest(str(args.out) + ".manifest.json", "search", args, [args.out])
    return 0


def cmd_eval(args):
    run = index_mod.read_run(args.run)
    qrels = corpus_mod.load_qrels(args.qrels)
    evalkit.metrics_csv(args.out, run, qrels, args.k)
    write_manifest(str(args.out) + ".manifest.json", "eval", args, [args.out])
    return 0


def cmd_bench(args):
    model = EncoderModel.load(args.model)
    vocab = corpus_mod.Vocabulary.load(args.vocab)
    _, echo_mode = _variant_of(args, model)
    queries = corpus_mod.load_queries(args.queries)
    seqs = [trainer.prepare_sequence(t, vocab, model.cfg, echo_mode)
            for t in queries.values()]
    configs = [
        ("fp32", None),
        ("int8", quant.QuantConfig(bits=8, granularity=quant.PER_CHANNEL)),
        ("int4", quant.QuantConfig(bits=4, granularity=quant.GROUPWISE,
                                   group_size=args.group_size)),
    ]
    rows = [quant.CSV_HEADER]
    for name, qcfg in configs:
        target = model if qcfg is None else quant.quantize_weights(model, qcfg)
        report = quant.bench_encode(target, seqs, batch_size=args.batch,
                                    warmup_iters=args.warmup,
                                    measure_iters=args.iters, config_name=name)
        rows.append(report.csv_row())
        print(rows[-1])
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(rows) + "\n")
    write_manifest(str(args.out) + ".manifest.json", "bench", args, [args.out])
    return 0


def _add_variant(p):
    p.add_argument("--variant", choices=sorted(VARIANTS), default="causal",
                   help="attention/input variant: causal, echo or bi")


def build_parser():
    parser = argparse.ArgumentParser(prog="csplade",
                                     description="desk-scale learned sparse retrieval")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate the synthetic mismatch benchmark")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--docs", type=int, default=1000)
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--base-vocab", type=int, default=120)
    p.add_argument("--synonym-pairs", type=int, default=40)
    p.add_argument("--doc-len-min", type=int, default=8)
    p.add_argument("--doc-len-max", type=int, default=16)
    p.add_argument("--hard-negs", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("adapt", help="adaptation-phase training on unlabeled text")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", help="optional checkpoint to continue from")
    p.add_argument("--vocab", help="existing vocabulary file to reuse")
    p.add_argument("--vocab-out", help="where to write the vocabulary (default <out>.vocab.txt)")
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--max-seq-len", type=int, default=64)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--warmup", type=int, default=20)
    p.add_argument("--lambda-relu", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.add_argument("--out", required=True)
    _add_variant(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("train", help="contrastive training with hard negatives")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--triples", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--hard-negs", type=int, default=3)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--warmup-fraction", type=float, default=0.05)
    p.add_argument("--lambda-q", type=float, default=0.003)
    p.add_argument("--lambda-d", type=float, default=0.003)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.add_argument("--out", required=True)
    _add_variant(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a TSV collection into sparse reps")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    _add_variant(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("index", help="build the impact-quantized inverted index")
    p.add_argument("--reps", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--bits", type=int, default=8, choices=(0, 8, 16))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="run queries against an index (or BM25)")
    p.add_argument("--queries", required=True)
    p.add_argument("--index")
    p.add_argument("--model")
    p.add_argument("--vocab")
    p.add_argument("--bm25", action="store_true")
    p.add_argument("--corpus", help="corpus TSV (required for --bm25)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True)
    _add_variant(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="score a TREC run against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="encoding latency across fp32/int8/int4")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--group-size", type=int, default=32)
    p.add_argument("--out", required=True)
    _add_variant(p)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # data/contract errors -> exit 1, one line
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
