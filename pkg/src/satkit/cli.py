"""Command line surface: train, decode, plot-lattice, bench, lm-train,
gen-data, eval-cer.

Every command is reproducible from its flags plus the seed; artifacts are
byte-identical across runs (timing output aside). Errors print to stderr and
exit nonzero.
"""

import argparse
import os
import sys
from dataclasses import asdict

import numpy as np

from . import bench as bench_mod
from . import ngram
from .data import (SIL, TaskSpec, generate_split, load_dataset,
                   normalize_dataset, read_token_file, save_dataset,
                   stack_downsample, write_token_file)
from .decode import (DecodeConfig, beam_decode, corpus_cer, greedy_trace,
                     stream_decode)
from .kernels import BACKEND
from .model import ModelConfig, SATModel
from .nnet import ChunkSpec
from .train import TrainConfig, Trainer
from .vocab import BLANK, Vocab


def _add_model_flags(p):
    p.add_argument("--model-config", help="model config file (key = value)")
    for key in ("feature-dim", "d-m", "n-heads", "d-ff", "n-enc-blocks",
                "n-pred-blocks", "d-joint", "vocab-size"):
        p.add_argument(f"--{key}", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--combine", choices=("concat", "add"))
    p.add_argument("--chunk-left")
    p.add_argument("--chunk-right")


def _model_config(args) -> ModelConfig:
    """Config file first, long-form flags override individual keys."""
    cfg = ModelConfig.load(args.model_config) if args.model_config else ModelConfig()
    for key in ("feature_dim", "d_m", "n_heads", "d_ff", "n_enc_blocks",
                "n_pred_blocks", "d_joint", "vocab_size", "dropout", "combine",
                "chunk_left", "chunk_right"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    return cfg


def _load_split(data_dir, split, scope):
    utts = load_dataset(f"{data_dir}/{split}")
    utts.sort(key=lambda u: u.utt_id)
    if scope != "none":
        normalize_dataset(utts, scope=scope)
    return utts


def _check_data_fit(cfg: ModelConfig, vocab: Vocab, utts):
    if cfg.vocab_size != vocab.size:
        raise ValueError(f"model config vocab_size {cfg.vocab_size} but the "
                         f"vocab file has {vocab.size} entries")
    dim = utts[0].feats.shape[1]
    if cfg.feature_dim != dim:
        raise ValueError(f"model config feature_dim {cfg.feature_dim} but the "
                         f"data has {dim}-dim features")


def cmd_gen_data(args) -> int:
    spec = TaskSpec(kind=args.task, vocab_size=args.vocab_size,
                    feature_dim=args.feature_dim, min_tokens=args.min_tokens,
                    max_tokens=args.max_tokens, noise=args.noise,
                    seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    spec.vocab().save(f"{args.out}/vocab.txt")
    counts = {"train": args.n_train, "dev": args.n_dev, "test": args.n_test}
    for split, n in counts.items():
        utts = generate_split(spec, n, split)
        save_dataset(f"{args.out}/{split}", utts)
        print(f"{split}: {n} utterances")
    with open(f"{args.out}/task.txt", "w", encoding="utf-8") as f:
        for k, v in asdict(spec).items():
            f.write(f"{k} = {v}\n")
    return 0


def cmd_train(args) -> int:
    vocab = Vocab.load(f"{args.data}/vocab.txt")
    train_utts = _load_split(args.data, "train", args.normalize)
    dev_utts = _load_split(args.data, "dev", args.normalize)
    os.makedirs(args.out, exist_ok=True)
    metrics = args.metrics or f"{args.out}/metrics.csv"
    run_meta = {k: v for k, v in vars(args).items() if k != "func"}
    if args.resume:
        trainer = Trainer.resume(args.resume, vocab, train_utts, dev_utts,
                                 metrics_path=metrics)
    else:
        mcfg = _model_config(args)
        _check_data_fit(mcfg, vocab, train_utts)
        model = SATModel(mcfg, seed=args.seed)
        tcfg = TrainConfig(
            epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
            optimizer=args.optimizer, lr=args.lr, momentum=args.momentum,
            halving_patience=args.halving_patience, min_lr=args.min_lr,
            lr_factor=args.lr_factor, warmup_steps=args.warmup_steps,
            adaptive=not args.plain_noam, beta=args.beta,
            detach_weight=not args.no_detach_weight,
            labels_only=args.labels_only, shuffle=not args.no_shuffle)
        trainer = Trainer(model, vocab, train_utts, dev_utts, tcfg,
                          metrics_path=metrics)
        trainer.model.config.save(f"{args.out}/model.config")
    already = len(trainer.history)
    history = trainer.run(checkpoint_dir=args.out, run_meta=run_meta)
    for h in history[already:]:
        print(f"epoch {h['epoch']}: joint {h['joint_loss']:.6f} "
              f"dev CER {h['dev_cer']:.4f}")
    return 0


def _decode_one(model, vocab, utt, cfg: DecodeConfig, chunk, lm):
    mc = model.config
    if cfg.mode == "streaming":
        emitted = [k for _, k in stream_decode(model, utt.feats, cfg,
                                               stack_left=mc.stack_left,
                                               stack_right=mc.stack_right,
                                               factor=mc.factor)]
        return [vocab.string(emitted)], None
    stacked = stack_downsample(utt.feats, mc.stack_left, mc.stack_right,
                               mc.factor)
    hyps = beam_decode(model, stacked, lm=lm, vocab=vocab, cfg=cfg, chunk=chunk)
    best = vocab.string(list(hyps[0].prefix))
    nbest = [(h.combined(cfg.lm_weight), vocab.string(list(h.prefix)))
             for h in hyps]
    return [best], nbest


def cmd_decode(args) -> int:
    model, _, _ = SATModel.load(args.checkpoint)
    vocab = Vocab.load(f"{args.data}/vocab.txt")
    if model.config.vocab_size != vocab.size:
        raise ValueError(f"checkpoint vocab_size {model.config.vocab_size} "
                         f"but the vocab file has {vocab.size} entries")
    utts = _load_split(args.data, args.split, args.normalize)
    chunk = None
    if args.chunk_left is not None or args.chunk_right is not None:
        if args.chunk_left is None or args.chunk_right is None:
            raise ValueError("a chunk override needs both --chunk-left and "
                             "--chunk-right")
        chunk = ChunkSpec.parse(args.chunk_left, args.chunk_right)
    lm = ngram.NgramModel.load(args.lm) if args.lm else None
    cfg = DecodeConfig(beam_width=args.beam_width, lm_weight=args.lm_weight,
                       max_symbols_per_frame=args.max_symbols, mode=args.mode,
                       chunk=chunk)
    hyp_entries = []
    nbest_lines = []
    refs = []
    hyps = []
    for u in utts:
        (best,), nbest = _decode_one(model, vocab, u, cfg, chunk, lm)
        hyp_entries.append((u.utt_id, best))
        refs.append(u.targets)
        hyps.append(best)
        if nbest and args.nbest > 1:
            for rank, (score, toks) in enumerate(nbest[:args.nbest], 1):
                nbest_lines.append(
                    f"{u.utt_id} {rank} {score:.10g} {' '.join(toks)}")
    write_token_file(args.out, hyp_entries)
    if nbest_lines:
        with open(args.out + ".nbest", "w", encoding="utf-8") as f:
            f.write("\n".join(nbest_lines) + "\n")
    if any(r for r in refs):
        print(f"corpus CER {corpus_cer(refs, hyps):.6f}")
    return 0


def cmd_eval_cer(args) -> int:
    refs = read_token_file(args.ref)
    hyps = read_token_file(args.hyp)
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise ValueError(f"hypothesis file is missing {len(missing)} "
                         f"utterances, first {missing[0]!r}")
    ids = sorted(refs)
    value = corpus_cer([refs[i] for i in ids], [hyps[i] for i in ids])
    print(f"corpus CER {value:.6f}")
    return 0


def cmd_lm_train(args) -> int:
    corpus = []
    with open(args.text, encoding="utf-8") as f:
        for line in f:
            toks = line.split()
            if args.skip_utt_ids:
                toks = toks[1:]
            if toks:
                corpus.append(toks)
    model = ngram.train(corpus, order=args.order, discount=args.discount)
    model.save(args.out)
    print(f"order {model.order}, {len(model.vocab)} token types, "
          f"train perplexity {model.perplexity(corpus):.4f}")
    return 0


def cmd_plot_lattice(args) -> int:
    model, _, _ = SATModel.load(args.checkpoint)
    vocab = Vocab.load(f"{args.data}/vocab.txt")
    utts = _load_split(args.data, args.split, args.normalize)
    matches = [u for u in utts if u.utt_id == args.utt]
    if not matches:
        raise ValueError(f"utterance {args.utt!r} not in {args.data}/{args.split}")
    u = matches[0]
    mc = model.config
    stacked = stack_downsample(u.feats, mc.stack_left, mc.stack_right, mc.factor)
    labels, _, trace = greedy_trace(model, stacked)
    if args.full_vocab:
        plotted = list(range(vocab.size))
    else:
        plotted = [BLANK] + sorted(set(labels))
    names = vocab.string(plotted)

    with open(args.out_prefix + ".csv", "w", encoding="utf-8") as f:
        f.write("frame,u," + ",".join(names) + "\n")
        for t, uu, lp in trace:
            probs = np.exp(lp[plotted])
            f.write(f"{t},{uu}," + ",".join(f"{p:.10g}" for p in probs) + "\n")

    t_len = stacked.shape[0]
    first = {}
    for t, uu, lp in trace:
        if t not in first:
            first[t] = np.exp(lp[plotted])
    img = np.zeros((len(plotted), t_len))
    for t in range(t_len):
        if t in first:
            img[:, t] = first[t]
    boundaries = set()
    if u.alignment:
        boundaries = {i for i, a in enumerate(u.alignment) if a != SIL}
    pixels = np.round(img * 255).astype(np.uint8)
    for t in boundaries:
        if t < t_len:
            pixels[:, t] = 255 - pixels[:, t]
    with open(args.out_prefix + ".pgm", "wb") as f:
        f.write(f"P5 {t_len} {len(plotted)} 255\n".encode("ascii"))
        f.write(pixels.tobytes())
    print(f"wrote {args.out_prefix}.csv and {args.out_prefix}.pgm "
          f"({t_len} frames x {len(plotted)} tokens); "
          f"hypothesis: {' '.join(vocab.string(labels))}")
    return 0


def cmd_bench(args) -> int:
    lengths = tuple(int(s) for s in args.lengths.split(","))
    threads = tuple(int(s) for s in args.threads.split(","))
    enc = bench_mod.run_encoder_bench(d_m=args.d_m, lengths=lengths,
                                      thread_counts=threads,
                                      repeats=args.repeats, seed=args.seed)
    lat = bench_mod.run_lattice_bench(repeats=args.repeats, seed=args.seed)
    print(f"active lattice backend: {BACKEND}")
    print(bench_mod.format_report(enc, lat))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="satkit",
        description="self-attention transducer toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic task dataset")
    p.add_argument("--task", choices=("delayed-copy", "segment-classify"),
                   default="delayed-copy")
    p.add_argument("--vocab-size", type=int, default=16)
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--min-tokens", type=int, default=3)
    p.add_argument("--max-tokens", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-dev", type=int, default=200)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True, help="dataset root (gen-data layout)")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--metrics", help="metrics CSV path (default out/metrics.csv)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--normalize", choices=("per-speaker", "per-utterance", "none"),
                   default="per-speaker")
    _add_model_flags(p)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--optimizer", choices=("sgd", "noam"), default="sgd")
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--halving-patience", type=int, default=1)
    p.add_argument("--min-lr", type=float, default=1e-6)
    p.add_argument("--lr-factor", type=float, default=0.5)
    p.add_argument("--warmup-steps", type=int, default=8000)
    p.add_argument("--plain-noam", action="store_true",
                   help="disable the adaptive moment accumulators")
    p.add_argument("--beta", type=float, default=0.0,
                   help="alignment regularizer weight")
    p.add_argument("--no-detach-weight", action="store_true")
    p.add_argument("--labels-only", action="store_true")
    p.add_argument("--no-shuffle", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--normalize", choices=("per-speaker", "per-utterance", "none"),
                   default="per-speaker")
    p.add_argument("--mode", choices=("offline", "streaming"), default="offline")
    p.add_argument("--beam-width", type=int, default=5)
    p.add_argument("--max-symbols", type=int, default=10)
    p.add_argument("--lm", help="n-gram model for shallow fusion")
    p.add_argument("--lm-weight", type=float, default=0.2)
    p.add_argument("--chunk-left", help="window override (int or inf)")
    p.add_argument("--chunk-right", help="window override (int or inf)")
    p.add_argument("--nbest", type=int, default=1)
    p.add_argument("--out", required=True, help="hypothesis file")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval-cer", help="score a hypothesis file")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.set_defaults(func=cmd_eval_cer)

    p = sub.add_parser("lm-train", help="train an n-gram model on text")
    p.add_argument("--text", required=True, help="one sentence per line")
    p.add_argument("--skip-utt-ids", action="store_true",
                   help="drop the first column (dataset text files)")
    p.add_argument("--order", type=int, default=5)
    p.add_argument("--discount", type=float, default=0.75)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lm_train)

    p = sub.add_parser("plot-lattice",
                       help="greedy posterior trace as CSV + PGM heatmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="dev")
    p.add_argument("--utt", required=True)
    p.add_argument("--normalize", choices=("per-speaker", "per-utterance", "none"),
                   default="per-speaker")
    p.add_argument("--full-vocab", action="store_true",
                   help="plot every token, not just emitted ones")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_plot_lattice)

    p = sub.add_parser("bench", help="throughput benchmarks")
    p.add_argument("--d-m", type=int, default=64)
    p.add_argument("--lengths", default="100,400,1600")
    p.add_argument("--threads", default="1,2,4")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # surface a diagnostic, not a traceback
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
