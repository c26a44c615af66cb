"""Command-line entry points.

Commands: make-oracle, train, sample, eval-nll, eval-bleu. Data goes to
stdout, diagnostics to stderr, and the exit code is 0 exactly when the
command completed. A train run writes a manifest recording the inputs
(config snapshot, corpus checksums, seed) and the checksums of every
artifact it produced, so a rerun from the same inputs can be checked for
bitwise reproduction.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from .adversarial import TrainError, Trainer
from .config import ConfigError, TrainingConfig, config_to_text, load_config
from .corpus import CorpusError, Vocab, load_corpus, save_corpus
from .generator import GeneratorError
from .metrics import BleuSpec, MetricsError, corpus_bleu
from .oracle import OracleError, generate_synthetic, make_oracle, oracle_nll
from .ranker import RankerError
from .rollout import RolloutError

_USER_ERRORS = (ConfigError, CorpusError, ck.CheckpointError, TrainError,
                OracleError, GeneratorError, RankerError, MetricsError,
                RolloutError, OSError)

MANIFEST_VERSION = 1


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_cfg(args) -> TrainingConfig:
    cfg = load_config(args.config) if args.config else TrainingConfig()
    if getattr(args, "mode", None):
        cfg = dataclasses.replace(cfg, mode=args.mode)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg.validate()


def _write_manifest(path, cfg: TrainingConfig, inputs: dict, artifacts: dict):
    lines = [f"manifest_version={MANIFEST_VERSION}",
             f"checkpoint_format={ck.FORMAT_VERSION}",
             f"seed={cfg.seed}"]
    lines += [f"input {name} {p} {_sha256(p)}" for name, p in inputs.items()]
    lines.append("[config]")
    lines.append(config_to_text(cfg).rstrip("\n"))
    lines.append("[artifacts]")
    lines += [f"artifact {name} {p.name} {_sha256(p)}"
              for name, p in sorted(artifacts.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- commands -----------------------------------------------------------------


def cmd_make_oracle(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    oracle = make_oracle(cfg.oracle_vocab, d_e=cfg.oracle_d_e,
                         d_h=cfg.oracle_d_h, seed=cfg.seed,
                         init_std=cfg.oracle_init_std)
    corpus = generate_synthetic(oracle, cfg.synth_count, cfg.fixed_len,
                                seed=cfg.seed)
    ck.save_generator(out / "oracle.ckpt", oracle)
    corpus.vocab.save(out / "vocab.txt")
    save_corpus(corpus, out / "synthetic.txt")
    artifacts = {name: out / name
                 for name in ("oracle.ckpt", "vocab.txt", "synthetic.txt")}
    _write_manifest(out / "oracle_manifest.txt", cfg, {}, artifacts)
    print(f"wrote {cfg.synth_count} sequences of length {cfg.fixed_len}, "
          f"vocabulary {cfg.oracle_vocab}, to {out}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    vocab = Vocab.load(args.vocab)
    corpus = load_corpus(args.corpus, vocab, cfg.fixed_len)
    oracle = None
    if args.oracle:
        oracle = ck.load_generator(args.oracle)
    out = Path(args.out_dir)
    trainer = Trainer(cfg, corpus, oracle=oracle, out_dir=out,
                      threads=args.threads,
                      progress=lambda msg: print(msg, file=sys.stderr))
    log = trainer.run(resume=args.resume)
    inputs = {"corpus": args.corpus, "vocab": args.vocab}
    if args.oracle:
        inputs["oracle"] = args.oracle
    artifacts = {p.name: p for p in sorted(out.iterdir())
                 if p.is_file() and p.name != "manifest.txt"}
    _write_manifest(out / "manifest.txt", cfg, inputs, artifacts)
    if oracle is not None:
        print(f"final,nll_per_seq,{log.final_nll()!r}")
    print(f"run complete: {len(log)} log rows in {out / 'runlog.csv'}",
          file=sys.stderr)
    return 0


def cmd_sample(args) -> int:
    gen = ck.load_generator(args.checkpoint)
    vocab = Vocab.load(args.vocab)
    if vocab.size != gen.vocab_size:
        raise CorpusError(
            f"vocabulary size {vocab.size} does not match checkpoint "
            f"vocabulary {gen.vocab_size}")
    if args.count > 0:
        rng = np.random.default_rng(
            np.random.SeedSequence([args.seed or 0, 91]))
        ids = gen.sample_batch(args.count, args.length, rng)
        from .corpus import TokenSeq

        for row in ids:
            seq = TokenSeq(tuple(int(t) for t in row), args.length)
            print(vocab.decode(seq))
    return 0


def cmd_eval_nll(args) -> int:
    oracle = ck.load_generator(args.oracle)
    gen = ck.load_generator(args.checkpoint)
    est = oracle_nll(oracle, gen, n_samples=args.n_samples,
                     fixed_len=args.length, seed=args.seed or 0)
    print("metric,value")
    print(f"nll_per_sequence,{est.per_sequence!r}")
    print(f"nll_per_token,{est.per_token!r}")
    print(f"std_err,{est.std_err!r}")
    print(f"n_samples,{est.n_samples}")
    return 0


def cmd_eval_bleu(args) -> int:
    vocab = Vocab.load(args.vocab)
    candidates = load_corpus(args.candidates, vocab, args.length)
    references = load_corpus(args.references, vocab, args.length)
    print("order,score")
    for order in range(1, args.max_n + 1):
        spec = BleuSpec(max_n=order, cumulative=not args.single_order)
        score = corpus_bleu(candidates, references, spec)
        print(f"{order},{score!r}")
    return 0


# -- argument wiring -----------------------------------------------------------


def _add_common(p, out_dir=False):
    p.add_argument("--config", help="path to a key = value config file")
    p.add_argument("--seed", type=int, default=None,
                   help="master seed (overrides the config)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads for rollouts and evaluation")
    if out_dir:
        p.add_argument("--out-dir", default=".", help="artifact directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rankgen",
        description="Train and evaluate sequence generators against "
                    "ranking, classifier, and BLEU adversaries.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-oracle",
                       help="create the frozen oracle and its synthetic corpus")
    _add_common(p, out_dir=True)
    p.set_defaults(fn=cmd_make_oracle)

    p = sub.add_parser("train", help="run a training configuration")
    _add_common(p, out_dir=True)
    p.add_argument("--corpus", required=True, help="training corpus text file")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--oracle", help="oracle checkpoint for NLL logging")
    p.add_argument("--mode", choices=("rankgan", "binary", "pg_bleu",
                                      "mle_only"),
                   help="objective (overrides the config)")
    p.add_argument("--resume", action="store_true",
                   help="continue from the latest checkpoint in --out-dir")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="print sampled sentences")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--length", type=int, default=20)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval-nll",
                       help="oracle NLL of a generator's samples, as CSV")
    _add_common(p)
    p.add_argument("--checkpoint", required=True,
                   help="generator to evaluate")
    p.add_argument("--oracle", required=True, help="oracle checkpoint")
    p.add_argument("--n-samples", type=int, default=2000)
    p.add_argument("--length", type=int, default=20)
    p.set_defaults(fn=cmd_eval_nll)

    p = sub.add_parser("eval-bleu",
                       help="corpus BLEU of candidates vs references, as CSV")
    _add_common(p)
    p.add_argument("--candidates", required=True, help="candidate corpus file")
    p.add_argument("--references", required=True, help="reference corpus file")
    p.add_argument("--vocab", required=True)
    p.add_argument("--length", type=int, default=20)
    p.add_argument("--max-n", type=int, default=2, choices=(1, 2, 3, 4),
                   help="highest n-gram order to report")
    p.add_argument("--single-order", action="store_true",
                   help="report each order's precision alone, not cumulative")
    p.set_defaults(fn=cmd_eval_bleu)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
