"""Command-line entry point: ``attncache <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .bench import (
    SWEEP_GRID, BenchConfig, Corpus, emit_csv, gamma, generate_corpus, run_experiment, stage_table,
    sweep_report, sweep_threshold, UndefinedMetricError,
)
from .engine import MODES, EngineConfig, build_databases
from .model import ModelConfig, ModelWeights

log = logging.getLogger("attncache")

DATA_DIR_ENV = "ATTNCACHE_DATA_DIR"


def _data_dir(args) -> Path:
    d = Path(args.data_dir or os.environ.get(DATA_DIR_ENV) or "attncache-data")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _model_config(args) -> ModelConfig:
    return ModelConfig(num_layers=args.layers, num_heads=args.heads, hidden_dim=args.dim,
                       head_dim=args.head_dim, ffn_dim=args.ffn_dim or 4 * args.dim,
                       vocab_size=args.vocab, max_seq_len=args.seq_max)


def _engine_config(args, theta=None) -> EngineConfig:
    return EngineConfig(threshold=theta if theta is not None else args.theta[0], alpha=args.alpha,
                        subblock=args.subblock, san_js_threshold=args.san_js, seed=args.seed,
                        epochs=args.epochs, index_mode=args.index)


def _weights(args, data_dir: Path) -> ModelWeights:
    if args.weights:
        return ModelWeights.load(args.weights)
    return ModelWeights.random(_model_config(args), args.seed)


def _corpus(args, data_dir: Path) -> Corpus:
    if args.corpus:
        return Corpus.load(args.corpus)
    return generate_corpus(args.seed, args.size, vocab_size=args.vocab, max_seq_len=args.seq_max,
                           fixed_length=args.fixed_length)


def _split(args, corpus: Corpus):
    """Database and query splits; ``--query-from-db`` re-queries stored sentences."""
    if args.query_from_db:
        return corpus.sentences, corpus.sentences[:args.queries or len(corpus)]
    n_q = args.queries or max(1, len(corpus) // 5)
    db, q = corpus.split(len(corpus) - n_q)
    return db.sentences, q.sentences


def cmd_gen_corpus(args) -> int:
    out = Path(args.out or _data_dir(args) / "corpus.json")
    corpus = generate_corpus(args.seed, args.size, vocab_size=args.vocab, max_seq_len=args.seq_max,
                             fixed_length=args.fixed_length)
    corpus.save(out)
    print(f"wrote {len(corpus)} sentences to {out}")
    return 0


def cmd_gen_weights(args) -> int:
    out = Path(args.out or _data_dir(args) / "weights.acwt")
    ModelWeights.random(_model_config(args), args.seed).save(out)
    print(f"wrote seeded random weights to {out}")
    return 0


def cmd_build_db(args) -> int:
    d = _data_dir(args)
    weights = _weights(args, d)
    weights.save(d / "weights.acwt")
    corpus = _corpus(args, d)
    corpus.save(d / "corpus.json")
    dbs = build_databases(corpus.sentences, weights, _engine_config(args), d / "store.acam")
    dbs.projector.save(d / "projector.acfp")
    dbs.index.save(d / "index.acvi")
    dbs.close()
    print(f"built databases for {len(corpus)} sentences in {d} "
          f"(projector loss {dbs.projector.train_loss:.6f})")
    return 0


def cmd_run(args) -> int:
    d = _data_dir(args)
    weights = _weights(args, d)
    db, queries = _split(args, _corpus(args, d))
    cfg = BenchConfig(model=weights.config, engine=_engine_config(args), modes=tuple(args.mode),
                      thetas=tuple(args.theta), repeats=args.repeats, warmup=args.warmup,
                      parallel_queries=args.parallel_queries)
    report = run_experiment(cfg, db, queries, d, weights)
    print(stage_table(report))
    for r in report.rows:
        extra = f" throughput={report.throughput_qps[(r.mode, r.theta)]:.1f} infer/s" \
            if args.parallel_queries > 1 else ""
        print(f"{r.mode:12s} theta={r.theta} hit_rate={r.hit_rate} attn_speedup={r.attn_speedup:.3f} "
              f"e2e_speedup={r.e2e_speedup:.3f} quality={r.quality_proxy:.6f}{extra}")
    if args.out:
        emit_csv(report, args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_sweep(args) -> int:
    d = _data_dir(args)
    weights = _weights(args, d)
    db, queries = _split(args, _corpus(args, d))
    modes = [m for m in args.mode if m in ("attncache", "attncache_f")] or ["attncache"]
    thetas = args.theta if args.theta_given else list(SWEEP_GRID)
    dbs = build_databases(db, weights, _engine_config(args), d / "store.acam",
                          layerwise="attncache_f" in modes)
    try:
        points = sweep_threshold(dbs, queries, weights, _engine_config(args), thetas, modes)
    finally:
        dbs.close()
    for p in points:
        print(f"{p.mode:12s} theta={p.theta:<6} hit_rate={p.stats.hit_rate:.4f} "
              f"raw_hit_rate={p.stats.raw_hit_rate:.4f} quality={p.quality:.6f}")
    if args.out:
        emit_csv(sweep_report(points), args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_gamma(args) -> int:
    try:
        g = gamma(args.avg_full, args.avg_method, args.speedup_full, args.speedup_method)
    except UndefinedMetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"{g:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--size", type=int, default=100, help="corpus size")
    common.add_argument("--layers", type=int, default=4)
    common.add_argument("--heads", type=int, default=4)
    common.add_argument("--dim", type=int, default=128, help="hidden width")
    common.add_argument("--head-dim", type=int, default=32)
    common.add_argument("--ffn-dim", type=int, default=None, help="default 4 x dim")
    common.add_argument("--vocab", type=int, default=256)
    common.add_argument("--seq-max", type=int, default=128)
    common.add_argument("--fixed-length", type=int, default=None,
                        help="generate random-token sentences of exactly this length")
    common.add_argument("--theta", type=float, nargs="+", default=None)
    common.add_argument("--alpha", type=float, default=0.2)
    common.add_argument("--mode", nargs="+", choices=MODES, default=["baseline", "attncache"])
    common.add_argument("--subblock", type=int, default=2)
    common.add_argument("--san-js", type=float, default=0.05, help="SAN reuse threshold on mean JS")
    common.add_argument("--epochs", type=int, default=100, help="projector training epochs")
    common.add_argument("--index", choices=("flat", "graph"), default="flat")
    common.add_argument("--repeats", type=int, default=5)
    common.add_argument("--warmup", type=int, default=1)
    common.add_argument("--parallel-queries", type=int, default=1,
                        help="concurrent infer calls; timings then read as throughput")
    common.add_argument("--queries", type=int, default=None, help="number of query sentences")
    common.add_argument("--query-from-db", action="store_true", help="query sentences that are in the database")
    common.add_argument("--corpus", default=None, help="corpus JSON (default: generate)")
    common.add_argument("--weights", default=None, help="weight file (default: seeded random)")
    common.add_argument("--data-dir", default=None, help=f"database directory (default ${DATA_DIR_ENV})")
    common.add_argument("--out", default=None, help="output path (CSV for run/sweep)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="attncache", description="Attention-map reuse benchmark harness")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-corpus", parents=[common], help="write a synthetic corpus").set_defaults(fn=cmd_gen_corpus)
    sub.add_parser("gen-weights", parents=[common], help="write a seeded random weight file") \
        .set_defaults(fn=cmd_gen_weights)
    sub.add_parser("build-db", parents=[common], help="build the vector index and map store") \
        .set_defaults(fn=cmd_build_db)
    sub.add_parser("run", parents=[common], help="time modes against baseline").set_defaults(fn=cmd_run)
    sub.add_parser("sweep", parents=[common], help="hit rate and quality over thresholds") \
        .set_defaults(fn=cmd_sweep)
    g = sub.add_parser("gamma", help="speedup degradation ratio",
                       description="Averages are fractions in [0, 1] (68.60%% -> 0.6860), not percentages.")
    g.add_argument("--avg-full", type=float, required=True)
    g.add_argument("--avg-method", type=float, required=True)
    g.add_argument("--speedup-full", type=float, default=1.0)
    g.add_argument("--speedup-method", type=float, required=True)
    g.set_defaults(fn=cmd_gamma)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if hasattr(args, "theta"):
        args.theta_given = args.theta is not None
        args.theta = args.theta or [0.99]
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
