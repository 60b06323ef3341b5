"""Benchmark harness: synthetic corpora, timed runs across modes, threshold sweeps, CSV output."""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .engine import (
    APM_FETCH, ENCODE, SEARCH_EMBED, VECTOR_SEARCH, Databases, EngineConfig, HitStats, InferResult,
    build_databases, calibrate_san, cosine, infer,
)
from .model import ATTENTION_STAGES, FFN, ModelConfig, ModelWeights, tokenize

log = logging.getLogger(__name__)

SWEEP_GRID = (0.995, 0.99, 0.97, 0.95, 0.90, 0.85)
CSV_COLUMNS = ("mode", "theta", "hit_rate", "attn_ms", "e2e_ms", "attn_speedup", "e2e_speedup",
               "quality_proxy", "gamma")
THRESHOLD_MODES = ("attncache", "attncache_f")

TEMPLATES = (
    ('This sentence: "', '" means in one word:'),
    ("Question: ", " Answer in one word:"),
    ("Review: ", " The sentiment of this review is"),
    ("Summarize the following text: ", " Summary:"),
    ("Translate to French: ", " French:"),
    ('The topic of "', '" is'),
)

WORDS = (
    "the a of to and in is it you that he was for on are with as his they be at one have this from "
    "or had by hot word but what some we can out other were all there when up use your how said an "
    "each she which do their time if will way about many then them write would like so these her long "
    "make thing see him two has look more day could go come did number sound no most people my over "
    "know water than call first who may down side been now find any new work part take get place made "
    "live where after back little only round man year came show every good me give our under name very "
    "through just form sentence great think say help low line differ turn cause much mean before move "
    "right boy old too same tell does set three want air well also play small end put home read hand "
    "port large spell add even land here must big high such follow act why ask men change went light"
).split()


class UndefinedMetricError(ArithmeticError):
    """A ratio whose denominator is zero."""


@dataclass
class Corpus:
    sentences: list[list[int]]
    texts: list[str]
    families: list[int]  # template index, -1 for unrelated sentences
    seed: int
    max_seq_len: int
    min_words: int = 3
    max_words: int = 12

    def __post_init__(self):
        for s in self.sentences:
            if not 1 <= len(s) <= self.max_seq_len:
                raise ValueError(f"sentence length {len(s)} outside [1, {self.max_seq_len}]")

    def __len__(self) -> int:
        return len(self.sentences)

    def split(self, n_db: int) -> tuple["Corpus", "Corpus"]:
        def part(sl):
            return replace(self, sentences=self.sentences[sl], texts=self.texts[sl], families=self.families[sl])
        return part(slice(0, n_db)), part(slice(n_db, None))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self)))

    @classmethod
    def load(cls, path) -> "Corpus":
        return cls(**json.loads(Path(path).read_text()))


def generate_corpus(seed: int, size: int, vocab_size: int = 256, max_seq_len: int = 128,
                    min_words: int = 3, max_words: int = 12, template_fraction: float = 0.8,
                    fixed_length: int | None = None) -> Corpus:
    """Deterministic synthetic sentences.

    A ``template_fraction`` share of sentences wrap a random word string in one
    of a few fixed prompt templates; the rest are bare word strings.  With
    ``fixed_length`` every sentence is that many random tokens instead.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    if not 1 <= min_words <= max_words:
        raise ValueError("need 1 <= min_words <= max_words")
    rng = np.random.default_rng(seed)
    sentences, texts, families = [], [], []
    for _ in range(size):
        if fixed_length is not None:
            if not 1 <= fixed_length <= max_seq_len:
                raise ValueError("fixed_length must lie in [1, max_seq_len]")
            ids = rng.integers(0, vocab_size, fixed_length).tolist()
            sentences.append(ids)
            texts.append("")
            families.append(-1)
            continue
        n = int(rng.integers(min_words, max_words + 1))
        infix = " ".join(WORDS[i] for i in rng.integers(0, len(WORDS), n))
        if rng.random() < template_fraction:
            fam = int(rng.integers(0, len(TEMPLATES)))
            pre, post = TEMPLATES[fam]
            text = pre + infix + post
        else:
            fam = -1
            text = infix[0].upper() + infix[1:] + "."
        ids = tokenize(text, vocab_size)[:max_seq_len]
        sentences.append(ids)
        texts.append(text)
        families.append(fam)
    return Corpus(sentences, texts, families, seed, max_seq_len, min_words, max_words)


def gamma(avg_full: float, avg_method: float, speedup_full: float, speedup_method: float) -> float:
    """Quality lost per unit of speedup gained; averages are fractions, not percentages."""
    den = speedup_method - speedup_full
    if den == 0:
        raise UndefinedMetricError("gamma is undefined when the speedups are equal")
    return (avg_full - avg_method) / den


@dataclass
class ReportRow:
    mode: str
    theta: float | None
    hit_rate: float | None
    attn_ms: float | None
    e2e_ms: float | None
    attn_speedup: float | None
    e2e_speedup: float | None
    quality_proxy: float | None
    gamma: float | None


@dataclass
class BenchReport:
    rows: list[ReportRow]
    repeats: int
    warmup: int
    baseline_attn_ms: float | None = None
    baseline_e2e_ms: float | None = None
    # (mode, theta) -> stage -> mean per-query median ms
    stages: dict = field(default_factory=dict)
    throughput_qps: dict = field(default_factory=dict)

    def row(self, mode: str, theta: float | None = None) -> ReportRow:
        for r in self.rows:
            if r.mode == mode and (theta is None or r.theta == theta):
                return r
        raise KeyError((mode, theta))


@dataclass
class BenchConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    modes: tuple[str, ...] = ("baseline", "attncache")
    thetas: tuple[float, ...] = (0.99,)
    repeats: int = 5
    warmup: int = 1
    parallel_queries: int = 1
    weight_seed: int = 0

    def __post_init__(self):
        if self.repeats < 1 or self.warmup < 0:
            raise ValueError("repeats must be >= 1 and warmup >= 0")


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if not isinstance(v, str) else v


def emit_csv(report: BenchReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in report.rows:
            w.writerow([r.mode] + [_fmt(getattr(r, c)) for c in CSV_COLUMNS[1:]])


def parse_csv(path) -> list[ReportRow]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [ReportRow(r["mode"], *[float(r[c]) if r[c] != "" else None for c in CSV_COLUMNS[1:]])
            for r in rows]


def _stage_summary(runs: list[InferResult]) -> dict[str, float]:
    """Median over repetitions of every stage, in ms."""
    keys = set().union(*(r.timings for r in runs))
    return {k: 1e3 * statistics.median(r.timings.get(k, 0.0) for r in runs) for k in keys}


def _time_mode(queries, cfg: EngineConfig, dbs, weights, plan, repeats, warmup, parallel):
    """Per-query medians averaged over queries; also hit stats and embeddings."""
    stats = HitStats()

    def one(ids):
        for _ in range(warmup):
            infer(ids, cfg, dbs, weights, plan)
        runs = [infer(ids, cfg, dbs, weights, plan) for _ in range(repeats)]
        stats.record(runs[-1].hit, runs[-1].raw_hit)
        return _stage_summary(runs), runs[-1].embedding

    t0 = time.perf_counter()
    if parallel > 1:
        with ThreadPoolExecutor(parallel) as pool:
            results = list(pool.map(one, queries))
    else:
        results = [one(q) for q in queries]
    wall = time.perf_counter() - t0
    keys = set().union(*(r[0] for r in results))
    stages = {k: statistics.fmean(r[0].get(k, 0.0) for r in results) for k in keys}
    qps = len(queries) * (warmup + repeats) / wall
    return stages, [r[1] for r in results], stats, qps


def run_experiment(cfg: BenchConfig, db_corpus: Sequence[Sequence[int]], query_corpus: Sequence[Sequence[int]],
                   data_dir, weights: ModelWeights | None = None) -> BenchReport:
    """Build databases on ``db_corpus`` and time every mode on ``query_corpus``.

    Timings are per-query medians over ``repeats`` runs after ``warmup``
    discarded runs, averaged across queries.  Speedups are relative to the
    baseline mode; the quality proxy is the mean cosine to baseline embeddings.
    """
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    weights = weights or ModelWeights.random(cfg.model, cfg.weight_seed)
    modes = list(dict.fromkeys(("baseline", *cfg.modes)))
    dbs: Databases | None = None
    if any(m in THRESHOLD_MODES for m in modes):
        dbs = build_databases(db_corpus, weights, cfg.engine, data_dir / "store.acam",
                              layerwise="attncache_f" in modes)
    plan = None
    if "san" in modes:
        plan = calibrate_san(list(db_corpus)[:cfg.engine.san_calibration], weights, cfg.engine.san_js_threshold)
        log.info("SAN plan: reuse=%s mean_js=%s", plan.reuse, plan.mean_js)

    report = BenchReport([], cfg.repeats, cfg.warmup)
    base_emb = None
    try:
        for mode in modes:
            thetas = cfg.thetas if mode in THRESHOLD_MODES else (None,)
            for theta in thetas:
                ecfg = replace(cfg.engine, mode=mode, threshold=theta if theta is not None else cfg.engine.threshold)
                stages, embs, stats, qps = _time_mode(query_corpus, ecfg, dbs, weights, plan, cfg.repeats,
                                                      cfg.warmup, cfg.parallel_queries)
                attn, e2e = stages.get("attention", 0.0), stages.get("total", 0.0)
                if mode == "baseline":
                    base_emb = embs
                    report.baseline_attn_ms, report.baseline_e2e_ms = attn, e2e
                quality = statistics.fmean(cosine(a, b) for a, b in zip(embs, base_emb))
                a_sp = report.baseline_attn_ms / attn if attn > 0 else None
                e_sp = report.baseline_e2e_ms / e2e if e2e > 0 else None
                try:
                    g = gamma(1.0, quality, 1.0, e_sp) if e_sp is not None else None
                except UndefinedMetricError:
                    g = None
                hit = stats.hit_rate if mode in THRESHOLD_MODES else None
                report.rows.append(ReportRow(mode, theta, hit, attn, e2e, a_sp, e_sp, quality, g))
                report.stages[(mode, theta)] = stages
                report.throughput_qps[(mode, theta)] = qps
                log.info("%s theta=%s hit=%s attn=%.3fms e2e=%.3fms", mode, theta, hit, attn, e2e)
    finally:
        if dbs is not None:
            dbs.close()
    return report


@dataclass
class SweepPoint:
    mode: str
    theta: float
    stats: HitStats
    quality: float


def sweep_threshold(dbs: Databases, queries: Sequence[Sequence[int]], weights: ModelWeights,
                    cfg: EngineConfig, thetas: Sequence[float] = SWEEP_GRID,
                    modes: Sequence[str] = ("attncache",)) -> list[SweepPoint]:
    """Hit rate and mean cosine to baseline for every threshold in ``thetas``."""
    for t in thetas:
        if not 0 < t <= 1:
            raise ValueError(f"threshold {t} outside (0, 1]")
    base_cfg = replace(cfg, mode="baseline")
    base = [infer(q, base_cfg, None, weights).embedding for q in queries]
    out = []
    for mode in modes:
        for t in thetas:
            ecfg = replace(cfg, mode=mode, threshold=t)
            stats = HitStats()
            cos = []
            for q, b in zip(queries, base):
                r = infer(q, ecfg, dbs, weights)
                stats.record(r.hit, r.raw_hit)
                cos.append(cosine(r.embedding, b))
            out.append(SweepPoint(mode, t, stats, statistics.fmean(cos)))
    return out


def sweep_report(points: Sequence[SweepPoint]) -> BenchReport:
    rows = [ReportRow(p.mode, p.theta, p.stats.hit_rate, None, None, None, None, p.quality, None) for p in points]
    return BenchReport(rows, repeats=0, warmup=0)


def stage_table(report: BenchReport) -> str:
    """Plain-text per-stage breakdown (ms per query) for every measured mode."""
    order = (ENCODE, SEARCH_EMBED, VECTOR_SEARCH, APM_FETCH, *ATTENTION_STAGES, FFN, "attention", "total")
    cols = list(report.stages)
    head = ["stage"] + [f"{m}" + (f"@{t}" if t is not None else "") for m, t in cols]
    lines = ["  ".join(f"{h:>16}" for h in head)]
    for s in order:
        vals = [report.stages[c].get(s, 0.0) for c in cols]
        lines.append("  ".join([f"{s:>16}"] + [f"{v:16.4f}" for v in vals]))
    return "\n".join(lines)
