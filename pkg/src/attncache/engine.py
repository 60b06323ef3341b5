"""Database building, map retrieval and cache-gated inference.

Modes understood by `infer`:

``baseline``     plain prefill, every map computed
``attncache``    one search before layer 0; on a hit every layer reuses the
                 retrieved record's maps
``attncache_f``  a search per layer against per-layer databases
``lazyformer``   fixed sub-blocks; the first layer of each computes the map
``san``          calibrated sub-blocks chosen by Jensen-Shannon divergence
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .amstore import AttnStore
from .model import (
    ATTENTION_STAGES, FFN, AttnCache, InputEmbedding, ModelWeights, Profiler,
    encode, forward_capture, forward_layers, sentence_embedding,
)
from .projector import (
    FEATURE_DIM, FeatureProjector, TrainConfig, TrainingPair, attention_label, pool, project, train,
)
from .vecindex import VectorIndex

log = logging.getLogger(__name__)

MODES = ("baseline", "attncache", "attncache_f", "lazyformer", "san")

# extra timing stages recorded by the engine
ENCODE = "encode"
SEARCH_EMBED = "search_embed"  # pooling + feature projection
VECTOR_SEARCH = "vector_search"
APM_FETCH = "apm_fetch"


@dataclass
class EngineConfig:
    threshold: float = 0.99
    alpha: float = 0.2
    feature_dim: int = FEATURE_DIM
    top_k: int = 1
    mode: str = "attncache"
    subblock: int = 2
    san_js_threshold: float = 0.05
    san_calibration: int = 32
    index_mode: str = "flat"
    pair_factor: int = 4
    epochs: int = 100
    lr: float = 1e-2
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must lie in (0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.subblock < 1:
            raise ValueError("subblock must be >= 1")
        if self.san_js_threshold < 0:
            raise ValueError("san_js_threshold must be >= 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")

    def train_config(self, seed_offset: int = 0) -> TrainConfig:
        return TrainConfig(alpha=self.alpha, lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                           seed=self.seed + seed_offset, feature_dim=self.feature_dim)


class HitStats:
    """Thread-safe N/M counter; ``raw`` counts similarity hits before length gating."""

    def __init__(self):
        self.n = 0
        self.m = 0
        self.raw = 0
        self._lock = threading.Lock()

    def record(self, hit: bool, raw_hit: bool | None = None) -> None:
        with self._lock:
            self.n += 1
            self.m += int(hit)
            self.raw += int(hit if raw_hit is None else raw_hit)

    def merge(self, other: "HitStats") -> None:
        with self._lock:
            self.n += other.n
            self.m += other.m
            self.raw += other.raw

    @property
    def hit_rate(self) -> float:
        return self.m / self.n if self.n else 0.0

    @property
    def raw_hit_rate(self) -> float:
        return self.raw / self.n if self.n else 0.0


@dataclass
class LayerDatabases:
    """Per-layer indexes and projectors for fine-grained (per-layer) reuse."""

    indexes: list[VectorIndex]
    projectors: list[FeatureProjector]


@dataclass
class Databases:
    index: VectorIndex
    store: AttnStore
    projector: FeatureProjector
    layerwise: LayerDatabases | None = None

    def close(self) -> None:
        self.store.close()


@dataclass
class SearchResult:
    cache: AttnCache | None
    h: InputEmbedding
    record_id: int | None = None
    sim: float = 0.0
    raw_hit: bool = False

    @property
    def hit(self) -> bool:
        return self.cache is not None


@dataclass
class InferResult:
    embedding: np.ndarray
    hit: bool
    timings: dict[str, float]
    profiler: Profiler
    raw_hit: bool = False
    layer_hits: list[bool] = field(default_factory=list)


# ------------------------------------------------------------------ helpers


def js_divergence(p, q, tol: float = 1e-6) -> float:
    """Jensen-Shannon divergence (natural log) of two probability vectors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("p and q must be 1-D vectors of equal length")
    if np.any(p < 0) or np.any(q < 0) or abs(p.sum() - 1) > tol or abs(q.sum() - 1) > tol:
        raise ValueError("p and q must be non-negative and sum to 1")
    return float(_js_rows(p[None, :], q[None, :])[0])


def _js_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    m = 0.5 * (p + q)
    with np.errstate(divide="ignore", invalid="ignore"):
        kp = np.where(p > 0, p * np.log(p / m), 0.0)
        kq = np.where(q > 0, q * np.log(q / m), 0.0)
    return 0.5 * kp.sum(axis=-1) + 0.5 * kq.sum(axis=-1)


def mean_row_js(a: np.ndarray, b: np.ndarray) -> float:
    """Mean JS divergence between matching rows of two ``(heads, L, L)`` maps."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(_js_rows(a.reshape(-1, a.shape[-1]), b.reshape(-1, b.shape[-1])).mean())


def _training_pairs(n: int, pair_factor: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    pairs = [(i, i) for i in range(n)]
    if n > 1:
        for _ in range(pair_factor * n):
            i, j = rng.choice(n, size=2, replace=False)
            pairs.append((int(i), int(j)))
    return pairs


def _capture_inputs(h: InputEmbedding, weights: ModelWeights):
    """Forward pass that also returns each layer's (normalized) input."""
    inputs: list[np.ndarray] = []

    def record(li, x, used):
        inputs.append(x)
        return None

    hid, used = forward_layers(h, weights, record)
    return hid, np.stack(used), inputs


# ------------------------------------------------------------------ building


def build_databases(corpus: Sequence[Sequence[int]], weights: ModelWeights, cfg: EngineConfig,
                    store_path, layerwise: bool = False) -> Databases:
    """Capture maps, train the projector, fill the vector index and the map store.

    Sentence ``i`` of ``corpus`` gets record id ``i`` in both databases.
    """
    if len(corpus) == 0:
        raise ValueError("corpus must not be empty")
    c = weights.config
    store = AttnStore.create(store_path, c.num_layers, c.num_heads)
    pooled: list[np.ndarray] = []
    layer_pooled: list[list[np.ndarray]] = [[] for _ in range(c.num_layers)]
    for rid, ids in enumerate(corpus):
        h = encode(ids, weights)
        if layerwise:
            _, maps, inputs = _capture_inputs(h, weights)
            for li, x in enumerate(inputs):
                layer_pooled[li].append(pool(x, c.max_seq_len))
        else:
            _, rec = forward_capture(h, weights)
            maps = rec.maps
        store.put_record(rid, maps)
        pooled.append(pool(h, c.max_seq_len))
    store.flush()

    views = [store.get_maps(rid) for rid in range(len(corpus))]
    rng = np.random.default_rng(cfg.seed)
    pair_ids = _training_pairs(len(corpus), cfg.pair_factor, rng)

    def fit(features, layer, include_length, seed_offset):
        pairs = [
            TrainingPair(features[i], features[j],
                         0.0 if i == j else attention_label(views[i].maps, views[j].maps, cfg.alpha,
                                                            layer=layer, include_length=include_length))
            for i, j in pair_ids
        ]
        return train(pairs, cfg.train_config(seed_offset))

    projector = fit(pooled, 0, True, 0)
    index = VectorIndex(projector.feature_dim, cfg.index_mode)
    index.add_many(range(len(corpus)), np.stack([project(x, projector) for x in pooled]))

    lw = None
    if layerwise:
        projs, idxs = [], []
        for li in range(c.num_layers):
            p = fit(layer_pooled[li], li, False, li + 1)
            ix = VectorIndex(p.feature_dim, cfg.index_mode)
            ix.add_many(range(len(corpus)), np.stack([project(x, p) for x in layer_pooled[li]]))
            projs.append(p)
            idxs.append(ix)
        lw = LayerDatabases(idxs, projs)
    del views
    return Databases(index, store, projector, lw)


def empty_databases(weights: ModelWeights, store_path, feature_dim: int = FEATURE_DIM,
                    layerwise: bool = False, seed: int = 0) -> Databases:
    """Databases with untrained projectors and no records; every search misses."""
    c = weights.config
    store = AttnStore.create(store_path, c.num_layers, c.num_heads)
    proj = FeatureProjector.init(c.hidden_dim + 1, feature_dim=feature_dim, seed=seed)
    lw = None
    if layerwise:
        lw = LayerDatabases([VectorIndex(feature_dim) for _ in range(c.num_layers)],
                            [FeatureProjector.init(c.hidden_dim + 1, feature_dim=feature_dim, seed=seed + 1 + i)
                             for i in range(c.num_layers)])
    return Databases(VectorIndex(feature_dim), store, proj, lw)


# ------------------------------------------------------------------ search + inference


def search_engine(ids: Sequence[int], theta: float, dbs: Databases, weights: ModelWeights,
                  profiler: Profiler | None = None) -> SearchResult:
    """Encode, project, take the top-1 neighbour and fetch its maps on a gated hit."""
    prof = profiler or Profiler()
    with prof.stage(ENCODE):
        h = encode(ids, weights)
    if len(dbs.index) == 0:
        return SearchResult(None, h)
    with prof.stage(SEARCH_EMBED):
        f = project(pool(h, weights.config.max_seq_len), dbs.projector)
    with prof.stage(VECTOR_SEARCH):
        best = dbs.index.search(f, k=1)[0]
    raw_hit = best.sim >= theta
    if not raw_hit or dbs.store.entry(best.id).seq_len != h.seq_len:
        return SearchResult(None, h, best.id, best.sim, raw_hit)
    with prof.stage(APM_FETCH):
        view = dbs.store.get_maps(best.id, weights.config.num_layers)
    return SearchResult(AttnCache(best.id, view), h, best.id, best.sim, True)


def _timings(prof: Profiler, total: float) -> dict[str, float]:
    t = {s: 0.0 for s in (ENCODE, SEARCH_EMBED, VECTOR_SEARCH, APM_FETCH, *ATTENTION_STAGES, FFN)}
    t.update(prof.seconds)
    t["search"] = prof.stage_seconds((SEARCH_EMBED, VECTOR_SEARCH))
    t["fetch"] = prof.seconds.get(APM_FETCH, 0.0)
    t["attention"] = prof.stage_seconds(ATTENTION_STAGES)
    t["ffn"] = prof.seconds.get(FFN, 0.0)
    t["total"] = total
    return t


def infer(ids: Sequence[int], cfg: EngineConfig, dbs: Databases | None, weights: ModelWeights,
          san_plan: "SANPlan | None" = None) -> InferResult:
    """Sentence embedding for ``ids`` under ``cfg.mode`` with per-stage timings."""
    prof = Profiler()
    t0 = time.perf_counter()
    hit = raw_hit = False
    layer_hits: list[bool] = []
    if cfg.mode == "attncache":
        if dbs is None:
            raise ValueError("attncache mode needs databases")
        res = search_engine(ids, cfg.threshold, dbs, weights, prof)
        hit, raw_hit = res.hit, res.raw_hit
        policy = None
        if res.cache is not None:
            maps = res.cache.maps
            policy = lambda li, x, used: maps[li]  # noqa: E731
        hid, _ = forward_layers(res.h, weights, policy, prof)
    else:
        with prof.stage(ENCODE):
            h = encode(ids, weights)
        if cfg.mode == "baseline":
            hid, _ = forward_layers(h, weights, None, prof)
        elif cfg.mode == "lazyformer":
            hid, _ = forward_layers(h, weights, lazyformer_policy(cfg.subblock), prof)
        elif cfg.mode == "san":
            if san_plan is None:
                raise ValueError("san mode needs a calibrated SANPlan")
            hid, _ = forward_layers(h, weights, san_plan.policy(), prof)
        else:
            if dbs is None or dbs.layerwise is None:
                raise ValueError("attncache_f mode needs per-layer databases")
            policy = LayerwisePolicy(dbs, weights, cfg.threshold, h.seq_len, prof)
            hid, _ = forward_layers(h, weights, policy, prof)
            layer_hits = policy.hits
            hit = any(layer_hits)
            raw_hit = any(policy.raw_hits)
    emb = sentence_embedding(hid)
    return InferResult(emb, hit, _timings(prof, time.perf_counter() - t0), prof, raw_hit, layer_hits)


def lazyformer_policy(subblock: int):
    if subblock < 1:
        raise ValueError("subblock must be >= 1")

    def policy(li, x, used):
        return used[li - 1] if li % subblock else None

    return policy


def infer_lazyformer(ids: Sequence[int], weights: ModelWeights, subblock: int = 2,
                     profiler: Profiler | None = None) -> np.ndarray:
    h = encode(ids, weights, profiler)
    hid, _ = forward_layers(h, weights, lazyformer_policy(subblock), profiler)
    return sentence_embedding(hid)


@dataclass
class SANPlan:
    """Per-layer reuse decision fixed after calibration; layer 0 always computes."""

    reuse: tuple[bool, ...]
    mean_js: tuple[float, ...]
    js_threshold: float

    def policy(self):
        reuse = self.reuse

        def policy(li, x, used):
            return used[li - 1] if reuse[li] else None

        return policy


def calibrate_san(calibration: Sequence[Sequence[int]], weights: ModelWeights,
                  js_threshold: float) -> SANPlan:
    """Reuse layer l-1's map at layer l when their mean row JS divergence is below the threshold."""
    if js_threshold < 0:
        raise ValueError("js_threshold must be >= 0")
    n = weights.config.num_layers
    totals = np.zeros(n)
    for ids in calibration:
        _, rec = forward_capture(encode(ids, weights), weights)
        for li in range(1, n):
            totals[li] += mean_row_js(rec.maps[li], rec.maps[li - 1])
    mean_js = totals / max(len(calibration), 1)
    reuse = tuple(bool(li > 0 and len(calibration) > 0 and mean_js[li] < js_threshold) for li in range(n))
    return SANPlan(reuse, tuple(float(v) for v in mean_js), js_threshold)


def infer_san(ids: Sequence[int], weights: ModelWeights, plan: SANPlan,
              profiler: Profiler | None = None) -> np.ndarray:
    h = encode(ids, weights, profiler)
    hid, _ = forward_layers(h, weights, plan.policy(), profiler)
    return sentence_embedding(hid)


class LayerwisePolicy:
    """Per-layer search: embed the layer input, query that layer's index, reuse on a gated hit."""

    def __init__(self, dbs: Databases, weights: ModelWeights, theta: float, seq_len: int,
                 profiler: Profiler):
        self.dbs = dbs
        self.lw = dbs.layerwise
        self.max_seq_len = weights.config.max_seq_len
        self.theta = theta
        self.seq_len = seq_len
        self.prof = profiler
        self.hits: list[bool] = []
        self.raw_hits: list[bool] = []
        self.sources: list[int | None] = []

    def __call__(self, li, x, used):
        index = self.lw.indexes[li]
        if len(index) == 0:
            self.hits.append(False)
            self.raw_hits.append(False)
            self.sources.append(None)
            return None
        with self.prof.stage(SEARCH_EMBED):
            f = project(pool(x, self.max_seq_len), self.lw.projectors[li])
        with self.prof.stage(VECTOR_SEARCH):
            best = index.search(f, k=1)[0]
        raw = best.sim >= self.theta
        ok = raw and self.dbs.store.entry(best.id).seq_len == self.seq_len
        self.raw_hits.append(raw)
        self.hits.append(ok)
        self.sources.append(best.id)
        if not ok:
            return None
        with self.prof.stage(APM_FETCH):
            return self.dbs.store.get_maps(best.id)[li]


def infer_attncache_f(ids: Sequence[int], cfg: EngineConfig, dbs: Databases,
                      weights: ModelWeights) -> InferResult:
    return infer(ids, _with_mode(cfg, "attncache_f"), dbs, weights)


def _with_mode(cfg: EngineConfig, mode: str) -> EngineConfig:
    from dataclasses import replace
    return replace(cfg, mode=mode)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return float(np.dot(a, b) / (na * nb))
