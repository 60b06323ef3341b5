import math
import threading
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attncache.bench import generate_corpus
from attncache.engine import (
    EngineConfig, HitStats, build_databases, calibrate_san, empty_databases, infer,
    infer_attncache_f, infer_lazyformer, infer_san, js_divergence, search_engine,
)
from attncache.model import ATTN_MAP, SKIPPED_ON_REUSE, Profiler, encode
from attncache.projector import pool, project
from tests.oracles import scalar

BASE = EngineConfig(mode="baseline", epochs=30)


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    from attncache.model import ModelConfig, ModelWeights
    w = ModelWeights.random(ModelConfig(num_layers=3, num_heads=2, hidden_dim=32, head_dim=16, ffn_dim=64,
                                        max_seq_len=64), seed=1)
    corpus = generate_corpus(5, 40, max_seq_len=64, max_words=8)
    db, queries = corpus.sentences[:30], corpus.sentences[30:]
    cfg = EngineConfig(epochs=30)
    dbs = build_databases(db, w, cfg, tmp_path_factory.mktemp("db") / "s.acam", layerwise=True)
    yield w, db, queries, cfg, dbs
    dbs.close()


def _baseline(ids, w):
    return infer(ids, BASE, None, w).embedding


def test_self_queries_hit_and_match_baseline(built):
    w, db, _, cfg, dbs = built
    for ids in db:
        r = infer(ids, cfg, dbs, w)
        assert r.hit
        assert r.profiler.total_flops(SKIPPED_ON_REUSE) == 0
        assert np.abs(r.embedding - _baseline(ids, w)).max() <= 1e-5


def test_threshold_one_on_unseen_misses_bitwise(built):
    w, db, queries, cfg, dbs = built
    fresh = [q for q in queries if q not in db]
    for ids in fresh:
        r = infer(ids, replace(cfg, threshold=1.0), dbs, w)
        assert not r.hit
        assert np.array_equal(r.embedding, _baseline(ids, w))


def test_hit_rate_monotone_in_threshold(built):
    w, db, queries, cfg, dbs = built
    qs = queries + db[:5]
    rates = []
    for t in (0.3, 0.5, 0.9, 0.99, 1.0):
        stats = HitStats()
        for ids in qs:
            stats.record(infer(ids, replace(cfg, threshold=t), dbs, w).hit)
        rates.append(stats.hit_rate)
    assert rates == sorted(rates, reverse=True)


def test_length_gate_blocks_mismatched_hits(built):
    w, db, _, cfg, dbs = built
    lengths = {len(s) for s in db}
    L = next(n for n in range(1, 64) if n not in lengths)
    r = search_engine(list(range(L)), 1e-9, dbs, w)
    assert r.raw_hit and not r.hit and r.cache is None
    res = infer(list(range(L)), replace(cfg, threshold=1e-9), dbs, w)
    assert res.raw_hit and not res.hit


def test_hit_implies_equal_length(built):
    w, db, queries, cfg, dbs = built
    for ids in queries + db[:5]:
        r = search_engine(ids, 0.05, dbs, w)
        if r.hit:
            assert dbs.store.entry(r.record_id).seq_len == len(ids)
            assert r.cache.seq_len == len(ids)


def test_infer_timings_present(built):
    w, db, _, cfg, dbs = built
    t = infer(db[0], cfg, dbs, w).timings
    for key in ("search", "fetch", "attention", "ffn", "total"):
        assert key in t and t[key] >= 0
    assert t["total"] >= t["attention"] + t["ffn"]


def test_lazyformer(small_weights):
    ids = list(range(3, 40))
    base = _baseline(ids, small_weights)
    assert np.array_equal(infer_lazyformer(ids, small_weights, 1), base)
    p = Profiler()
    infer_lazyformer(ids, small_weights, 2, p)
    computed = [li for li in range(3) if p.layer_flops[(li, ATTN_MAP)] > 0]
    assert computed == [0, 2]
    with pytest.raises(ValueError):
        infer_lazyformer(ids, small_weights, 0)


def test_san_zero_threshold_is_baseline(small_weights):
    calib = generate_corpus(2, 32, max_seq_len=64).sentences
    plan = calibrate_san(calib, small_weights, 0.0)
    assert plan.reuse == (False, False, False)
    ids = list(range(20))
    assert np.array_equal(infer_san(ids, small_weights, plan), _baseline(ids, small_weights))


def test_san_large_threshold_reuses_every_layer_after_first(small_weights):
    calib = generate_corpus(2, 8, max_seq_len=64).sentences
    plan = calibrate_san(calib, small_weights, math.log(2) + 1e-9)
    assert plan.reuse == (False, True, True)
    assert all(0 <= v <= math.log(2) for v in plan.mean_js)
    p = Profiler()
    infer_san(list(range(10)), small_weights, plan, p)
    assert [p.layer_flops[(li, ATTN_MAP)] > 0 for li in range(3)] == [True, False, False]


def test_attncache_f_empty_is_baseline(small_weights, tmp_path):
    dbs = empty_databases(small_weights, tmp_path / "e.acam", layerwise=True)
    ids = list(range(30))
    r = infer_attncache_f(ids, EngineConfig(), dbs, small_weights)
    assert not r.hit and r.layer_hits == [False, False, False]
    assert np.array_equal(r.embedding, _baseline(ids, small_weights))
    dbs.close()


def test_attncache_empty_databases_is_baseline(small_weights, tmp_path):
    dbs = empty_databases(small_weights, tmp_path / "e.acam")
    ids = list(range(30))
    r = infer(ids, EngineConfig(), dbs, small_weights)
    assert not r.hit and np.array_equal(r.embedding, _baseline(ids, small_weights))
    dbs.close()


def test_attncache_f_layer_hits_match_offline_recompute(built):
    w, db, queries, cfg, dbs = built
    theta = 0.5
    for ids in queries[:4] + db[:2]:
        r = infer_attncache_f(ids, replace(cfg, threshold=theta), dbs, w)
        # replay the same decisions with the per-layer databases directly
        h = encode(ids, w)
        from attncache.model import forward_layers
        expected = []

        def replay(li, x, used):
            best = dbs.layerwise.indexes[li].search(project(pool(x, w.config.max_seq_len),
                                                            dbs.layerwise.projectors[li]))[0]
            ok = best.sim >= theta and dbs.store.entry(best.id).seq_len == len(ids)
            expected.append(ok)
            return np.array(dbs.store.get_maps(best.id)[li]) if ok else None

        hid, _ = forward_layers(h, w, replay)
        assert r.layer_hits == expected
        assert np.array_equal(r.embedding, hid[-1])


def test_attncache_f_self_queries_hit_every_layer(built):
    w, db, _, cfg, dbs = built
    for ids in db[:5]:
        r = infer_attncache_f(ids, cfg, dbs, w)
        assert r.layer_hits == [True] * 3
        assert np.abs(r.embedding - _baseline(ids, w)).max() <= 1e-5


def test_js_divergence_oracle(rng):
    for _ in range(20):
        p = rng.random(12)
        q = rng.random(12)
        q[rng.integers(0, 12)] = 0
        p, q = p / p.sum(), q / q.sum()
        assert abs(js_divergence(p, q) - scalar.js(p.tolist(), q.tolist())) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=16), st.integers(0, 2**31))
def test_js_properties(raw, seed):
    p = np.array(raw) + 1e-12
    p /= p.sum()
    q = np.random.default_rng(seed).permutation(p)
    d = js_divergence(p, q)
    assert -1e-15 <= d <= math.log(2) + 1e-12
    assert d == pytest.approx(js_divergence(q, p), abs=1e-15)
    assert js_divergence(p, p) == pytest.approx(0.0, abs=1e-15)


def test_js_disjoint_support_is_ln2():
    assert js_divergence([1, 0], [0, 1]) == pytest.approx(math.log(2), abs=1e-15)


def test_js_rejects_unnormalized():
    with pytest.raises(ValueError):
        js_divergence([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ValueError):
        js_divergence([1.5, -0.5], [0.5, 0.5])
    js_divergence([0.5 + 5e-7, 0.5], [0.5, 0.5])


def test_hit_stats_threadsafe():
    stats = HitStats()

    def work():
        for i in range(1000):
            stats.record(i % 4 == 0)

    ts = [threading.Thread(target=work) for _ in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert (stats.n, stats.m, stats.hit_rate) == (4000, 1000, 0.25)
    other = HitStats()
    other.record(True)
    stats.merge(other)
    assert (stats.n, stats.m) == (4001, 1001)
    assert HitStats().hit_rate == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        EngineConfig(threshold=0)
    with pytest.raises(ValueError):
        EngineConfig(mode="nope")
    with pytest.raises(ValueError):
        EngineConfig(subblock=0)
