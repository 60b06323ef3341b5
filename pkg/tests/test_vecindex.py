import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attncache.errors import FormatError
from attncache.vecindex import VectorIndex, VectorIndexError
from tests.oracles import scalar


def test_flat_matches_brute_force(rng):
    vecs = rng.standard_normal((1000, 16)).astype(np.float32)
    ids = rng.permutation(5000)[:1000]
    idx = VectorIndex(16)
    idx.add_many(ids, vecs)
    for q in rng.standard_normal((20, 16)).astype(np.float32):
        best = idx.search(q)[0]
        ref_id, ref_d2 = scalar.brute_force_nearest(vecs.tolist(), ids.tolist(), q.tolist())
        assert best.id == ref_id
        assert best.distance == pytest.approx(np.sqrt(ref_d2), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(1, 8), st.integers(0, 2**31))
def test_flat_results_sorted_with_id_tiebreak(n, k, seed):
    rng = np.random.default_rng(seed)
    # few distinct values so that ties are common
    vecs = rng.integers(0, 3, (n, 3)).astype(np.float32)
    idx = VectorIndex(3)
    idx.add_many(rng.permutation(10 * n)[:n], vecs)
    hits = idx.search(rng.integers(0, 3, 3), k=k)
    assert len(hits) == min(k, n)
    keys = [(h.distance, h.id) for h in hits]
    assert keys == sorted(keys)
    for h in hits:
        assert h.sim == pytest.approx(1 / (1 + h.distance))


def test_exact_tie_goes_to_lower_id():
    idx = VectorIndex(2)
    idx.add_many([9, 4, 7], [[1, 0], [0, 1], [-1, 0]])
    assert idx.search([0, 0])[0].id == 4
    assert [h.id for h in idx.search([0, 0], k=3)] == [4, 7, 9]


def test_self_query_is_distance_zero(rng):
    vecs = rng.standard_normal((50, 8)).astype(np.float32)
    for mode in ("flat", "graph"):
        idx = VectorIndex(8, mode)
        idx.add_many(range(50), vecs)
        for i in (0, 17, 49):
            hit = idx.search(vecs[i])[0]
            assert (hit.id, hit.distance, hit.sim) == (i, 0.0, 1.0)


def test_errors():
    idx = VectorIndex(4)
    with pytest.raises(VectorIndexError):
        idx.search(np.zeros(4))
    idx.add(1, np.zeros(4))
    with pytest.raises(VectorIndexError):
        idx.add(1, np.ones(4))
    with pytest.raises(VectorIndexError):
        idx.add(2, np.ones(3))
    with pytest.raises(VectorIndexError):
        idx.search(np.zeros(5))
    with pytest.raises(VectorIndexError):
        idx.add_many([3, 3], np.ones((2, 4)))
    with pytest.raises(VectorIndexError):
        idx.add(4, [np.nan, 0, 0, 0])
    with pytest.raises(ValueError):
        VectorIndex(4, mode="tree")


def test_graph_recall_small(rng):
    vecs = rng.standard_normal((3000, 32)).astype(np.float32)
    flat, graph = VectorIndex(32), VectorIndex(32, "graph")
    flat.add_many(range(3000), vecs)
    for start in range(0, 3000, 1000):  # incremental inserts
        graph.add_many(range(start, start + 1000), vecs[start:start + 1000])
    qs = rng.standard_normal((200, 32)).astype(np.float32)
    recall = np.mean([graph.search(q)[0].id == flat.search(q)[0].id for q in qs])
    assert recall >= 0.95


def test_graph_concurrent_search(rng):
    vecs = rng.standard_normal((2000, 16)).astype(np.float32)
    graph = VectorIndex(16, "graph")
    graph.add_many(range(2000), vecs)
    qs = rng.standard_normal((64, 16)).astype(np.float32)
    expected = [graph.search(q)[0].id for q in qs]
    got = [None] * 64

    def work(lo):
        for i in range(lo, 64, 4):
            got[i] = graph.search(qs[i])[0].id

    threads = [threading.Thread(target=work, args=(t,)) for t in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert got == expected


def test_round_trip(tmp_path, rng):
    vecs = rng.standard_normal((30, 6)).astype(np.float32)
    idx = VectorIndex(6, "graph")
    idx.add_many(range(100, 130), vecs)
    p = tmp_path / "i.acvi"
    idx.save(p)
    raw = p.read_bytes()
    assert raw[:4] == b"ACVI" and len(raw) == 24 + 30 * (8 + 6 * 4)
    back = VectorIndex.load(p)
    assert back.mode == "graph" and len(back) == 30
    assert np.array_equal(back.vectors, idx.vectors)
    assert np.array_equal(back.ids, idx.ids)
    q = rng.standard_normal(6)
    assert back.search(q, 3) == idx.search(q, 3)
    p.write_bytes(b"ACVX" + raw[4:])
    with pytest.raises(FormatError):
        VectorIndex.load(p)
    p.write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        VectorIndex.load(p)
