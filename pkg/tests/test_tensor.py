import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from attncache.tensor import ShapeError, matmul, rms_norm, rotary_embed, rope_angles, softmax_rows
from tests.oracles import scalar

finite = st.floats(-4, 4, width=32, allow_nan=False)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 12), st.data())
def test_matmul_matches_triple_loop(n, k, m, data):
    a = data.draw(hnp.arrays(np.float32, (n, k), elements=finite))
    b = data.draw(hnp.arrays(np.float32, (k, m), elements=finite))
    ref = np.array(scalar.matmul(a.tolist(), b.tolist()))
    np.testing.assert_allclose(matmul(a, b), ref, atol=1e-5, rtol=1e-6)


def test_matmul_256_against_rank_one_accumulation(rng):
    a = rng.standard_normal((256, 256)).astype(np.float32)
    b = rng.standard_normal((256, 256)).astype(np.float32)
    acc = np.zeros((256, 256))
    for t in range(256):
        acc += np.outer(a[:, t].astype(np.float64), b[t].astype(np.float64))
    assert np.abs(matmul(a, b) - acc).max() <= 1e-5 * max(1.0, np.abs(acc).max())


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.data())
def test_transpose_identity(n, k, m, data):
    a = data.draw(hnp.arrays(np.float32, (n, k), elements=finite))
    b = data.draw(hnp.arrays(np.float32, (k, m), elements=finite))
    assert np.array_equal(matmul(a, b).T, matmul(b.T, a.T))


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        matmul(np.ones(3), np.ones((3, 1)))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=3, max_side=10), elements=st.floats(-30, 30, width=32)),
       st.booleans())
def test_softmax_rows_sum_to_one(x, causal):
    if causal and x.shape[-1] < x.shape[-2]:
        x = x[..., : x.shape[-1], :]
    s = softmax_rows(x, causal_mask=causal)
    np.testing.assert_allclose(s.astype(np.float64).sum(-1), 1.0, atol=1e-6)
    assert (s >= 0).all()


def test_causal_mask_zeroes_future():
    s = softmax_rows(np.random.default_rng(0).standard_normal((6, 6)), causal_mask=True)
    assert np.all(np.triu(s, 1) == 0)
    assert s[0, 0] == 1.0


def test_rms_norm_unit_rms():
    x = np.array([[3.0, 4.0, 0.0, 0.0]], dtype=np.float32)
    out = rms_norm(x, np.ones(4))
    np.testing.assert_allclose(out, [[1.2, 1.6, 0.0, 0.0]], rtol=1e-5)
    ref = scalar.rms_norm([3.0, 4.0, 0.0, 0.0], [1.0] * 4)
    np.testing.assert_allclose(out[0], ref, rtol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 12), st.sampled_from([2, 4, 8, 16]), st.data())
def test_rotary_preserves_pair_norms(heads, seq, dk, data):
    q = data.draw(hnp.arrays(np.float32, (heads, seq, dk), elements=finite))
    rq, rk = rotary_embed(q, q.copy(), np.arange(seq))
    before = q.astype(np.float64)[..., 0::2] ** 2 + q.astype(np.float64)[..., 1::2] ** 2
    after = rq.astype(np.float64)[..., 0::2] ** 2 + rq.astype(np.float64)[..., 1::2] ** 2
    np.testing.assert_allclose(after, before, rtol=1e-5, atol=1e-5)


def test_rotary_matches_scalar_rotation(rng):
    q = rng.standard_normal((1, 5, 8)).astype(np.float32)
    rq, _ = rotary_embed(q, q, np.arange(5))
    for t in range(5):
        np.testing.assert_allclose(rq[0, t], scalar.rotate(q[0, t].tolist(), t), atol=1e-6)


def test_rotary_position_zero_is_identity(rng):
    q = rng.standard_normal((2, 1, 6)).astype(np.float32)
    rq, _ = rotary_embed(q, q, [0])
    assert np.array_equal(rq, q)


def test_rotary_odd_head_dim_rejected():
    with pytest.raises(ShapeError):
        rope_angles(np.arange(3), 5)
    with pytest.raises(ShapeError):
        rotary_embed(np.ones((1, 3, 5)), np.ones((1, 3, 5)), np.arange(3))
