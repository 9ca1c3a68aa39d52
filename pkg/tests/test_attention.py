import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from inferlab.attention import (attention_stats, backward_flops, flash_attention, flash_attention_backward,
                                naive_attention, naive_attention_backward, recompute_probs)


def triple_loop(q, k, v):
    n, d = q.shape
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        s = [sum(q[i, a] * k[j, a] for a in range(d)) / np.sqrt(d) for j in range(n)]
        m = max(s)
        e = [np.exp(x - m) for x in s]
        z = sum(e)
        for j in range(n):
            out[i] += e[j] / z * v[j]
    return out


def test_naive_matches_triple_loop(rng):
    q, k, v = (rng.normal(size=(16, 8)) for _ in range(3))
    assert np.abs(naive_attention(q, k, v) - triple_loop(q, k, v)).max() <= 1e-10


def test_naive_degenerate_cases(rng):
    v = rng.normal(size=(1, 3))
    assert np.allclose(naive_attention(rng.normal(size=(1, 2)), rng.normal(size=(1, 2)), v), v)
    v = rng.normal(size=(5, 3))
    out = naive_attention(np.zeros((5, 4)), rng.normal(size=(5, 4)), v)
    assert np.allclose(out, v.mean(0))


def test_shape_errors(rng):
    with pytest.raises(ValueError):
        naive_attention(rng.normal(size=(3, 4)), rng.normal(size=(3, 5)), rng.normal(size=(3, 2)))
    with pytest.raises(ValueError):
        flash_attention(rng.normal(size=(3, 4)), rng.normal(size=(4, 4)), rng.normal(size=(3, 2)))


@given(n=st.integers(1, 64), d=st.integers(1, 32), br=st.integers(1, 70), bc=st.integers(1, 70),
       causal=st.booleans(), seed=st.integers(0, 2 ** 16))
def test_flash_equals_naive(n, d, br, bc, causal, seed):
    r = np.random.default_rng(seed)
    q, k, v = r.normal(size=(n, d)), r.normal(size=(n, d)), r.normal(size=(n, d))
    ref = naive_attention(q, k, v, causal)
    assert np.abs(flash_attention(q, k, v, causal, br, bc) - ref).max() <= 1e-10
    o32 = flash_attention(q.astype(np.float32), k.astype(np.float32), v.astype(np.float32), causal, br, bc)
    assert o32.dtype == np.float32 and np.abs(o32 - ref).max() <= 1e-5


def test_single_block_is_tight(rng):
    q, k, v = (rng.normal(size=(20, 6)) for _ in range(3))
    assert np.abs(flash_attention(q, k, v, False, 20, 20) - naive_attention(q, k, v)).max() <= 1e-12


def test_ragged_tail_case(rng):
    q, k, v = (rng.normal(size=(33, 8)) for _ in range(3))
    assert np.abs(flash_attention(q, k, v, True, 8, 8) - naive_attention(q, k, v, True)).max() <= 1e-5


def test_causal_single_row(rng):
    v = rng.normal(size=(1, 4))
    assert np.allclose(flash_attention(rng.normal(size=(1, 3)), rng.normal(size=(1, 3)), v, True), v)


def test_causal_future_values_ignored(rng):
    q, k, v = (rng.normal(size=(12, 4)) for _ in range(3))
    v2 = v.copy()
    v2[7:] = 0
    a, b = flash_attention(q, k, v, True, 5, 3), flash_attention(q, k, v2, True, 5, 3)
    assert np.array_equal(a[:7], b[:7])


def test_permutation_equivariance(rng):
    q, k, v = (rng.normal(size=(10, 4)) for _ in range(3))
    perm = rng.permutation(10)
    assert np.abs(flash_attention(q, k[perm], v[perm], False, 3, 4) - flash_attention(q, k, v, False, 3, 4)).max() \
        <= 1e-10


def test_recompute_probs_and_backward(rng):
    for causal in (False, True):
        q, k, v = (rng.normal(size=(19, 5)) for _ in range(3))
        out, m, l = flash_attention(q, k, v, causal, 4, 6, return_stats=True)
        _, p = naive_attention(q, k, v, causal, return_probs=True)
        rp = recompute_probs(q, k, m, l, causal, 4, 6)
        assert np.abs(rp - p).max() <= 1e-12 and np.allclose(rp.sum(1), 1, atol=1e-8)
        d_out = rng.normal(size=out.shape)
        for a, b in zip(flash_attention_backward(q, k, v, out, d_out, m, l, causal, 4, 6),
                        naive_attention_backward(q, k, v, d_out, causal)):
            assert np.abs(a - b).max() <= 1e-10


def test_naive_backward_finite_differences(rng):
    q, k, v = (rng.normal(size=(6, 3)) for _ in range(3))
    d_out = rng.normal(size=(6, 3))
    dq, dk, dv = naive_attention_backward(q, k, v, d_out, True)
    h = 1e-6
    for arr, grad in ((q, dq), (k, dk), (v, dv)):
        for idx in [(0, 0), (3, 1), (5, 2)]:
            orig = arr[idx]
            arr[idx] = orig + h
            fp = (naive_attention(q, k, v, True) * d_out).sum()
            arr[idx] = orig - h
            fm = (naive_attention(q, k, v, True) * d_out).sum()
            arr[idx] = orig
            assert (fp - fm) / (2 * h) == pytest.approx(grad[idx], rel=1e-5, abs=1e-8)


def test_io_model():
    one = attention_stats(1, 8)
    assert one["naive"].sp_traffic == 0 and one["blockwise"].sp_traffic == 0
    a, b = attention_stats(512, 64), attention_stats(1024, 64)
    assert b["naive"].sp_traffic == 4 * a["naive"].sp_traffic
    big = attention_stats(1024, 64, block_rows=64, block_cols=64)
    total = lambda s: s.hbm_reads + s.hbm_writes
    assert total(big["blockwise"]) < total(big["naive"])
    assert backward_flops(128, 16, recompute=True) > backward_flops(128, 16, recompute=False)
