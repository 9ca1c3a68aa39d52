import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from inferlab import weights
from inferlab.harness.acceptance import gradient_errors
from inferlab.model import (Gates, KVCache, ModelConfig, backward, decode_step, extend, forward, gqa_head_map,
                            init_params, nll_logit_grad, nll_loss, prefill, softmax)
from inferlab.sampling import Strategy, greedy, sample_token, sampling_distribution


def test_init_is_deterministic_and_seed_sensitive():
    a = weights.dumps(init_params(ModelConfig(seed=42)))
    assert a == weights.dumps(init_params(ModelConfig(seed=42)))
    assert a != weights.dumps(init_params(ModelConfig(seed=43)))


@pytest.mark.parametrize("kw", [dict(num_q_heads=8, num_kv_heads=3, d_model=32), dict(vocab_size=1),
                                dict(d_model=30), dict(num_layers=0)])
def test_invalid_config_rejected(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_gqa_head_map():
    assert [gqa_head_map(i, 1) for i in range(5)] == list(range(5))
    assert [gqa_head_map(i, 4) for i in range(8)] == [0, 0, 0, 0, 1, 1, 1, 1]
    with pytest.raises(ValueError):
        gqa_head_map(0, 0)


def test_params_are_immutable(params):
    with pytest.raises(ValueError):
        params["tok_emb"][0, 0] = 1.0


def test_single_token_attends_to_itself(params):
    tr = forward(params, [5])
    assert tr.attn_weights.shape == (1, 1) and tr.attn_weights[0, 0] == pytest.approx(1.0)


def test_trace_invariants(params, rng):
    tr = forward(params, rng.integers(0, 64, 20))
    assert np.allclose(tr.probs.sum(1), 1, atol=1e-6) and np.all(tr.probs >= 0)
    assert np.all(np.triu(tr.attn_weights, 1) == 0)
    assert len(tr.ffn_activations) == 2 and tr.ffn_activations[0].shape == (20, 64)
    assert tr.residual_outputs[1].shape == (20, 32)


def test_flash_forward_matches_naive(params, rng):
    x = rng.integers(0, 64, 37)
    a, b = forward(params, x), forward(params, x, attention="flash", block=8)
    assert np.abs(a.logits - b.logits).max() <= 1e-10
    assert np.abs(a.attn_weights - b.attn_weights).max() <= 1e-10


def test_input_errors(params):
    with pytest.raises(ValueError):
        forward(params, [64])
    with pytest.raises(ValueError):
        forward(params, np.zeros(513, dtype=int))
    with pytest.raises(ValueError):
        forward(params, [])


def test_causality(params, rng):
    x = rng.integers(0, 64, 16)
    y = x.copy()
    y[9] = (y[9] + 1) % 64
    a, b = forward(params, x).logits, forward(params, y).logits
    assert np.array_equal(a[:9], b[:9]) and not np.allclose(a[9:], b[9:])


def test_nll_matches_logsumexp_oracle(params, rng):
    x, y = rng.integers(0, 64, 12), rng.integers(0, 64, 12)
    tr = forward(params, x)
    oracle = sum(math.log(sum(math.exp(v) for v in row)) - row[t] for row, t in zip(tr.logits.tolist(), y))
    assert nll_loss(tr, y) == pytest.approx(oracle, abs=1e-8)
    with pytest.raises(ValueError):
        nll_loss(tr, y[:-1])


def test_uniform_model_loss_and_grad():
    cfg = ModelConfig(vocab_size=4, d_model=8, num_q_heads=2, num_kv_heads=1, d_ff=4, max_seq=8)
    p = init_params(cfg)
    p = p.replace_tensors({"unembed": np.zeros((8, 4))})
    tr = forward(p, [1, 2, 3])
    assert nll_loss(tr, [0, 0, 0]) == pytest.approx(3 * math.log(4))
    assert np.allclose(nll_logit_grad(tr, [0, 0, 0])[0], [-0.75, 0.25, 0.25, 0.25])


def test_logit_grad_rows_sum_to_zero(params, rng):
    tr = forward(params, rng.integers(0, 64, 10))
    assert np.abs(nll_logit_grad(tr, rng.integers(0, 64, 10)).sum(1)).max() <= 1e-8


def test_gradients_match_finite_differences():
    for seed in (0, 1):
        assert max(gradient_errors(seed).values()) <= 1e-4


def test_backward_rejects_foreign_trace(params, tiny):
    tr = forward(tiny, [1, 2])
    with pytest.raises(ValueError):
        backward(params, tr, [1, 2])


def test_all_one_gates_are_bitwise_identity(params, rng):
    x = rng.integers(0, 64, 9)
    assert np.array_equal(forward(params, x).logits, forward(params, x, Gates.ones(params)).logits)


def test_extend_and_decode_step_match_forward(params, rng):
    x = rng.integers(0, 64, 20)
    full = forward(params, x).logits
    cache = prefill(params, x[:12])
    logits, _, _ = extend(params, cache, x[None, 12:])
    assert np.abs(logits[0] - full[12:]).max() <= 1e-12
    ks, vs = [[] for _ in range(2)], [[] for _ in range(2)]

    def attend(layer, q, k, v):
        ks[layer].append(k)
        vs[layer].append(v)
        kk, vv = np.stack(ks[layer]), np.stack(vs[layer])
        return np.stack([softmax(kk[:, i // 2] @ q[i] / 2 ** 1.5) @ vv[:, i // 2] for i in range(4)])
    out = [decode_step(params, int(t), i, attend) for i, t in enumerate(x)]
    assert np.abs(np.array(out) - full).max() <= 1e-12


def test_kvcache_empty_extend(params):
    logits, k, v = extend(params, KVCache.empty(params.config), [[3, 4]])
    assert np.abs(logits[0] - forward(params, [3, 4]).logits).max() <= 1e-12


def test_weights_round_trip(tmp_path, params):
    path = tmp_path / "w.bin"
    weights.save(params, path)
    back = weights.load(path)
    assert back.config == params.config
    assert all(np.array_equal(back[n], params[n]) for n in params.names())
    assert weights.dumps(back) == weights.dumps(params)
    with pytest.raises(ValueError):
        weights.loads(b"garbage" + bytes(20))


# -- sampling ---------------------------------------------------------------

def test_greedy_lowest_index_tie_break():
    assert greedy([0.1, 2.0, 2.0]) == 1


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=30))
def test_top1_is_greedy(logits):
    assert sample_token(logits, Strategy("top_k", 1), np.random.default_rng(0)) == greedy(logits)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=20), st.floats(0.05, 1.0))
def test_nucleus_distribution_is_normalized_and_truncated(logits, p):
    d = sampling_distribution(logits, Strategy("nucleus", p))
    assert abs(d.sum() - 1) < 1e-12
    kept = softmax(np.array(logits))[d > 0].sum()
    assert kept >= p - 1e-9


def test_nucleus_one_frequencies_match_softmax():
    logits = np.array([0.5, -1.0, 2.0, 0.0, 1.0])
    p = softmax(logits)
    rng = np.random.default_rng(7)
    n = 100_000
    counts = np.bincount([sample_token(logits, Strategy("nucleus", 1.0), rng) for _ in range(n)], minlength=5)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


@pytest.mark.parametrize("bad", [("top_k", 0), ("nucleus", 0.0), ("nucleus", 1.5), ("temperature", 0), ("beam", 1)])
def test_bad_strategies(bad):
    with pytest.raises(ValueError):
        Strategy(*bad)


def test_non_finite_logits_rejected():
    with pytest.raises(ValueError):
        sampling_distribution([0.0, np.inf], Strategy("temperature", 1.0))
