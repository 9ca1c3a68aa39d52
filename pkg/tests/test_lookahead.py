from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inferlab.lookahead import LookaheadConfig, greedy_decode, init_state, lookahead_decode, lookahead_step


def test_zero_tokens(params):
    res = lookahead_decode(params, [1, 2, 3], 0, LookaheadConfig())
    assert res.tokens == [] and res.steps == 0


def test_one_token_is_one_step(params):
    res = lookahead_decode(params, [1, 2, 3], 1, LookaheadConfig())
    assert res.tokens == greedy_decode(params, [1, 2, 3], 1) and res.steps == 1


def test_minimal_configuration_is_lossless(params):
    prompt = [5, 9, 2]
    res = lookahead_decode(params, prompt, 30, LookaheadConfig(n=2, l=1, g=1))
    assert res.tokens == greedy_decode(params, prompt, 30)


@settings(max_examples=15)
@given(n=st.integers(2, 5), l=st.integers(1, 6), g=st.integers(1, 4), seed=st.integers(0, 1000),
       prompt=st.lists(st.integers(0, 63), min_size=1, max_size=8))
def test_lossless_against_greedy(params, n, l, g, seed, prompt):
    res = lookahead_decode(params, prompt, 24, LookaheadConfig(n, l, g), seed=seed)
    assert res.tokens == greedy_decode(params, prompt, 24)
    assert sum(k * v for k, v in res.accept_histogram.items()) + res.steps == 24


def test_length_limits(params):
    with pytest.raises(ValueError):
        lookahead_decode(params, [], 3, LookaheadConfig())
    with pytest.raises(ValueError):
        lookahead_decode(params, [1] * 500, 13, LookaheadConfig())
    with pytest.raises(ValueError):
        LookaheadConfig(n=1)


def _seeded(params, prompt, ngram, cfg):
    state = init_state(params, prompt, cfg)
    state.pool = {ngram[0]: OrderedDict({tuple(ngram): None})}
    return state


def test_full_acceptance_commits_n_tokens(params):
    cfg = LookaheadConfig(n=4, l=3, g=2)
    prompt = [7, 3, 11]
    future = greedy_decode(params, prompt, 6)
    state = _seeded(params, prompt, [prompt[-1]] + future[:3], cfg)
    assert lookahead_step(params, state, cfg) == 4
    assert state.generated == future[:4] and state.history == [3]


def test_partial_acceptance(params):
    cfg = LookaheadConfig(n=4, l=3, g=2)
    prompt = [7, 3, 11]
    future = greedy_decode(params, prompt, 6)
    wrong = (future[1] + 1) % 64
    state = _seeded(params, prompt, [prompt[-1], future[0], wrong, future[2]], cfg)
    assert lookahead_step(params, state, cfg) == 2
    assert state.generated == future[:2]


def test_pool_hygiene(params):
    cfg = LookaheadConfig(n=3, l=4, g=2, pool_capacity=3)
    state = init_state(params, [1, 2, 3, 4], cfg, seed=5)
    for _ in range(20):
        lookahead_step(params, state, cfg)
        for first, bucket in state.pool.items():
            assert len(bucket) <= 3
            assert all(len(g) == 3 and g[0] == first for g in bucket)
    assert state.window.shape == (2, 4)
    assert state.cache.length == len(state.committed) - 1


def test_max_new_truncates(params):
    cfg = LookaheadConfig(n=4, l=3, g=2)
    prompt = [7, 3, 11]
    future = greedy_decode(params, prompt, 6)
    state = _seeded(params, prompt, [prompt[-1]] + future[:3], cfg)
    assert lookahead_step(params, state, cfg, max_new=2) == 2
    assert state.cache.length == len(state.committed) - 1


def test_compression_on_repetitive_model(params):
    res = lookahead_decode(params, [1, 2, 3, 4], 120, LookaheadConfig())
    assert res.mean_accept >= 1.0
    assert np.isclose(res.mean_accept, 120 / res.steps)
