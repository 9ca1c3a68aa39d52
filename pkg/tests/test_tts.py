import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from inferlab import tts
from inferlab.lookahead import greedy_decode
from inferlab.sampling import Strategy


def traj(tokens, score, index):
    z = np.zeros(len(tokens))
    return tts.Trajectory(list(tokens), z, z, z, z, 0.0, 0.0, score, index)


def test_entropy_examples():
    assert tts.token_entropy([0.25] * 4) == pytest.approx(math.log(4))
    assert tts.token_entropy([1.0, 0.0, 0.0]) == 0.0
    with pytest.raises(ValueError):
        tts.token_entropy([0.5, 0.6])


@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=20))
def test_entropy_within_bounds(raw):
    p = np.array(raw) + 1e-3
    p /= p.sum()
    assert -1e-12 <= tts.token_entropy(p) <= tts.entropy_bound(len(p)) + 1e-12


@given(st.lists(st.floats(0.01, 5.0), min_size=1, max_size=15), st.lists(st.floats(0.01, 5.0), min_size=15,
                                                                           max_size=15))
def test_weights_sum_to_length(alpha, g):
    w = tts.normalized_weights(alpha, g[:len(alpha)])
    assert np.all(w >= 0) and w.sum() == pytest.approx(len(alpha))


def test_zero_attribution_falls_back_to_uniform():
    assert np.array_equal(tts.normalized_weights([0, 0, 0], [1, 2, 3]), np.ones(3))


def test_uniform_weights_give_mean_entropy():
    assert tts.weighted_entropy([0.2, 0.4, 0.9], np.ones(3)) == pytest.approx(0.5)


def test_received_attention_uses_visible_queries():
    a = np.array([[1.0, 0, 0], [0.5, 0.5, 0], [0.2, 0.3, 0.5]])
    assert np.allclose(tts.received_attention(a), [1.7 / 3, 0.8 / 2, 0.5])


def test_score_endpoints():
    assert tts.score(2.0, -1.5, 1.0) == 2.0
    assert tts.score(2.0, -1.5, 0.0) == 1.5
    assert tts.score(2.0, -1.5, 0.5) == pytest.approx(1.75)
    with pytest.raises(ValueError):
        tts.score(1.0, -1.0, 1.5)


def test_top_k_keeps_lowest_scores():
    ts = [traj([1], s, i) for i, s in enumerate([3.0, 1.0, 2.0])]
    assert [t.index for t in tts.top_k_select(ts, 2)] == [1, 2]
    with pytest.raises(ValueError):
        tts.top_k_select(ts, 4)


def test_consensus_majority_and_tie_break():
    a, b = (0, 5), (0, 6)
    pool = tts.ConsensusPool([traj(a, 1.0, 0), traj(b, 0.5, 1), traj(a, 1.0, 2)])
    assert tts.consensus(pool) == (5,)
    tie = tts.ConsensusPool([traj(a, 2.0, 0), traj(b, 0.5, 1)])
    assert tts.consensus(tie) == (6,)
    with pytest.raises(ValueError):
        tts.consensus(tts.ConsensusPool([]))
    with pytest.raises(ValueError):
        tts.ConsensusPool([traj(a, 1, 0)], [traj(a, 1, 0), traj(a, 1, 0)])


def test_extract_answer():
    assert tts.extract_answer([3, 0, 4, 0, 7, 8]) == (7, 8)
    assert tts.extract_answer([3, 4]) == (4,)


def test_scored_trajectory_invariants(params):
    prompt = [4, 8, 15, 16]
    ts = tts.sample_trajectories(params, prompt, 6, Strategy("temperature", 1.0), length=10, seed=3)
    for t in ts:
        assert t.weights.sum() == pytest.approx(len(t.tokens))
        assert np.allclose(t.sampled_logprobs, t.logprobs, atol=1e-10)
        assert 0 <= t.weighted_entropy
        assert t.avg_logprob <= 0
        assert np.all(t.per_step_entropy <= math.log(64) + 1e-12)


def test_sampling_is_reproducible(params):
    s = Strategy("nucleus", 0.9)
    a = tts.sample_trajectories(params, [1, 2], 3, s, 8, seed=11)
    b = tts.sample_trajectories(params, [1, 2], 3, s, 8, seed=11)
    assert [t.tokens for t in a] == [t.tokens for t in b]


def test_identity_critic_changes_nothing(params):
    t = tts.score_trajectory(params, [1, 2, 3], [4, 5, 6])
    r = tts.reflect(params, [1, 2, 3], t, tts.IdentityCritic())
    assert r.tokens == t.tokens and r.score == t.score and r.revised_from == t.index


def test_greedy_resume_critic_never_lowers_likelihood(params):
    prompt = [9, 9, 1]
    ts = tts.sample_trajectories(params, prompt, 8, Strategy("temperature", 1.5), 10, seed=2)
    critic = tts.GreedyResumeCritic(params, prompt, threshold=0.5)
    for t in ts:
        r = tts.reflect(params, prompt, t, critic)
        assert r.avg_logprob >= t.avg_logprob - 1e-12
        cut = critic.critique(t)
        if cut is not None and r.tokens != t.tokens:
            assert r.tokens[:cut] == t.tokens[:cut]
            assert r.tokens[cut:] == greedy_decode(params, prompt + t.tokens[:cut], len(t.tokens) - cut)


def test_run_tts(params):
    res = tts.run_tts(params, [1, 2, 3], n=5, k=3, length=6, critic=tts.GreedyResumeCritic(params, [1, 2, 3]),
                      seed=1)
    assert len(res.trajectories) == 5 and len(res.top) == 3 and len(res.revisions) == 3
    assert max(t.score for t in res.top) <= min(t.score for t in res.trajectories
                                                       if t.index not in {u.index for u in res.top})
    answers = [tts.extract_answer(t.tokens) for t in res.top + res.revisions]
    assert res.answer in answers
