"""Test-time scaling: sample several trajectories, score each by
confidence-weighted entropy and likelihood, keep the best K, let a critic
revise them, and take a majority vote over extracted answers.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .lookahead import greedy_decode
from .model import KVCache, ModelParams, backward, extend, forward, log_softmax, prefill, softmax
from .sampling import Strategy, sample_token

log = logging.getLogger(__name__)


def token_entropy(dist) -> float:
    """Shannon entropy in nats, with 0 log 0 = 0."""
    p = np.asarray(dist, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("distribution must be non-negative and sum to 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def received_attention(attn_weights: np.ndarray) -> np.ndarray:
    """Mean attention each position receives from the queries allowed to see it."""
    t = attn_weights.shape[0]
    return attn_weights.sum(axis=0) / np.arange(t, 0, -1)


def normalized_weights(alpha, grad_norm) -> np.ndarray:
    """w_t = T * a_t g_t / sum(a g); uniform if the attribution is identically zero."""
    alpha, grad_norm = np.asarray(alpha, float), np.asarray(grad_norm, float)
    raw = alpha * grad_norm
    total = raw.sum()
    t = len(raw)
    if not total > 0:
        log.warning("zero attention-gradient attribution; using uniform weights")
        return np.ones(t)
    return t * raw / total


def importance_weights(trace, grads, prompt_len: int) -> np.ndarray:
    """Per generated token: received attention x L2 norm of its logit gradient.

    Generated token t sits at position ``prompt_len + t`` and was produced by
    the logits one position earlier.
    """
    t = len(trace.tokens) - prompt_len
    alpha = received_attention(trace.attn_weights)[prompt_len:]
    gnorm = np.linalg.norm(grads.d_logits[prompt_len - 1:prompt_len - 1 + t], axis=1)
    return normalized_weights(alpha, gnorm)


def weighted_entropy(entropy, weights) -> float:
    entropy, weights = np.asarray(entropy), np.asarray(weights)
    return float((weights * entropy).sum() / len(entropy))


def avg_logprob(logprobs) -> float:
    return float(np.mean(logprobs))


def score(h_w: float, avg_lp: float, lam: float = 0.5) -> float:
    """lam * H_w - (1 - lam) * mean log-prob; lower is better."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return lam * h_w - (1.0 - lam) * avg_lp


@dataclass
class Trajectory:
    tokens: list
    per_step_probs: np.ndarray
    per_step_entropy: np.ndarray
    logprobs: np.ndarray
    weights: np.ndarray
    weighted_entropy: float
    avg_logprob: float
    score: float
    index: int = 0
    sampled_logprobs: np.ndarray | None = None
    revised_from: int | None = None


def score_trajectory(params: ModelParams, prompt, tokens, lam: float = 0.5, index: int = 0) -> Trajectory:
    """Re-score a continuation of ``prompt`` with one forward and one backward pass."""
    prompt, tokens = [int(t) for t in prompt], [int(t) for t in tokens]
    if not tokens:
        raise ValueError("empty trajectory")
    s, t = len(prompt), len(tokens)
    seq = np.array(prompt + tokens)
    trace = forward(params, seq)
    targets = np.full(len(seq), -1)
    targets[s - 1:s + t - 1] = tokens
    grads = backward(params, trace, targets, param_grads=False)
    probs = trace.probs[s - 1:s + t - 1]
    logp = log_softmax(trace.logits[s - 1:s + t - 1])[np.arange(t), tokens]
    ent = np.array([token_entropy(p) for p in probs])
    w = importance_weights(trace, grads, s)
    hw, lp = weighted_entropy(ent, w), avg_logprob(logp)
    return Trajectory(tokens, probs, ent, logp, w, hw, lp, score(hw, lp, lam), index)


def sample_continuation(params: ModelParams, prompt, length: int, strategy: Strategy,
                        rng: np.random.Generator) -> tuple[list, np.ndarray]:
    """Stochastic decode; returns tokens and their model log-probabilities."""
    prompt = [int(t) for t in prompt]
    if len(prompt) + length > params.config.max_seq:
        raise ValueError("prompt + length exceeds max_seq")
    cache = prefill(params, prompt[:-1]) if len(prompt) > 1 else KVCache.empty(params.config)
    last, out, lps = prompt[-1], [], []
    for _ in range(length):
        logits, k, v = extend(params, cache, [[last]])
        cache = cache.append(k, v)
        row = logits[0, 0]
        last = sample_token(row, strategy, rng)
        out.append(last)
        lps.append(log_softmax(row)[last])
    return out, np.array(lps)


def sample_trajectories(params: ModelParams, prompt, n: int, strategy: Strategy, length: int = 16,
                        seed: int = 0, lam: float = 0.5) -> list[Trajectory]:
    """``n`` independent decodes, trajectory i driven by ``default_rng([seed, i])``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    trajs = []
    for i in range(n):
        toks, lps = sample_continuation(params, prompt, length, strategy, np.random.default_rng([seed, i]))
        tr = score_trajectory(params, prompt, toks, lam, index=i)
        tr.sampled_logprobs = lps
        trajs.append(tr)
    return trajs


def top_k_select(trajectories: list[Trajectory], k: int) -> list[Trajectory]:
    if k > len(trajectories):
        raise ValueError(f"K={k} exceeds the {len(trajectories)} trajectories")
    return sorted(trajectories, key=lambda t: (t.score, t.index))[:k]


class Critic(Protocol):
    def critique(self, trajectory: Trajectory): ...

    def revise(self, trajectory: Trajectory, critique) -> list: ...


class IdentityCritic:
    def critique(self, trajectory):
        return None

    def revise(self, trajectory, critique):
        return list(trajectory.tokens)


class GreedyResumeCritic:
    """Flags the first token whose probability is below ``threshold`` and
    re-decodes greedily from there.

    The revision is only proposed when it does not lower the trajectory's mean
    log-probability; otherwise the original tokens are returned.
    """

    def __init__(self, params: ModelParams, prompt, threshold: float = 0.5, lam: float = 0.5):
        self.params, self.prompt = params, [int(t) for t in prompt]
        self.threshold, self.lam = threshold, lam

    def critique(self, trajectory):
        low = np.flatnonzero(np.exp(trajectory.logprobs) < self.threshold)
        return int(low[0]) if len(low) else None

    def revise(self, trajectory, critique):
        if critique is None:
            return list(trajectory.tokens)
        keep = list(trajectory.tokens[:critique])
        tail = greedy_decode(self.params, self.prompt + keep, len(trajectory.tokens) - critique)
        candidate = keep + tail
        rescored = score_trajectory(self.params, self.prompt, candidate, self.lam)
        if rescored.avg_logprob >= trajectory.avg_logprob:
            return candidate
        return list(trajectory.tokens)


def reflect(params: ModelParams, prompt, trajectory: Trajectory, critic: Critic, lam: float = 0.5) -> Trajectory:
    revised = critic.revise(trajectory, critic.critique(trajectory))
    out = score_trajectory(params, prompt, revised, lam, index=trajectory.index)
    out.revised_from = trajectory.index
    return out


def extract_answer(tokens, separator: int = 0) -> tuple:
    """Tokens after the last separator; the final token when there is none."""
    tokens = list(tokens)
    idx = [i for i, t in enumerate(tokens) if t == separator]
    if idx:
        return tuple(tokens[idx[-1] + 1:])
    return tuple(tokens[-1:])


@dataclass
class ConsensusPool:
    originals: list
    revisions: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.revisions) > len(self.originals):
            raise ValueError("more revisions than originals")

    @property
    def members(self) -> list:
        return list(self.originals) + list(self.revisions)


def consensus(pool: ConsensusPool, extractor: Callable = extract_answer):
    """Most frequent answer; ties go to the answer whose members' scores sum lowest."""
    members = pool.members
    if not members:
        raise ValueError("empty consensus pool")
    answers = [extractor(m.tokens) for m in members]
    counts = Counter(answers)
    totals: dict = {}
    for a, m in zip(answers, members):
        totals[a] = totals.get(a, 0.0) + m.score
    first = {a: i for i, a in reversed(list(enumerate(answers)))}
    return min(counts, key=lambda a: (-counts[a], totals[a], first[a]))


@dataclass
class TTSResult:
    trajectories: list
    top: list
    revisions: list
    answer: tuple


def run_tts(params: ModelParams, prompt, n: int = 4, k: int = 2, lam: float = 0.5,
            strategy: Strategy = Strategy("temperature", 1.0), length: int = 16,
            critic: Critic | None = None, seed: int = 0,
            extractor: Callable = extract_answer) -> TTSResult:
    trajs = sample_trajectories(params, prompt, n, strategy, length, seed, lam)
    top = top_k_select(trajs, k)
    critic = critic or IdentityCritic()
    revs = [reflect(params, prompt, t, critic, lam) for t in top]
    return TTSResult(trajs, top, revs, consensus(ConsensusPool(top, revs), extractor))


def entropy_bound(vocab_size: int) -> float:
    return math.log(vocab_size)
