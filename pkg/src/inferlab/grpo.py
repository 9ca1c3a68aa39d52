"""Group relative policy optimization on the toy model.

Each prompt gets a group of G sampled outputs from a frozen snapshot of the
policy. Rewards are z-scored within the group, and the policy ascends a
per-token clipped surrogate minus a KL penalty to a fixed reference policy.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import ModelParams, backward, forward, log_softmax
from .sampling import Strategy
from .tts import sample_continuation

log = logging.getLogger(__name__)

REWARD_WEIGHTS = (0.3, 0.2, 0.5)
PROB_FLOOR = 1e-12
ADV_EPS = 1e-8


# ---------------------------------------------------------------------------
# rewards


def _lcs(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_f1(candidate, reference) -> float:
    candidate, reference = list(candidate), list(reference)
    lcs = _lcs(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return 2 * p * r / (p + r)


def length_penalty(candidate, reference) -> float:
    lc, lr = len(candidate), len(reference)
    if lr == 0:
        return 0.0
    return 0.5 * min(lc, lr) / max(lc, lr)


def bag_f1(candidate, reference) -> float:
    """Multiset token overlap F1; insensitive to order."""
    c, r = Counter(candidate), Counter(reference)
    overlap = sum((c & r).values())
    if overlap == 0:
        return 0.0
    p, rec = overlap / sum(c.values()), overlap / sum(r.values())
    return 2 * p * rec / (p + rec)


Judge = Callable[[list, list], float]


def judge_score(candidate, reference, judge: Judge | None = None) -> float:
    """Judge output clamped to [0, 1]; out-of-range values are logged."""
    raw = float((judge or bag_f1)(list(candidate), list(reference)))
    if not 0.0 <= raw <= 1.0:
        log.warning("judge returned %r outside [0, 1]; clamping", raw)
        raw = min(1.0, max(0.0, raw)) if math.isfinite(raw) else 0.0
    return raw


@dataclass(frozen=True)
class RewardBreakdown:
    rouge: float
    length: float
    judge: float
    composite: float


def composite_reward(candidate, reference, judge: Judge | None = None,
                     weights=REWARD_WEIGHTS) -> RewardBreakdown:
    r, l, j = rouge_l_f1(candidate, reference), length_penalty(candidate, reference), \
        judge_score(candidate, reference, judge)
    w1, w2, w3 = weights
    return RewardBreakdown(r, l, j, w1 * r + w2 * l + w3 * j)


# ---------------------------------------------------------------------------
# advantages, ratios, KL


def group_advantages(rewards, eps: float = ADV_EPS) -> np.ndarray:
    """Population z-scores; all zeros when the group has (near) no spread."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or len(r) < 2:
        raise ValueError("a group needs at least 2 rewards")
    sd = r.std()
    if sd < eps:
        return np.zeros_like(r)
    return (r - r.mean()) / sd


def _context(prompt, output):
    prompt, output = [int(t) for t in prompt], [int(t) for t in output]
    if not prompt or not output:
        raise ValueError("prompt and output must be non-empty")
    return prompt, output, np.array(prompt + output[:-1])


def token_logprobs(params: ModelParams, prompt, output) -> np.ndarray:
    """log pi(o_t | x, o_<t) for every output token, from one forward pass."""
    prompt, output, seq = _context(prompt, output)
    lp = log_softmax(forward(params, seq).logits[len(prompt) - 1:])
    return lp[np.arange(len(output)), output]


def prob_ratio(params_new: ModelParams, params_old: ModelParams, prompt, output, t: int) -> float:
    new = token_logprobs(params_new, prompt, output)[t]
    old = token_logprobs(params_old, prompt, output)[t]
    return float(math.exp(new) / max(math.exp(old), PROB_FLOOR))


def _token_kl(logp, logq):
    p = np.exp(logp)
    return (p * (logp - logq)).sum(axis=-1)


def kl_divergence(params: ModelParams, ref_params: ModelParams, contexts) -> float:
    """Exact KL(pi || pi_ref) over the full vocabulary, averaged per output then over outputs."""
    contexts = list(contexts)
    if not contexts:
        raise ValueError("no contexts")
    vals = []
    for prompt, output in contexts:
        prompt, output, seq = _context(prompt, output)
        s = len(prompt) - 1
        lp = log_softmax(forward(params, seq).logits[s:])
        lq = log_softmax(forward(ref_params, seq).logits[s:])
        vals.append(max(0.0, float(_token_kl(lp, lq).mean())))
    return float(np.mean(vals))


@dataclass
class GroupSample:
    prompt: list
    outputs: list
    rewards: np.ndarray
    advantages: np.ndarray
    old_logprobs: list                       # per output, per token, under pi_old
    breakdowns: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.rewards))

    @property
    def std(self) -> float:
        return float(np.std(self.rewards))


@dataclass
class ObjectiveResult:
    objective: float
    surrogate: float
    kl: float
    grads: dict                              # dJ/dtheta (ascent direction)


def grpo_objective(params: ModelParams, groups, ref_params: ModelParams, clip: float = 0.2,
                   beta: float = 0.05, with_grad: bool = True) -> ObjectiveResult:
    """Mean over groups, outputs and tokens of min(r A, clip(r) A) - beta KL."""
    if clip <= 0 or beta < 0:
        raise ValueError("need clip > 0 and beta >= 0")
    groups = list(groups)
    if not groups:
        raise ValueError("no groups")
    surr_total, kl_total = 0.0, 0.0
    grads: dict = {}
    for grp in groups:
        n_out = len(grp.outputs)
        for out, adv, old_lp in zip(grp.outputs, grp.advantages, grp.old_logprobs):
            prompt, out, seq = _context(grp.prompt, out)
            old_lp = np.asarray(old_lp, dtype=np.float64)
            if old_lp.shape != (len(out),):
                raise ValueError("stored old log-probs do not match the output")
            s, t = len(prompt) - 1, len(out)
            w = 1.0 / (len(groups) * n_out * t)
            trace = forward(params, seq)
            lp = log_softmax(trace.logits[s:])
            lq = log_softmax(forward(ref_params, seq).logits[s:])
            new = lp[np.arange(t), out]
            ratio = np.exp(new - np.maximum(old_lp, math.log(PROB_FLOOR)))
            unclipped = ratio * adv
            clipped = np.clip(ratio, 1 - clip, 1 + clip) * adv
            surr = np.minimum(unclipped, clipped)
            kl = _token_kl(lp, lq)
            surr_total += w * surr.sum()
            kl_total += w * kl.sum()
            if not with_grad:
                continue
            p = np.exp(lp)
            active = (unclipped <= clipped).astype(float)
            onehot = np.zeros_like(p)
            onehot[np.arange(t), out] = 1.0
            d_sub = (active * ratio * adv)[:, None] * (onehot - p)
            d_sub -= beta * p * (lp - lq - kl[:, None])
            d_logits = np.zeros_like(trace.logits)
            d_logits[s:] = w * d_sub
            for name, g in backward(params, trace, d_logits=d_logits).d_params.items():
                grads[name] = grads.get(name, 0.0) + g
    return ObjectiveResult(surr_total - beta * kl_total, surr_total, kl_total, grads)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class GRPOConfig:
    group_size: int = 4
    clip: float = 0.2
    beta: float = 0.05
    lr: float = 0.05
    iterations: int = 60
    sync_every: int = 1
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.clip <= 0 or self.beta < 0 or self.lr < 0 or self.iterations < 0 or self.sync_every < 1:
            raise ValueError(f"invalid GRPO config {self}")


@dataclass(frozen=True)
class CopyTask:
    """Prompt = tokens + separator; reference = the same tokens."""

    prompts: tuple
    references: tuple

    @classmethod
    def make(cls, vocab_size: int, num_prompts: int = 4, length: int = 4, separator: int = 0,
             seed: int = 0) -> "CopyTask":
        rng = np.random.default_rng(seed)
        refs = [tuple(int(t) for t in rng.integers(1, vocab_size, length)) for _ in range(num_prompts)]
        return cls(tuple(r + (separator,) for r in refs), tuple(refs))


def sample_group(policy_old: ModelParams, prompt, reference, config: GRPOConfig,
                 rng: np.random.Generator, judge: Judge | None = None) -> GroupSample:
    strategy = Strategy("temperature", config.temperature)
    outs, lps, bds = [], [], []
    for _ in range(config.group_size):
        toks, lp = sample_continuation(policy_old, prompt, len(reference), strategy, rng)
        outs.append(toks)
        lps.append(lp)
        bds.append(composite_reward(toks, reference, judge))
    rewards = np.array([b.composite for b in bds])
    return GroupSample(list(prompt), outs, rewards, group_advantages(rewards), lps, bds)


class DivergenceError(RuntimeError):
    pass


def train(params: ModelParams, task: CopyTask, config: GRPOConfig, judge: Judge | None = None,
          on_iter: Callable[[dict], None] | None = None) -> tuple[ModelParams, list]:
    """Returns the final policy and one log row per iteration."""
    ref = params
    old = params
    rng = np.random.default_rng([config.seed, 7])
    rows = []
    for it in range(config.iterations):
        groups = [sample_group(old, p, r, config, rng, judge) for p, r in zip(task.prompts, task.references)]
        res = grpo_objective(params, groups, ref, config.clip, config.beta)
        if not math.isfinite(res.objective):
            raise DivergenceError(f"non-finite objective at iteration {it}")
        params = params.axpy(config.lr, res.grads)
        if (it + 1) % config.sync_every == 0:
            old = params
        bds = [b for g in groups for b in g.breakdowns]
        row = {
            "iter": it,
            "mean_reward": float(np.mean([b.composite for b in bds])),
            "components": {k: float(np.mean([getattr(b, k) for b in bds])) for k in ("rouge", "length", "judge")},
            "kl": res.kl,
            "objective": res.objective,
        }
        rows.append(row)
        if on_iter:
            on_iter(row)
    return params, rows


def window_trend(rows, window: int = 10) -> tuple[float, float]:
    """Mean reward over the first and the last ``window`` iterations."""
    r = [row["mean_reward"] for row in rows]
    if len(r) < window:
        raise ValueError("not enough iterations for the window")
    return float(np.mean(r[:window])), float(np.mean(r[-window:]))
