"""Lossless lookahead decoding.

The window keeps N-1 past Jacobi iterates as rows, staggered by one position
per row: with ``n`` committed tokens, ``window[r, j]`` guesses absolute
position ``n + j + r``. Each step produces a new row from the previous iterates
(each column's context is the oldest row up to that column, then the column's
own history), so every column read top to bottom is a run of consecutive
guesses and becomes an N-gram for the pool.

Pool entries are keyed by their first token. Verification takes up to G
entries whose key equals the last committed token and checks the remaining
N-1 tokens against the model's argmax; the longest verified run is committed
together with the argmax that follows it. Because every committed token is
the argmax given the committed prefix, the output equals greedy decoding.

The lookahead branch and all verification branches run in one batched
extension of the KV cache, counted as one sequential step.
"""
from __future__ import annotations

from collections import Counter, OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .model import KVCache, ModelParams, extend, prefill


@dataclass(frozen=True)
class LookaheadConfig:
    n: int = 5
    l: int = 10
    g: int = 5
    pool_capacity: int = 64

    def __post_init__(self):
        if self.n < 2 or self.l < 1 or self.g < 1 or self.pool_capacity < 1:
            raise ValueError(f"invalid lookahead config {self}")


def _check_length(params: ModelParams, prompt, steps: int) -> list[int]:
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if steps < 0:
        raise ValueError("number of tokens must be >= 0")
    if len(prompt) + steps > params.config.max_seq:
        raise ValueError(f"prompt + {steps} tokens exceeds max_seq={params.config.max_seq}")
    return prompt


def _start(params: ModelParams, prompt: list[int]) -> KVCache:
    return prefill(params, prompt[:-1]) if len(prompt) > 1 else KVCache.empty(params.config)


def greedy_decode(params: ModelParams, prompt, steps: int) -> list[int]:
    """``steps`` argmax continuations, one cache extension each."""
    prompt = _check_length(params, prompt, steps)
    cache, last, out = _start(params, prompt), prompt[-1], []
    for _ in range(steps):
        logits, k, v = extend(params, cache, [[last]])
        cache = cache.append(k, v)
        last = int(np.argmax(logits[0, 0]))
        out.append(last)
    return out


@dataclass
class LookaheadState:
    committed: list
    prompt_len: int
    window: np.ndarray                       # (N-1) x L
    pool: dict                               # first token -> OrderedDict[ngram, None]
    cache: KVCache                           # keys/values of committed[:-1]
    rng: np.random.Generator
    step_count: int = 0
    history: list = field(default_factory=list)   # speculative tokens accepted per step

    @property
    def generated(self) -> list:
        return self.committed[self.prompt_len:]


def init_state(params: ModelParams, prompt, config: LookaheadConfig, seed: int = 0) -> LookaheadState:
    prompt = [int(t) for t in prompt]
    rng = np.random.default_rng(seed)
    window = rng.integers(0, params.config.vocab_size, size=(config.n - 1, config.l))
    return LookaheadState(list(prompt), len(prompt), window, {}, _start(params, prompt), rng)


def _pool_add(pool: dict, ngram: tuple, capacity: int) -> None:
    bucket = pool.setdefault(ngram[0], OrderedDict())
    if ngram in bucket:
        bucket.move_to_end(ngram)
        return
    bucket[ngram] = None
    if len(bucket) > capacity:
        bucket.popitem(last=False)


def _select_candidates(state: LookaheadState, config: LookaheadConfig, limit: int) -> list[tuple]:
    bucket = state.pool.get(state.committed[-1])
    if not bucket:
        return []
    guess = state.window[0]

    def agreement(c):
        run = 0
        for a, b in zip(c[1:], guess):
            if a != b:
                break
            run += 1
        return run

    ranked = sorted(enumerate(bucket), key=lambda ic: (-agreement(ic[1]), ic[0]))
    return [c[:limit] for _, c in ranked[:config.g]]


def lookahead_step(params: ModelParams, state: LookaheadState, config: LookaheadConfig,
                   max_new: int | None = None) -> int:
    """One predict-verify-commit step; returns the number of tokens committed (>= 1)."""
    n, width = config.n, config.l
    last = state.committed[-1]
    room = params.config.max_seq - state.cache.length
    if room < 1:
        raise ValueError("sequence is at max_seq")
    win = state.window

    # lookahead branch: column j sees row 0 up to j, then its own column history
    cols = [j for j in range(width) if j + n <= room]
    rows = [[last] + list(win[0, :j]) + list(win[:, j]) for j in cols]
    n_look = len(rows)
    if not rows:
        rows = [[last]]
    cands = _select_candidates(state, config, min(n, room))
    rows += [list(c) for c in cands]
    longest = max(len(r) for r in rows)
    batch = np.zeros((len(rows), longest), dtype=np.int64)
    for i, r in enumerate(rows):
        batch[i, :len(r)] = r
    logits, new_k, new_v = extend(params, state.cache, batch)
    state.step_count += 1
    preds = np.argmax(logits, axis=-1)

    # verification: row 0 of any branch already holds the argmax after `last`
    best_row, best_acc = 0, 0
    for i, c in enumerate(cands):
        row = n_look + i if n_look else 1 + i
        acc = 0
        while acc < len(c) - 1 and preds[row, acc] == c[acc + 1]:
            acc += 1
        if acc > best_acc:
            best_row, best_acc = row, acc
    accepted = [int(t) for t in batch[best_row, 1:best_acc + 1]]
    new_tokens = accepted + [int(preds[best_row, best_acc])]
    if max_new is not None:
        new_tokens = new_tokens[:max(1, max_new)]
    state.cache = state.cache.append(new_k, new_v, index=[best_row], upto=len(new_tokens))
    state.committed.extend(new_tokens)
    state.history.append(len(new_tokens) - 1)

    # new iterate, N-gram collection and window shift
    full = np.vstack([win, state.rng.integers(0, params.config.vocab_size, size=(1, width))])
    for idx, j in enumerate(cols):
        full[-1, j] = preds[idx, len(rows[idx]) - 1]
        _pool_add(state.pool, tuple(int(t) for t in full[:, j]), config.pool_capacity)
    shift = len(new_tokens) - 1
    nxt = state.rng.integers(0, params.config.vocab_size, size=win.shape)
    if shift < width:
        nxt[:, :width - shift] = full[1:, shift:]
    state.window = nxt
    return len(new_tokens)


@dataclass
class LookaheadResult:
    tokens: list
    steps: int
    accept_histogram: dict          # speculative tokens accepted -> number of steps
    bonus_tokens: int               # tokens produced by the verification pass itself

    @property
    def mean_accept(self) -> float:
        return len(self.tokens) / self.steps if self.steps else 0.0


def lookahead_decode(params: ModelParams, prompt, steps: int, config: LookaheadConfig,
                     seed: int = 0) -> LookaheadResult:
    _check_length(params, prompt, steps)
    state = init_state(params, prompt, config, seed)
    while len(state.generated) < steps:
        lookahead_step(params, state, config, max_new=steps - len(state.generated))
    hist = Counter(state.history)
    return LookaheadResult(state.generated[:steps], state.step_count,
                           {k: hist[k] for k in sorted(hist)}, state.step_count)
