"""Next-token selection from a logit vector."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import softmax


@dataclass(frozen=True)
class Strategy:
    """``kind`` is one of greedy, temperature, top_k, nucleus.

    ``value`` is the temperature, k, or nucleus mass p respectively.
    ``temperature`` additionally rescales logits for top_k / nucleus.
    """

    kind: str = "greedy"
    value: float = 1.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in ("greedy", "temperature", "top_k", "nucleus"):
            raise ValueError(f"unknown sampling strategy {self.kind!r}")
        if self.kind == "temperature" and self.value <= 0:
            raise ValueError("temperature must be > 0")
        if self.kind == "top_k" and (int(self.value) != self.value or self.value < 1):
            raise ValueError(f"top-k needs an integer k >= 1, got {self.value}")
        if self.kind == "nucleus" and not 0.0 < self.value <= 1.0:
            raise ValueError(f"nucleus p must lie in (0, 1], got {self.value}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        """``greedy``, ``temperature:0.8``, ``top_k:5`` or ``nucleus:0.9``."""
        kind, _, val = text.partition(":")
        return cls(kind, float(val) if val else 1.0)


def greedy(logits) -> int:
    # np.argmax returns the first maximal index: lowest-index tie-break
    return int(np.argmax(logits))


def sampling_distribution(logits, strategy: Strategy) -> np.ndarray:
    """Distribution the strategy samples from (renormalized over its support)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    if strategy.kind == "greedy":
        out = np.zeros_like(logits)
        out[greedy(logits)] = 1.0
        return out
    if strategy.kind == "temperature":
        return softmax(logits / strategy.value)
    p = softmax(logits / strategy.temperature)
    # stable sort keeps lower indices first among equal probabilities
    order = np.argsort(-p, kind="stable")
    if strategy.kind == "top_k":
        keep = order[: int(strategy.value)]
    else:
        csum = np.cumsum(p[order])
        cut = int(np.searchsorted(csum, strategy.value * (1.0 - 1e-12))) + 1
        keep = order[:cut]
    out = np.zeros_like(p)
    out[keep] = p[keep]
    return out / out.sum()


def sample_token(logits, strategy: Strategy, rng: np.random.Generator) -> int:
    if strategy.kind == "greedy":
        return greedy(logits)
    if strategy.kind == "top_k" and int(strategy.value) == 1:
        return greedy(logits)
    p = sampling_distribution(logits, strategy)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right"))
    return min(idx, len(p) - 1)
