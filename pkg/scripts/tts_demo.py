"""Test-time scaling on the toy model: scores, selection, critic revisions and the vote."""
from __future__ import annotations

import argparse
from dataclasses import dataclass

from inferlab import tts
from inferlab.model import ModelConfig, init_params
from inferlab.sampling import Strategy


@dataclass
class DemoConfig:
    n: int = 4
    k: int = 2
    lam: float = 0.5
    length: int = 12
    strategy: str = "temperature:1.0"
    threshold: float = 0.5
    seed: int = 0


def main(cfg: DemoConfig) -> None:
    params = init_params(ModelConfig(seed=cfg.seed))
    prompt = [3, 1, 4, 1, 5, 9]
    critic = tts.GreedyResumeCritic(params, prompt, cfg.threshold, cfg.lam)
    res = tts.run_tts(params, prompt, cfg.n, cfg.k, cfg.lam, Strategy.parse(cfg.strategy), cfg.length,
                      critic, seed=cfg.seed)
    print("idx  score    H_w     mean logp  tokens")
    for t in res.trajectories:
        mark = "*" if t.index in {u.index for u in res.top} else " "
        print(f"{t.index:2d}{mark} {t.score:7.3f} {t.weighted_entropy:7.3f} {t.avg_logprob:9.3f}  {t.tokens}")
    for r in res.revisions:
        print(f"revision of {r.revised_from}: score {r.score:.3f}, mean logp {r.avg_logprob:.3f}, {r.tokens}")
    print("consensus answer:", list(res.answer))


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=4)
    ap.add_argument("--k", type=int, default=2)
    ap.add_argument("--lam", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    main(DemoConfig(n=a.n, k=a.k, lam=a.lam, seed=a.seed))
