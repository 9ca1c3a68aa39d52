"""GRPO on the copy task over several seeds; logs per-iteration rewards and KL."""
from __future__ import annotations

import argparse
import json
from dataclasses import asdict, dataclass
from pathlib import Path

from inferlab import grpo
from inferlab.harness.config import derive_seed
from inferlab.model import ModelConfig, init_params


@dataclass
class Experiment:
    seeds: int = 10
    vocab: int = 16
    num_prompts: int = 4
    answer_len: int = 4
    window: int = 10
    train: grpo.GRPOConfig = grpo.GRPOConfig()
    out_dir: str = "results/grpo"


def main(exp: Experiment) -> None:
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    improved = 0
    for s in range(exp.seeds):
        params = init_params(ModelConfig(vocab_size=exp.vocab, seed=derive_seed(s, "model-init")))
        task = grpo.CopyTask.make(exp.vocab, exp.num_prompts, exp.answer_len, seed=derive_seed(s, "prompt"))
        cfg = grpo.GRPOConfig(**{**asdict(exp.train), "seed": derive_seed(s, "sampling")})
        _, rows = grpo.train(params, task, cfg)
        with open(out / f"seed{s}.jsonl", "w") as fh:
            for r in rows:
                fh.write(json.dumps(r) + "\n")
        first, last = grpo.window_trend(rows, exp.window)
        improved += last > first
        print(f"seed {s}: reward {first:.3f} -> {last:.3f}, final KL {rows[-1]['kl']:.4f}")
    print(f"{improved}/{exp.seeds} seeds improved over the first window")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--iters", type=int, default=60)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--beta", type=float, default=0.05)
    ap.add_argument("--out-dir", default=Experiment.out_dir)
    a = ap.parse_args()
    train = grpo.GRPOConfig(lr=a.lr, beta=a.beta, iterations=a.iters)
    main(Experiment(seeds=a.seeds, train=train, out_dir=a.out_dir))
