"""Lookahead decoding over an N x L x G grid: losslessness and step compression per cell."""
from __future__ import annotations

import argparse
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from inferlab.harness.sweep import report, sweep, sweep_records, write_csv


@dataclass
class SweepConfig:
    n: list = field(default_factory=lambda: [2, 3, 5])
    l: list = field(default_factory=lambda: [1, 5, 10])
    g: list = field(default_factory=lambda: [5])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    steps: int = 128
    prompt_len: int = 8
    workers: int = 1
    out_dir: str = "results/lookahead"


def main(cfg: SweepConfig) -> None:
    base = {"mode": "decode", "decode": {"method": "lookahead", "steps": cfg.steps, "prompt_len": cfg.prompt_len}}
    grid = {"decode.n": cfg.n, "decode.l": cfg.l, "decode.g": cfg.g, "seed": cfg.seeds}
    sweep(base, grid, cfg.out_dir, cfg.workers)
    records = sweep_records(cfg.out_dir)
    summaries = [r for r in records if r["kind"] == "summary"]
    lossy = [r["run_id"] for r in summaries if not r["values"]["matches_greedy"]]
    rows = [r for r in report(records) if r["metric"] in ("compression", "matches_greedy")]
    write_csv(rows, Path(cfg.out_dir) / "report.csv")
    by_cell: dict = {}
    for r in summaries:
        d = r["config"]["decode"]
        by_cell.setdefault((d["n"], d["l"], d["g"]), []).append(r["values"]["compression"])
    print("  N   L   G  compression (mean over seeds)")
    for (n, l, g), xs in sorted(by_cell.items()):
        print(f"{n:3d} {l:3d} {g:3d}  {sum(xs) / len(xs):.3f}")
    print(f"{len(summaries)} runs, {len(lossy)} differ from greedy")
    (Path(cfg.out_dir) / "config.json").write_text(json.dumps(asdict(cfg), indent=2))


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=SweepConfig.steps)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out-dir", default=SweepConfig.out_dir)
    a = ap.parse_args()
    main(SweepConfig(seeds=a.seeds, steps=a.steps, workers=a.workers, out_dir=a.out_dir))
