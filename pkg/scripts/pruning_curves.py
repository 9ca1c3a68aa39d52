"""NLL against compression for width ({5,10,20}%) and depth ({1,5,20,50}%) pruning.

Depth pruning uses an 8-layer model so the low percentages remove a layer.
"""
from __future__ import annotations

import argparse
import csv
from dataclasses import dataclass, field
from pathlib import Path

from inferlab.harness.sweep import sweep, sweep_records


@dataclass
class CurveConfig:
    width_levels: list = field(default_factory=lambda: [5, 10, 20])
    depth_levels: list = field(default_factory=lambda: [1, 5, 20, 50])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    method: str = "importance"          # or "gates"
    depth_layers: int = 8
    eval_samples: int = 8
    out_dir: str = "results/pruning"


def _curve(cfg: CurveConfig, kind: str, levels: list, model: dict) -> list[dict]:
    out = Path(cfg.out_dir) / kind
    base = {"mode": "prune", "model": model,
            "prune": {"kind": kind, "method": cfg.method, "eval_samples": cfg.eval_samples}}
    sweep(base, {"prune.percent": levels, "seed": cfg.seeds}, out)
    rows = []
    for r in sweep_records(out):
        if r["kind"] == "summary":
            v = r["values"]
            rows.append({"kind": kind, "percent": v["percent"], "seed": r["seeds"]["root"],
                         "params_after": v["params_after"], "layers_after": v["layers_after"],
                         "nll_before": v["nll_before"], "nll_after": v["nll_after"],
                         "nll_increase": v["nll_increase"]})
    return sorted(rows, key=lambda x: (x["percent"], x["seed"]))


def main(cfg: CurveConfig) -> None:
    rows = _curve(cfg, "width", cfg.width_levels, {})
    rows += _curve(cfg, "depth", cfg.depth_levels, {"num_layers": cfg.depth_layers})
    path = Path(cfg.out_dir) / "nll_curves.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for kind in ("width", "depth"):
        print(f"{kind}: percent  params  mean NLL increase")
        for p in sorted({r["percent"] for r in rows if r["kind"] == kind}):
            sel = [r for r in rows if r["kind"] == kind and r["percent"] == p]
            inc = sum(r["nll_increase"] for r in sel) / len(sel)
            print(f"  {p:6g}  {sel[0]['params_after']:7d}  {inc:+.4f}")
    print(f"wrote {path}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--method", choices=["importance", "gates"], default="importance")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out-dir", default=CurveConfig.out_dir)
    a = ap.parse_args()
    main(CurveConfig(seeds=a.seeds, method=a.method, out_dir=a.out_dir))
