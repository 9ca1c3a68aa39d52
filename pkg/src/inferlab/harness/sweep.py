"""Cartesian sweeps with a resumable manifest, and CSV summaries of record files."""
from __future__ import annotations

import csv
import itertools
import json
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ConfigError, from_dict, with_overrides
from .metrics import dumps, read_records, run_id
from .runner import run

MANIFEST = "manifest.json"


def grid_cells(grid: dict) -> list[dict]:
    """Every combination of the grid's dotted-path values, in sorted key order."""
    if not grid or any(not isinstance(v, list) or not v for v in grid.values()):
        raise ConfigError("grid: every key needs a non-empty list of values")
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def run_to_file(raw: dict, path, timestamp: str | None = None) -> dict:
    """Execute one run, write its NDJSON stream, return the summary record."""
    cfg = from_dict(raw)
    tmp = Path(str(path) + ".part")
    summary = None
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in run(cfg, timestamp):
            fh.write(dumps(rec) + "\n")
            if rec["kind"] == "summary":
                summary = rec
    os.replace(tmp, path)
    return summary


def _cell(args):
    raw, path = args
    try:
        run_to_file(raw, path)
        return None
    except Exception as e:  # reported per cell, the sweep carries on
        return f"{type(e).__name__}: {e}"


def _load_manifest(out_dir: Path) -> dict:
    p = out_dir / MANIFEST
    if p.exists():
        return json.loads(p.read_text())
    return {"cells": {}}


def _save_manifest(out_dir: Path, manifest: dict) -> None:
    tmp = out_dir / (MANIFEST + ".part")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, out_dir / MANIFEST)


def sweep(base: dict, grid: dict, out_dir, workers: int = 1) -> dict:
    """Run every grid cell not already recorded as done. Returns the manifest.

    Each cell writes ``<cell id>.ndjson``; the manifest maps cell ids to their
    overrides, status and (for failures) the error message.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _load_manifest(out_dir)
    todo = []
    for overrides in grid_cells(grid):
        raw = with_overrides(base, overrides)
        from_dict(raw)                      # config errors abort before anything runs
        cid = run_id(raw)
        entry = manifest["cells"].get(cid)
        path = out_dir / f"{cid}.ndjson"
        if entry and entry["status"] == "done" and path.exists():
            continue
        manifest["cells"][cid] = {"overrides": overrides, "status": "pending", "file": path.name}
        todo.append((cid, raw, path))
    _save_manifest(out_dir, manifest)
    jobs = [(raw, str(path)) for _, raw, path in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_cell, jobs))
    else:
        results = [_cell(j) for j in jobs]
    for (cid, _, _), err in zip(todo, results):
        manifest["cells"][cid]["status"] = "done" if err is None else "failed"
        if err is not None:
            manifest["cells"][cid]["error"] = err
    _save_manifest(out_dir, manifest)
    return manifest


def sweep_records(out_dir) -> list[dict]:
    out_dir = Path(out_dir)
    manifest = _load_manifest(out_dir)
    recs = []
    for cid in sorted(manifest["cells"]):
        if manifest["cells"][cid]["status"] == "done":
            recs += read_records(out_dir / manifest["cells"][cid]["file"])
    return recs


# ---------------------------------------------------------------------------
# report

REPORT_COLUMNS = ["mode", "config_id", "n_runs", "seeds", "metric", "mean", "std"]


def _numeric_fields(values: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in values.items():
        key = prefix + k
        if isinstance(v, bool):
            out[key] = float(v)
        elif isinstance(v, (int, float)):
            out[key] = float(v)
        elif isinstance(v, dict) and k != "importance":
            out.update(_numeric_fields(v, key + "."))
    return out


def report(records) -> list[dict]:
    """Long-format rows: one per (mode, config without seed, metric), mean and
    population std over seeds."""
    groups: dict = {}
    for rec in records:
        if rec["kind"] != "summary":
            continue
        cfg = dict(rec["config"])
        cfg.pop("seed", None)
        cfg.pop("output", None)
        key = (rec["mode"], run_id(cfg))
        groups.setdefault(key, []).append(rec)
    rows = []
    for (mode, cid) in sorted(groups):
        recs = groups[(mode, cid)]
        fields = [_numeric_fields(r["values"]) for r in recs]
        seeds = sorted({r["seeds"]["root"] for r in recs})
        for metric in sorted(set().union(*fields)):
            xs = [f[metric] for f in fields if metric in f]
            rows.append({"mode": mode, "config_id": cid, "n_runs": len(xs),
                         "seeds": " ".join(map(str, seeds)), "metric": metric,
                         "mean": statistics.fmean(xs), "std": statistics.pstdev(xs)})
    return rows


def write_csv(rows, path_or_file) -> None:
    own = isinstance(path_or_file, (str, Path))
    fh = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
    try:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "mean": repr(r["mean"]), "std": repr(r["std"])})
    finally:
        if own:
            fh.close()

