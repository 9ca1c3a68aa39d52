"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime, 4 acceptance failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness.config import ConfigError, from_dict, load_config
from .harness.metrics import SchemaError, dumps, read_records

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ACCEPTANCE = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--config", help="JSON run configuration (flags below are ignored when given)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write NDJSON metrics here instead of stdout")
    p.add_argument("--weights", help="load model weights from this file")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="inferlab", description="Toy inference and training lab.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("run", help="execute a JSON run configuration")
    _common(p)

    p = sub.add_parser("decode", help="greedy or lookahead decoding")
    _common(p)
    p.add_argument("--mode", dest="method", choices=["greedy", "lookahead"], default="lookahead")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--l", type=int, default=10)
    p.add_argument("--g", type=int, default=5)
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--prompt-len", type=int, default=8)

    p = sub.add_parser("bench", help="benchmarks")
    bsub = p.add_subparsers(dest="bench", parser_class=_Parser)
    q = bsub.add_parser("kvcache", help="paged KV cache decode with accounting")
    _common(q)
    q.add_argument("--block-size", type=int, default=16)
    q.add_argument("--bits", type=int, choices=[4, 8])
    q.add_argument("--group-size", type=int)
    q.add_argument("--steps", type=int, default=64)
    q.add_argument("--forks", type=int, default=2)

    p = sub.add_parser("tts", help="test-time scaling")
    tsub = p.add_subparsers(dest="tts", parser_class=_Parser)
    q = tsub.add_parser("run")
    _common(q)
    q.add_argument("--n", type=int, default=4)
    q.add_argument("--k", type=int, default=2)
    q.add_argument("--lambda", dest="lam", type=float, default=0.5)
    q.add_argument("--critic", choices=["identity", "greedy-resume"], default="greedy-resume")
    q.add_argument("--strategy", default="temperature:1.0")
    q.add_argument("--length", type=int, default=16)

    p = sub.add_parser("prune", help="width or depth pruning")
    _common(p)
    p.add_argument("--kind", choices=["width", "depth"], default="width")
    p.add_argument("--percent", type=float, default=20.0)
    p.add_argument("--method", choices=["importance", "gates"], default="importance")
    p.add_argument("--report", help="write the importance report and counts as JSON")
    p.add_argument("--weights-out", help="pruned weights file (default: next to --report)")

    p = sub.add_parser("grpo-train", help="GRPO on the copy task")
    _common(p)
    p.add_argument("--g", type=int, default=4)
    p.add_argument("--clip", type=float, default=0.2)
    p.add_argument("--beta", type=float, default=0.05)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--iters", type=int, default=60)
    p.add_argument("--sync-every", type=int, default=1)
    p.add_argument("--vocab", type=int, default=16)
    p.add_argument("--log", help="write per-iteration rows as JSONL")

    p = sub.add_parser("sweep", help="Cartesian sweep over a base configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True, help='JSON file or inline JSON, e.g. {"decode.n": [2, 3, 5]}')
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("report", help="summarize metrics files as CSV")
    p.add_argument("files", nargs="*")
    p.add_argument("--csv", help="output path (default stdout)")

    p = sub.add_parser("selftest", help="run the acceptance checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", help="comma-separated criterion numbers")
    p.add_argument("--once", action="store_true", help="skip the second pass used for the determinism diff")
    p.add_argument("--json", help="write results as JSON")
    return ap


def _raw_from_flags(args) -> dict:
    cmd = args.command
    model = {"weights": args.weights} if args.weights else {}
    if cmd == "decode":
        sec = {"method": args.method, "n": args.n, "l": args.l, "g": args.g, "steps": args.steps,
               "prompt_len": args.prompt_len}
        mode = "decode"
    elif cmd == "bench":
        sec = {"block_size": args.block_size, "bits": args.bits, "group_size": args.group_size,
               "steps": args.steps, "forks": args.forks}
        mode = "kvcache"
    elif cmd == "tts":
        sec = {"n": args.n, "k": args.k, "lambda": args.lam, "critic": args.critic, "strategy": args.strategy,
               "length": args.length}
        mode = "tts"
    elif cmd == "prune":
        weights_out = args.weights_out or (str(Path(args.report).with_suffix(".weights")) if args.report else None)
        sec = {"kind": args.kind, "percent": args.percent, "method": args.method, "weights_out": weights_out}
        mode = "prune"
    elif cmd == "grpo-train":
        sec = {"g": args.g, "clip": args.clip, "beta": args.beta, "lr": args.lr, "iters": args.iters,
               "sync_every": args.sync_every}
        mode = "grpo"
        if not args.weights:
            model["vocab_size"] = args.vocab
    else:
        raise UsageError(f"no flag mapping for {cmd}")
    raw = {"mode": mode, "seed": args.seed, mode: sec}
    if model:
        raw["model"] = model
    return raw


def _emit(cfg, out_path):
    from .harness.runner import run
    fh = open(out_path, "w", encoding="utf-8") if out_path else sys.stdout
    records = []
    try:
        for rec in run(cfg):
            fh.write(dumps(rec) + "\n")
            records.append(rec)
    finally:
        if out_path:
            fh.close()
    return records


def _cmd_run(args):
    if args.command == "run":
        if not args.config:
            raise UsageError("run: --config is required")
        cfg = load_config(args.config)
    elif getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = from_dict(_raw_from_flags(args))
    records = _emit(cfg, args.out or cfg.output)
    summary = records[-1]["values"]
    if args.command == "prune" and args.report:
        Path(args.report).write_text(json.dumps({**summary, "weights_file": cfg.section["weights_out"]},
                                                indent=2, sort_keys=True))
    if args.command == "grpo-train" and args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            for rec in records[:-1]:
                fh.write(json.dumps(rec["values"], sort_keys=True) + "\n")
    return EXIT_OK


def _cmd_sweep(args):
    from .harness.sweep import sweep
    base = json.loads(Path(args.config).read_text()) if Path(args.config).exists() else None
    if base is None:
        raise ConfigError(f"{args.config}: no such file")
    grid_text = Path(args.grid).read_text() if Path(args.grid).exists() else args.grid
    try:
        grid = json.loads(grid_text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"grid:{e.lineno}:{e.colno}: {e.msg}") from None
    manifest = sweep(base, grid, args.out_dir, args.workers)
    failed = {k: v for k, v in manifest["cells"].items() if v["status"] != "done"}
    for cid, cell in sorted(manifest["cells"].items()):
        print(f"{cid} {cell['status']} {json.dumps(cell['overrides'], sort_keys=True)} {cell.get('error', '')}".rstrip())
    return EXIT_RUNTIME if failed else EXIT_OK


def _cmd_report(args):
    from .harness.sweep import report, write_csv
    records = []
    for f in args.files:
        records += read_records(f)
    rows = report(records)
    if args.csv:
        write_csv(rows, args.csv)
    else:
        write_csv(rows, sys.stdout)
    return EXIT_OK


def _cmd_selftest(args):
    from .harness.acceptance import results_json, run_suite
    only = None
    if args.only:
        try:
            only = {int(x) for x in args.only.split(",")}
        except ValueError:
            raise UsageError("--only takes comma-separated integers") from None
        if not only <= set(range(1, 11)):
            raise UsageError("criteria are numbered 1-10")
    results = run_suite(args.seed, only, twice=not args.once, echo=print)
    if args.json:
        Path(args.json).write_text(results_json(results))
    failed = [r.number for r in results if r.asserted and not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed" + (f"; failed: {failed}" if failed else ""))
    return EXIT_ACCEPTANCE if failed else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None or (args.command == "bench" and not args.bench) or \
                (args.command == "tts" and not args.tts):
            raise UsageError("missing subcommand; see --help")
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "report":
            return _cmd_report(args)
        if args.command == "selftest":
            return _cmd_selftest(args)
        return _cmd_run(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, SchemaError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - top-level boundary
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
