"""Newline-delimited JSON metrics records."""
from __future__ import annotations

import hashlib
import json
import math
from datetime import datetime, timezone

import jsonschema

from .config import load_schema

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    pass


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def run_id(raw_config: dict) -> str:
    return hashlib.sha256(canonical(raw_config).encode()).hexdigest()[:16]


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def _check_finite(obj, path="values"):
    if isinstance(obj, float) and not math.isfinite(obj):
        raise SchemaError(f"{path}: non-finite number {obj!r}")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{path}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _check_finite(v, f"{path}[{i}]")


def validate_record(rec: dict) -> None:
    errs = list(jsonschema.Draft202012Validator(load_schema("metrics")).iter_errors(rec))
    if errs:
        raise SchemaError("; ".join(e.message for e in errs))
    _check_finite(rec["values"])


def make_record(raw_config: dict, mode: str, kind: str, seq: int, seeds: dict, values: dict,
                timestamp: str | None = None) -> dict:
    rec = {
        "schema_version": SCHEMA_VERSION,
        "run_id": run_id(raw_config),
        "timestamp": timestamp or now(),
        "mode": mode,
        "kind": kind,
        "seq": seq,
        "seeds": seeds,
        "config": raw_config,
        "values": values,
    }
    validate_record(rec)
    return rec


def dumps(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, allow_nan=False)


def read_records(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{lineno}: {e.msg}") from None
            if rec.get("schema_version") != SCHEMA_VERSION:
                raise SchemaError(f"{path}:{lineno}: schema_version {rec.get('schema_version')!r} "
                                  f"!= {SCHEMA_VERSION}")
            out.append(rec)
    return out


def without_timestamps(lines) -> list[str]:
    """Records re-serialized with the timestamp field removed, for byte comparison."""
    out = []
    for line in lines:
        rec = json.loads(line) if isinstance(line, str) else dict(line)
        rec.pop("timestamp", None)
        out.append(dumps(rec))
    return out
