"""Weights container.

Layout::

    b"INFLABW\\0"                 8-byte magic
    uint32 LE                    header length in bytes
    header                       UTF-8 JSON: format_version, config, seed, tensors
    tensor data                  row-major float64 little-endian, in header order

Each header tensor entry is ``{"name", "shape", "offset"}`` with the offset
relative to the start of the data section.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams

MAGIC = b"INFLABW\0"
FORMAT_VERSION = 1


def dumps(params: ModelParams) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in params.names():
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "config": params.config.to_dict(),
        "seed": params.config.seed,
        "tensors": entries,
    }, sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> ModelParams:
    if blob[:8] != MAGIC:
        raise ValueError("not a weights file (bad magic)")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen])
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported weights format version {header['format_version']}")
    data = memoryview(blob)[12 + hlen:]
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    params = ModelParams(ModelConfig(**header["config"]), tensors)
    params.validate()
    return params


def save(params: ModelParams, path) -> None:
    Path(path).write_bytes(dumps(params))


def load(path) -> ModelParams:
    return loads(Path(path).read_bytes())
