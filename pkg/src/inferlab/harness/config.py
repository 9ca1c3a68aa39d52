"""Run configuration: one JSON document per run, validated against a shipped schema."""
from __future__ import annotations

import copy
import json
import zlib
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import jsonschema
import numpy as np

from ..model import ModelConfig

MODES = ("decode", "kvcache", "tts", "prune", "grpo")

DEFAULTS = {
    "decode": {"method": "lookahead", "steps": 64, "prompt_len": 8, "n": 5, "l": 10, "g": 5,
               "pool_capacity": 64},
    "kvcache": {"block_size": 16, "num_blocks": 256, "bits": None, "group_size": None, "steps": 64,
                "prompt_len": 8, "forks": 2},
    "tts": {"n": 4, "k": 2, "lambda": 0.5, "critic": "greedy-resume", "threshold": 0.5,
            "strategy": "temperature:1.0", "length": 16, "prompt_len": 8, "separator": 0},
    "prune": {"kind": "width", "percent": 20.0, "lambda1": 0.0, "lambda2": 0.0, "tau": 0.5,
              "eval_samples": 8, "eval_length": 16, "layer_site": "block", "weights_out": None,
              "method": "importance", "gate_steps": 30, "gate_lr": 1.0, "penalty": "mass"},
    "grpo": {"g": 4, "clip": 0.2, "beta": 0.05, "lr": 0.05, "iters": 60, "sync_every": 1,
             "num_prompts": 4, "answer_len": 4},
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending line or field."""


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    text = resources.files("inferlab.harness").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def derive_seed(root: int, stream: str) -> int:
    """Independent 32-bit seed for a named sub-stream of the root seed."""
    return int(np.random.SeedSequence([root, zlib.crc32(stream.encode())]).generate_state(1)[0])


def stream_rng(root: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, stream))


@dataclass(frozen=True)
class RunConfig:
    mode: str
    seed: int
    model: dict
    section: dict         # mode section with defaults filled in
    output: str | None
    raw: dict             # the document as given, echoed into every record

    def model_config(self) -> ModelConfig:
        fields = {k: v for k, v in self.model.items() if k != "weights"}
        return ModelConfig(seed=derive_seed(self.seed, "model-init"), **fields)

    @property
    def seeds(self) -> dict:
        names = ("model-init", "prompt", "sampling", "gates", "window-init", "eval")
        return {"root": self.seed, **{n: derive_seed(self.seed, n) for n in names}}


def _field_path(err: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>: configuration must be a JSON object")
    validator = jsonschema.Draft202012Validator(load_schema("config"))
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("; ".join(f"{_field_path(e)}: {e.message}" for e in errors))
    mode = raw["mode"]
    extra = [m for m in MODES if m != mode and m in raw]
    if extra:
        raise ConfigError(f"{extra[0]}: section given but mode is {mode!r} (exactly one mode section per run)")
    section = {**DEFAULTS[mode], **raw.get(mode, {})}
    cfg = RunConfig(mode, int(raw.get("seed", 0)), dict(raw.get("model", {})), section,
                    raw.get("output"), copy.deepcopy(raw))
    try:
        cfg.model_config()
    except ValueError as e:
        raise ConfigError(f"model: {e}") from None
    if mode == "tts" and section["k"] > section["n"]:
        raise ConfigError("tts.k: must not exceed tts.n")
    if mode == "decode" and section["prompt_len"] + section["steps"] > cfg.model_config().max_seq:
        raise ConfigError("decode.steps: prompt_len + steps exceeds model.max_seq")
    return cfg


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}:{e.lineno}:{e.colno}: {e.msg}") from None
    return from_dict(raw)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    return parse_config(text, str(path))


def with_overrides(raw: dict, overrides: dict) -> dict:
    """Copy of ``raw`` with dotted-path keys (``"decode.n"``) replaced."""
    out = copy.deepcopy(raw)
    for path, value in overrides.items():
        node = out
        *parents, leaf = path.split(".")
        for key in parents:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{path}: {key} is not a section")
        node[leaf] = value
    return out
