"""Seeded end-to-end runs: one generator of metrics records per mode."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .. import grpo, pruning, tts, weights
from ..attention import naive_attention
from ..lookahead import LookaheadConfig, greedy_decode, init_state, lookahead_step
from ..model import ModelParams, init_params
from ..paged_kv import PagedKVCache, cache_stats, paged_attention, paged_greedy_decode, refcount_audit
from ..sampling import Strategy
from .config import RunConfig
from .metrics import make_record


def build_params(cfg: RunConfig) -> ModelParams:
    if "weights" in cfg.model:
        return weights.load(cfg.model["weights"])
    return init_params(cfg.model_config())


def _prompt(cfg: RunConfig, params: ModelParams, length: int) -> list[int]:
    rng = np.random.default_rng(cfg.seeds["prompt"])
    return [int(t) for t in rng.integers(0, params.config.vocab_size, length)]


def _decode(cfg: RunConfig, params: ModelParams):
    s = cfg.section
    prompt = _prompt(cfg, params, s["prompt_len"])
    reference = greedy_decode(params, prompt, s["steps"])
    if s["method"] == "greedy":
        for i, tok in enumerate(reference):
            yield "step", {"step": i, "token": tok}
        yield "summary", {"method": "greedy", "prompt": prompt, "tokens": reference, "T": s["steps"],
                          "steps": s["steps"], "compression": 1.0}
        return
    lc = LookaheadConfig(s["n"], s["l"], s["g"], s["pool_capacity"])
    state = init_state(params, prompt, lc, seed=cfg.seeds["window-init"])
    while len(state.generated) < s["steps"]:
        k = lookahead_step(params, state, lc, max_new=s["steps"] - len(state.generated))
        yield "step", {"step": state.step_count - 1, "committed": k, "accepted": k - 1}
    hist: dict = {}
    for a in state.history:
        hist[str(a)] = hist.get(str(a), 0) + 1
    toks = state.generated[:s["steps"]]
    yield "summary", {
        "method": "lookahead", "prompt": prompt, "tokens": toks, "T": s["steps"], "steps": state.step_count,
        "compression": s["steps"] / state.step_count, "mean_accept": s["steps"] / state.step_count,
        "histogram": dict(sorted(hist.items(), key=lambda kv: int(kv[0]))),
        "bonus_tokens": state.step_count, "matches_greedy": toks == reference,
    }


def _kvcache(cfg: RunConfig, params: ModelParams):
    s = cfg.section
    c = params.config
    prompt = _prompt(cfg, params, s["prompt_len"])
    cache = PagedKVCache.for_model(params, s["num_blocks"], s["block_size"], bits=s["bits"],
                                   group_size=s["group_size"])
    q_rng = np.random.default_rng(cfg.seeds["sampling"])
    worst = 0.0
    rows = []

    def on_step(i, cache_):
        nonlocal worst
        length = cache_.tables[seq_holder[0]].logical_len
        blocks = len(cache_.tables[seq_holder[0]].entries)
        for layer in range(c.num_layers):
            for head in range(c.num_kv_heads):
                q = q_rng.normal(size=c.head_dim)
                k, v = cache_.gather(seq_holder[0], layer, head)
                ref = naive_attention(q[None], k, v)[0]
                worst = max(worst, float(np.abs(paged_attention(q, cache_, seq_holder[0], layer, head) - ref).max()))
        st = cache_stats(cache_)
        rows.append({"step": i, "length": length, "blocks": blocks,
                     "expected_blocks": math.ceil(length / cache_.block_size),
                     "bytes_physical": st["bytes_physical"]})

    seq_holder = [cache.alloc_sequence()]
    tokens, seq = paged_greedy_decode(params, prompt, s["steps"], cache, seq=seq_holder[0], on_step=on_step)
    for r in rows:
        yield "step", r
    reference = greedy_decode(params, prompt, s["steps"])
    # copy-on-write: each fork appends its own token; the parent must not change
    isolated = True
    before = [cache.gather(seq, l, h) for l in range(c.num_layers) for h in range(c.num_kv_heads)]
    for f in range(s["forks"]):
        child = cache.fork_prefix(seq)
        kv = np.full((c.num_layers, c.num_kv_heads, c.head_dim), float(f + 1))
        cache.append_kv(child, kv, kv)
        after = [cache.gather(seq, l, h) for l in range(c.num_layers) for h in range(c.num_kv_heads)]
        isolated &= all(np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) for a, b in zip(before, after))
        blk = cache.blocks[cache.tables[child].entries[-1]]
        # a sealed quantized block returns values within half a quantization step
        tol = max((g.scale / 2 for g in (blk.quantized or {}).values() if g is not None), default=0.0) + 1e-12
        isolated &= bool(np.all(np.abs(cache.gather(child, 0, 0)[0][-1] - (f + 1)) <= tol))
    st = cache_stats(cache)
    yield "summary", {
        "tokens": tokens, "token_agreement": float(np.mean(np.array(tokens) == np.array(reference))),
        "max_attention_diff": worst,
        "blocks_match": all(r["blocks"] == r["expected_blocks"] for r in rows),
        "cow_isolated": bool(isolated), "refcounts_ok": refcount_audit(cache),
        "memory_ratio": st["bytes_physical"] / st["bytes_logical"], **st,
    }


def _tts(cfg: RunConfig, params: ModelParams):
    s = cfg.section
    prompt = _prompt(cfg, params, s["prompt_len"])
    critic = (tts.GreedyResumeCritic(params, prompt, s["threshold"], s["lambda"])
              if s["critic"] == "greedy-resume" else tts.IdentityCritic())
    res = tts.run_tts(params, prompt, s["n"], s["k"], s["lambda"], Strategy.parse(s["strategy"]), s["length"],
                      critic, seed=cfg.seeds["sampling"],
                      extractor=lambda toks: tts.extract_answer(toks, s["separator"]))

    def row(t, kind):
        return {"role": kind, "index": t.index, "tokens": list(t.tokens), "weighted_entropy": t.weighted_entropy,
                "avg_logprob": t.avg_logprob, "score": t.score}
    for t in res.trajectories:
        yield "step", row(t, "sampled")
    for t in res.revisions:
        yield "step", row(t, "revision")
    yield "summary", {"answer": list(res.answer), "top_k": [t.index for t in res.top],
                      "best_score": min(t.score for t in res.trajectories),
                      "mean_score": float(np.mean([t.score for t in res.trajectories]))}


def _learn_gates(params, batch, s, seed):
    gs = pruning.GateSet.init(params, temperature=s["tau"])
    rng = np.random.default_rng(seed)
    for _ in range(s["gate_steps"]):
        gs, params, value = pruning.prune_train_step(params, gs, batch, s["lambda1"], s["lambda2"], s["gate_lr"],
                                                     rng, penalty=s["penalty"])
        yield value, gs


def _prune(cfg: RunConfig, params: ModelParams):
    s = cfg.section
    batch = pruning.make_eval_batch(params, s["eval_samples"], s["eval_length"], cfg.seeds["eval"])
    report = pruning.importance_report(params, batch, layer_site=s["layer_site"])
    for l in range(params.config.num_layers):
        yield "step", {"layer": l, "layer_importance": float(report.layer[l]),
                       "neuron_importance": report.neuron[l].tolist()}
    if s["method"] == "gates":
        gs = None
        for i, (value, gs) in enumerate(_learn_gates(params, batch, s, cfg.seeds["gates"])):
            yield "step", {"gate_step": i, "objective": value}
        keep_layers, keep_neurons = gs.binarize()
        if s["kind"] == "width":
            for m in keep_neurons:
                if not m.any():
                    m[np.argmax(m)] = True
            pruned = pruning.apply_width_prune(params, keep_neurons)
        else:
            keep = np.flatnonzero(keep_layers).tolist() or [int(np.argmax(gs.layer_logits))]
            pruned = pruning.apply_depth_prune(params, keep)
    elif s["kind"] == "width":
        pruned = pruning.apply_width_prune(params, pruning.width_masks_by_importance(report.neuron, s["percent"]))
    else:
        pruned = pruning.apply_depth_prune(params, pruning.depth_keep_by_importance(report.layer, s["percent"]))
    if s["weights_out"]:
        weights.save(pruned, s["weights_out"])
    nb, na = pruning.batch_loss(params, batch), pruning.batch_loss(pruned, batch)
    yield "summary", {
        "kind": s["kind"], "percent": s["percent"], "method": s["method"],
        "params_before": params.num_parameters(), "params_after": pruned.num_parameters(),
        "ffn_params_before": pruning.ffn_parameter_count(params),
        "ffn_params_after": pruning.ffn_parameter_count(pruned),
        "layers_after": pruned.config.num_layers, "d_ff_after": [pruned.d_ff(l) for l in range(pruned.config.num_layers)],
        "nll_before": nb, "nll_after": na, "nll_increase": na - nb,
        "importance": report.to_dict(),
    }


def _grpo(cfg: RunConfig, params: ModelParams):
    s = cfg.section
    task = grpo.CopyTask.make(params.config.vocab_size, s["num_prompts"], s["answer_len"],
                              seed=cfg.seeds["prompt"])
    gc = grpo.GRPOConfig(s["g"], s["clip"], s["beta"], s["lr"], s["iters"], s["sync_every"],
                         seed=cfg.seeds["sampling"])
    _, rows = grpo.train(params, task, gc)
    for r in rows:
        yield "step", r
    w = min(10, len(rows))
    first, last = grpo.window_trend(rows, w)
    yield "summary", {"iters": len(rows), "window": w, "first_window_reward": first,
                      "last_window_reward": last, "improved": last > first, "final_kl": rows[-1]["kl"]}


MODE_FUNCS = {"decode": _decode, "kvcache": _kvcache, "tts": _tts, "prune": _prune, "grpo": _grpo}


def run(cfg: RunConfig, timestamp: str | None = None) -> Iterator[dict]:
    """Metrics records for one run: one per logical step, then a summary."""
    params = build_params(cfg)
    seeds = cfg.seeds
    for i, (kind, values) in enumerate(MODE_FUNCS[cfg.mode](cfg, params)):
        yield make_record(cfg.raw, cfg.mode, kind, i, seeds, values, timestamp)
