"""Toy causal transformer: grouped-query attention, GLU feed-forward, pre-LN.

Everything is float64 numpy. Parameters live in a flat ``name -> array`` map so
that gradients, weight files, pruning and optimizer updates all share one
layout. Per layer::

    m = h + gamma * GQA(LN1(h))
    h' = m + gamma * W2 (g * (silu(W1_gate LN2(m)) * (W1_up LN2(m))))

``gamma`` (layer gate) and ``g`` (per-neuron gates) default to 1; they only
matter for pruning.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import attention as attn

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    num_layers: int = 2
    d_model: int = 32
    num_q_heads: int = 4
    num_kv_heads: int = 2
    d_ff: int = 64
    max_seq: int = 512
    seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "d_model", "num_q_heads", "num_kv_heads", "d_ff", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.num_q_heads % self.num_kv_heads:
            raise ValueError(
                f"num_q_heads={self.num_q_heads} is not a multiple of num_kv_heads={self.num_kv_heads}")
        if self.d_model % self.num_q_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by num_q_heads={self.num_q_heads}")

    @property
    def group_size(self) -> int:
        return self.num_q_heads // self.num_kv_heads

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_q_heads

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def gqa_head_map(i: int, g: int) -> int:
    """kv head serving query head ``i`` (zero-based) when ``g`` query heads share one."""
    if g < 1:
        raise ValueError("grouping factor must be >= 1")
    return i // g


def layer_tensor_names(layer: int) -> list[str]:
    p = f"layers.{layer}."
    return [p + n for n in ("ln1_scale", "ln1_shift", "wq", "wk", "wv", "wo",
                            "ln2_scale", "ln2_shift", "w_gate", "w_up", "w_down")]


@dataclass(frozen=True)
class ModelParams:
    config: ModelConfig
    tensors: dict

    def __post_init__(self):
        for arr in self.tensors.values():
            arr.flags.writeable = False

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        names = ["tok_emb", "pos_emb"]
        for layer in range(self.config.num_layers):
            names += layer_tensor_names(layer)
        return names + ["unembed"]

    def d_ff(self, layer: int) -> int:
        return self.tensors[f"layers.{layer}.w_gate"].shape[0]

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.tensors.values()))

    def validate(self) -> None:
        c = self.config
        d, kvd = c.d_model, c.num_kv_heads * c.head_dim
        expected = {"tok_emb": (c.vocab_size, d), "pos_emb": (c.max_seq, d), "unembed": (d, c.vocab_size)}
        for layer in range(c.num_layers):
            p = f"layers.{layer}."
            f = self.d_ff(layer)
            if not 1 <= f <= c.d_ff:
                raise ValueError(f"layer {layer} width {f} outside [1, {c.d_ff}]")
            expected.update({
                p + "ln1_scale": (d,), p + "ln1_shift": (d,), p + "ln2_scale": (d,), p + "ln2_shift": (d,),
                p + "wq": (d, d), p + "wk": (d, kvd), p + "wv": (d, kvd), p + "wo": (d, d),
                p + "w_gate": (f, d), p + "w_up": (f, d), p + "w_down": (d, f),
            })
        if set(expected) != set(self.tensors):
            raise ValueError(f"tensor names mismatch: {sorted(set(expected) ^ set(self.tensors))}")
        for name, shape in expected.items():
            arr = self.tensors[name]
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")

    def replace_tensors(self, updates: dict, config: ModelConfig | None = None) -> "ModelParams":
        tensors = dict(self.tensors)
        tensors.update(updates)
        return ModelParams(config or self.config, tensors)

    def axpy(self, alpha: float, grads: dict) -> "ModelParams":
        """self + alpha * grads, over the tensors present in ``grads``."""
        return self.replace_tensors({n: self.tensors[n] + alpha * g for n, g in grads.items()})


def init_params(config: ModelConfig) -> ModelParams:
    """Gaussian init from ``numpy.random.default_rng(config.seed)`` (PCG64).

    Tensors are drawn in ``ModelParams.names()`` order, so the same config gives
    bit-identical weights on every platform numpy supports.
    """
    rng = np.random.default_rng(config.seed)
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    kvd = config.num_kv_heads * config.head_dim
    t = {
        "tok_emb": rng.normal(0.0, 1.0, (v, d)),
        "pos_emb": rng.normal(0.0, 0.3, (config.max_seq, d)),
    }
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        t[p + "ln1_scale"] = 1.0 + rng.normal(0.0, 0.1, d)
        t[p + "ln1_shift"] = rng.normal(0.0, 0.1, d)
        t[p + "wq"] = rng.normal(0.0, d ** -0.5, (d, d))
        t[p + "wk"] = rng.normal(0.0, d ** -0.5, (d, kvd))
        t[p + "wv"] = rng.normal(0.0, d ** -0.5, (d, kvd))
        t[p + "wo"] = rng.normal(0.0, d ** -0.5, (d, d))
        t[p + "ln2_scale"] = 1.0 + rng.normal(0.0, 0.1, d)
        t[p + "ln2_shift"] = rng.normal(0.0, 0.1, d)
        t[p + "w_gate"] = rng.normal(0.0, d ** -0.5, (f, d))
        t[p + "w_up"] = rng.normal(0.0, d ** -0.5, (f, d))
        t[p + "w_down"] = rng.normal(0.0, f ** -0.5, (d, f))
    t["unembed"] = rng.normal(0.0, 2.0 * d ** -0.5, (d, v))
    return ModelParams(config, t)


# ---------------------------------------------------------------------------
# elementwise helpers


def silu(x):
    return x / (1.0 + np.exp(-x))


def _silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    s = x - x.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def _layernorm(x, scale, shift):
    mu = x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * scale + shift, xhat, inv


def _layernorm_backward(dy, xhat, inv, scale):
    dxhat = dy * scale
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0), dy.reshape(-1, xhat.shape[-1]).sum(0)


# ---------------------------------------------------------------------------
# full-sequence forward / backward


@dataclass
class ForwardTrace:
    """Per-position outputs of one forward pass (T = len(tokens))."""

    tokens: np.ndarray
    logits: np.ndarray            # T x V
    probs: np.ndarray             # T x V
    attn_weights: np.ndarray      # T x T, mean over heads and layers
    ffn_activations: list         # per layer, T x d_ff (ungated GLU outputs z)
    residual_outputs: list        # per layer, T x d_model (h after the block)
    gates: "Gates | None" = None
    _cache: dict = field(default_factory=dict, repr=False)


@dataclass
class GradientSites:
    d_logits: np.ndarray          # T x V
    d_ffn: list                   # per layer, T x d_ff
    d_residual: list              # per layer, T x d_model
    d_params: dict | None = None
    d_layer_gates: np.ndarray | None = None
    d_neuron_gates: list | None = None


@dataclass(frozen=True)
class Gates:
    """Realized gate values: one per layer and one per FFN neuron per layer."""

    layer: np.ndarray
    neuron: tuple

    @classmethod
    def ones(cls, params: ModelParams) -> "Gates":
        c = params.config
        return cls(np.ones(c.num_layers), tuple(np.ones(params.d_ff(i)) for i in range(c.num_layers)))


def _check_tokens(params: ModelParams, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or len(tokens) < 1:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    if len(tokens) > params.config.max_seq:
        raise ValueError(f"sequence length {len(tokens)} exceeds max_seq={params.config.max_seq}")
    if tokens.min() < 0 or tokens.max() >= params.config.vocab_size:
        raise ValueError("token id out of vocabulary")
    return tokens


def _gqa(q, k, v, cfg: ModelConfig, attention: str, block: int):
    """q: T x Hq x dh, k/v: T x Hkv x dh -> (T x Hq x dh output, Hkv x g x T x T probs)."""
    t = q.shape[0]
    g, dh = cfg.group_size, cfg.head_dim
    qh = q.reshape(t, cfg.num_kv_heads, g, dh).transpose(1, 2, 0, 3)
    kh = k.transpose(1, 0, 2)
    vh = v.transpose(1, 0, 2)
    if attention == "naive":
        s = np.einsum("kgtd,ksd->kgts", qh, kh) / math.sqrt(dh)
        s = np.where(np.tri(t, dtype=bool), s, attn.NEG_INF)
        p = softmax(s)
        o = np.einsum("kgts,ksd->kgtd", p, vh)
    elif attention == "flash":
        o = np.empty_like(qh)
        p = np.empty((cfg.num_kv_heads, g, t, t))
        for kv in range(cfg.num_kv_heads):
            for j in range(g):
                o[kv, j], m, l = attn.flash_attention(qh[kv, j], kh[kv], vh[kv], causal=True,
                                                      block_rows=block, block_cols=block,
                                                      return_stats=True)
                p[kv, j] = attn.recompute_probs(qh[kv, j], kh[kv], m, l, causal=True,
                                                block_rows=block, block_cols=block)
    else:
        raise ValueError(f"unknown attention kind {attention!r}")
    return o.transpose(2, 0, 1, 3).reshape(t, cfg.num_q_heads, dh), p


def forward(params: ModelParams, tokens, gates: Gates | None = None,
            attention: str = "naive", block: int = 16, perturb: dict | None = None) -> ForwardTrace:
    """Full causal forward pass; records everything backward() and the analyses need.

    ``perturb`` maps ``("ffn", layer)`` or ``("residual", layer)`` to an array
    added to z or to the block output; finite-difference checks use it.
    """
    perturb = perturb or {}
    tokens = _check_tokens(params, tokens)
    cfg = params.config
    t, dh = len(tokens), cfg.head_dim
    h = params["tok_emb"][tokens] + params["pos_emb"][:t]
    cache = {"h0": h}
    attn_sum = np.zeros((t, t))
    ffn_acts, residuals = [], []
    for layer in range(cfg.num_layers):
        p = f"layers.{layer}."
        gam = 1.0 if gates is None else float(gates.layer[layer])
        a_in, xhat1, inv1 = _layernorm(h, params[p + "ln1_scale"], params[p + "ln1_shift"])
        q = (a_in @ params[p + "wq"]).reshape(t, cfg.num_q_heads, dh)
        k = (a_in @ params[p + "wk"]).reshape(t, cfg.num_kv_heads, dh)
        v = (a_in @ params[p + "wv"]).reshape(t, cfg.num_kv_heads, dh)
        o, probs = _gqa(q, k, v, cfg, attention, block)
        o_cat = o.reshape(t, cfg.d_model)
        a_out = o_cat @ params[p + "wo"]
        m = h + gam * a_out
        f_in, xhat2, inv2 = _layernorm(m, params[p + "ln2_scale"], params[p + "ln2_shift"])
        gpre = f_in @ params[p + "w_gate"].T
        upre = f_in @ params[p + "w_up"].T
        z = silu(gpre) * upre + perturb.get(("ffn", layer), 0.0)
        zg = z if gates is None else z * gates.neuron[layer]
        f_out = zg @ params[p + "w_down"].T
        h_new = m + gam * f_out + perturb.get(("residual", layer), 0.0)
        cache[layer] = dict(h_in=h, a_in=a_in, xhat1=xhat1, inv1=inv1, q=q, k=k, v=v, probs=probs,
                            o_cat=o_cat, a_out=a_out, m=m, f_in=f_in, xhat2=xhat2, inv2=inv2,
                            gpre=gpre, upre=upre, z=z, zg=zg, f_out=f_out, gamma=gam)
        attn_sum += probs.sum(axis=(0, 1))
        ffn_acts.append(z)
        residuals.append(h_new)
        h = h_new
    logits = h @ params["unembed"]
    cache["h_final"] = h
    return ForwardTrace(
        tokens=tokens,
        logits=logits,
        probs=softmax(logits),
        attn_weights=attn_sum / (cfg.num_layers * cfg.num_q_heads),
        ffn_activations=ffn_acts,
        residual_outputs=residuals,
        gates=gates,
        _cache=cache,
    )


def _target_mask(trace: ForwardTrace, targets) -> tuple[np.ndarray, np.ndarray]:
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != trace.tokens.shape:
        raise ValueError(f"targets length {targets.shape} != sequence length {trace.tokens.shape}")
    mask = targets >= 0
    return targets, mask


def nll_loss(trace: ForwardTrace, targets) -> float:
    """-sum_t log P_t(target_t); negative targets are ignored positions."""
    targets, mask = _target_mask(trace, targets)
    logp = log_softmax(trace.logits)
    pos = np.flatnonzero(mask)
    return float(-logp[pos, targets[pos]].sum())


def nll_logit_grad(trace: ForwardTrace, targets) -> np.ndarray:
    """d nll / d logits = P_t - onehot(target_t) on scored rows, 0 elsewhere."""
    targets, mask = _target_mask(trace, targets)
    d = np.where(mask[:, None], trace.probs, 0.0)
    pos = np.flatnonzero(mask)
    d[pos, targets[pos]] -= 1.0
    return d


def backward(params: ModelParams, trace: ForwardTrace, targets=None, d_logits=None,
             param_grads: bool = True) -> GradientSites:
    """Reverse-mode pass through ``trace``.

    Either ``targets`` (gradient of nll_loss) or an explicit upstream
    ``d_logits`` must be given. Returns gradients at the logits, the GLU outputs
    z, each block's residual output, the gate values and (optionally) every
    parameter tensor.
    """
    cache = trace._cache
    cfg = params.config
    if not cache or len(trace.ffn_activations) != cfg.num_layers \
            or trace.logits.shape[1] != cfg.vocab_size:
        raise ValueError("trace was not produced by forward() on these params")
    if d_logits is None:
        if targets is None:
            raise ValueError("need targets or d_logits")
        d_logits = nll_logit_grad(trace, targets)
    t, dh, g = len(trace.tokens), cfg.head_dim, cfg.group_size
    gates = trace.gates
    grads: dict = {}
    h_final = cache["h_final"]
    if param_grads:
        grads["unembed"] = h_final.T @ d_logits
    dh_ = d_logits @ params["unembed"].T
    d_ffn = [None] * cfg.num_layers
    d_res = [None] * cfg.num_layers
    d_lgate = np.zeros(cfg.num_layers)
    d_ngate = [None] * cfg.num_layers
    scale = 1.0 / math.sqrt(dh)
    for layer in reversed(range(cfg.num_layers)):
        p = f"layers.{layer}."
        c = cache[layer]
        gam = c["gamma"]
        d_res[layer] = dh_
        # h' = m + gamma * f_out
        dm = dh_.copy()
        df = gam * dh_
        d_lgate[layer] += float((dh_ * c["f_out"]).sum())
        dzg = df @ params[p + "w_down"]
        dz = dzg if gates is None else dzg * gates.neuron[layer]
        d_ngate[layer] = (dzg * c["z"]).sum(axis=0)
        d_ffn[layer] = dz
        sg = silu(c["gpre"])
        dgpre = dz * c["upre"] * _silu_grad(c["gpre"])
        dupre = dz * sg
        df_in = dgpre @ params[p + "w_gate"] + dupre @ params[p + "w_up"]
        dm_ln, ds2, db2 = _layernorm_backward(df_in, c["xhat2"], c["inv2"], params[p + "ln2_scale"])
        dm += dm_ln
        # m = h + gamma * a_out
        dh_in = dm.copy()
        da = gam * dm
        d_lgate[layer] += float((dm * c["a_out"]).sum())
        do_cat = da @ params[p + "wo"].T
        do = do_cat.reshape(t, cfg.num_kv_heads, g, dh).transpose(1, 2, 0, 3)
        qh = c["q"].reshape(t, cfg.num_kv_heads, g, dh).transpose(1, 2, 0, 3)
        kh = c["k"].transpose(1, 0, 2)
        vh = c["v"].transpose(1, 0, 2)
        pr = c["probs"]
        dvh = np.einsum("kgts,kgtd->ksd", pr, do)
        dp = np.einsum("kgtd,ksd->kgts", do, vh)
        ds = pr * (dp - (dp * pr).sum(axis=-1, keepdims=True))
        dqh = np.einsum("kgts,ksd->kgtd", ds, kh) * scale
        dkh = np.einsum("kgts,kgtd->ksd", ds, qh) * scale
        dq = dqh.transpose(2, 0, 1, 3).reshape(t, cfg.d_model)
        dk = dkh.transpose(1, 0, 2).reshape(t, -1)
        dv = dvh.transpose(1, 0, 2).reshape(t, -1)
        da_in = dq @ params[p + "wq"].T + dk @ params[p + "wk"].T + dv @ params[p + "wv"].T
        dx_ln, ds1, db1 = _layernorm_backward(da_in, c["xhat1"], c["inv1"], params[p + "ln1_scale"])
        dh_in += dx_ln
        if param_grads:
            grads[p + "w_down"] = df.T @ c["zg"]
            grads[p + "w_gate"] = dgpre.T @ c["f_in"]
            grads[p + "w_up"] = dupre.T @ c["f_in"]
            grads[p + "ln2_scale"], grads[p + "ln2_shift"] = ds2, db2
            grads[p + "wo"] = c["o_cat"].T @ da
            grads[p + "wq"] = c["a_in"].T @ dq
            grads[p + "wk"] = c["a_in"].T @ dk
            grads[p + "wv"] = c["a_in"].T @ dv
            grads[p + "ln1_scale"], grads[p + "ln1_shift"] = ds1, db1
        dh_ = dh_in
    if param_grads:
        d_tok = np.zeros_like(params["tok_emb"])
        np.add.at(d_tok, trace.tokens, dh_)
        d_pos = np.zeros_like(params["pos_emb"])
        d_pos[:t] = dh_
        grads["tok_emb"], grads["pos_emb"] = d_tok, d_pos
    return GradientSites(d_logits=d_logits, d_ffn=d_ffn, d_residual=d_res,
                         d_params=grads if param_grads else None,
                         d_layer_gates=d_lgate, d_neuron_gates=d_ngate)


# ---------------------------------------------------------------------------
# incremental decoding against a contiguous KV cache


@dataclass
class KVCache:
    """Per-layer keys/values, each (B, H_kv, n, d_h); B may be 1 and broadcast."""

    keys: list
    values: list

    @property
    def length(self) -> int:
        return self.keys[0].shape[2]

    @classmethod
    def empty(cls, cfg: ModelConfig, batch: int = 1) -> "KVCache":
        shape = (batch, cfg.num_kv_heads, 0, cfg.head_dim)
        return cls([np.zeros(shape) for _ in range(cfg.num_layers)],
                   [np.zeros(shape) for _ in range(cfg.num_layers)])

    def append(self, new_k: list, new_v: list, index=None, upto: int | None = None) -> "KVCache":
        """Append suffix K/V (from extend) to the cache; ``index`` picks batch rows."""
        def take(a):
            a = a if index is None else a[index]
            return a if upto is None else a[..., :upto, :]
        return KVCache([np.concatenate([k, take(nk)], axis=2) for k, nk in zip(self.keys, new_k)],
                       [np.concatenate([v, take(nv)], axis=2) for v, nv in zip(self.values, new_v)])

    def select(self, index) -> "KVCache":
        return KVCache([k[index] for k in self.keys], [v[index] for v in self.values])


def extend(params: ModelParams, cache: KVCache, suffixes) -> tuple[np.ndarray, list, list]:
    """Run ``suffixes`` (B x S token ids) on top of the cached prefix.

    Row b, position s sees the whole prefix plus ``suffixes[b, :s+1]``; trailing
    padding therefore never influences earlier positions. Returns logits
    (B x S x V) and per-layer suffix keys/values (B x H_kv x S x d_h). The cache
    itself is not modified.
    """
    suffixes = np.atleast_2d(np.asarray(suffixes, dtype=np.int64))
    cfg = params.config
    b, s = suffixes.shape
    n = cache.length
    if n + s > cfg.max_seq:
        raise ValueError(f"sequence length {n + s} exceeds max_seq={cfg.max_seq}")
    if suffixes.min() < 0 or suffixes.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary")
    dh, hkv, g = cfg.head_dim, cfg.num_kv_heads, cfg.group_size
    scale = 1.0 / math.sqrt(dh)
    h = params["tok_emb"][suffixes] + params["pos_emb"][n:n + s]
    causal = np.tri(s, dtype=bool)
    new_k, new_v = [], []
    for layer in range(cfg.num_layers):
        p = f"layers.{layer}."
        a_in, _, _ = _layernorm(h, params[p + "ln1_scale"], params[p + "ln1_shift"])
        # queries grouped per kv head: (b, hkv, g*s, dh), rows ordered (head-in-group, position)
        q = (a_in @ params[p + "wq"]).reshape(b, s, hkv, g, dh).transpose(0, 2, 3, 1, 4) \
            .reshape(b, hkv, g * s, dh)
        k = (a_in @ params[p + "wk"]).reshape(b, s, hkv, dh).transpose(0, 2, 1, 3)
        v = (a_in @ params[p + "wv"]).reshape(b, s, hkv, dh).transpose(0, 2, 1, 3)
        sc_pre = (q @ cache.keys[layer].swapaxes(-1, -2)) * scale
        sc_suf = (q @ k.swapaxes(-1, -2)) * scale
        sc_suf = np.where(np.tile(causal, (g, 1)), sc_suf, attn.NEG_INF)
        pr = softmax(np.concatenate([sc_pre, sc_suf], axis=-1))
        o = pr[..., :n] @ cache.values[layer] + pr[..., n:] @ v
        o_cat = o.reshape(b, hkv, g, s, dh).transpose(0, 3, 1, 2, 4).reshape(b, s, cfg.d_model)
        m = h + o_cat @ params[p + "wo"]
        f_in, _, _ = _layernorm(m, params[p + "ln2_scale"], params[p + "ln2_shift"])
        z = silu(f_in @ params[p + "w_gate"].T) * (f_in @ params[p + "w_up"].T)
        h = m + z @ params[p + "w_down"].T
        new_k.append(k)
        new_v.append(v)
    return h @ params["unembed"], new_k, new_v


def prefill(params: ModelParams, tokens) -> KVCache:
    """Cache for ``tokens`` (batch 1)."""
    tokens = _check_tokens(params, tokens)
    _, k, v = extend(params, KVCache.empty(params.config), tokens[None, :])
    return KVCache(k, v)


def decode_step(params: ModelParams, token: int, pos: int, attend) -> np.ndarray:
    """Logits for one token at position ``pos``; attention is delegated.

    ``attend(layer, q, k, v)`` receives the new token's query (H_q x d_h) and
    key/value (H_kv x d_h), must store k/v in its cache and return the attention
    output (H_q x d_h) over every cached position including this one.
    """
    cfg = params.config
    h = params["tok_emb"][token] + params["pos_emb"][pos]
    for layer in range(cfg.num_layers):
        p = f"layers.{layer}."
        a_in, _, _ = _layernorm(h, params[p + "ln1_scale"], params[p + "ln1_shift"])
        q = (a_in @ params[p + "wq"]).reshape(cfg.num_q_heads, cfg.head_dim)
        k = (a_in @ params[p + "wk"]).reshape(cfg.num_kv_heads, cfg.head_dim)
        v = (a_in @ params[p + "wv"]).reshape(cfg.num_kv_heads, cfg.head_dim)
        o = attend(layer, q, k, v)
        m = h + o.reshape(cfg.d_model) @ params[p + "wo"]
        f_in, _, _ = _layernorm(m, params[p + "ln2_scale"], params[p + "ln2_shift"])
        z = silu(f_in @ params[p + "w_gate"].T) * (f_in @ params[p + "w_up"].T)
        h = m + z @ params[p + "w_down"].T
    return h @ params["unembed"]


def with_config(params: ModelParams, **changes) -> ModelConfig:
    return replace(params.config, **changes)
