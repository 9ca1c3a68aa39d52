"""Structured width (FFN neuron) and depth (layer) pruning."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .model import Gates, ModelParams, backward, forward, layer_tensor_names, nll_logit_grad, nll_loss


def _batch(eval_batch):
    eval_batch = list(eval_batch)
    if not eval_batch:
        raise ValueError("empty evaluation batch")
    return eval_batch


def batch_loss(params: ModelParams, eval_batch, gates: Gates | None = None) -> float:
    """Mean over samples of the summed token NLL."""
    eval_batch = _batch(eval_batch)
    return float(np.mean([nll_loss(forward(params, x, gates), y) for x, y in eval_batch]))


@dataclass
class ImportanceReport:
    neuron: list            # per layer, length d_ff
    layer: np.ndarray       # length L
    num_samples: int

    def to_dict(self) -> dict:
        return {"neuron": [n.tolist() for n in self.neuron], "layer": self.layer.tolist(),
                "num_samples": self.num_samples}


def neuron_importance(params: ModelParams, eval_batch, loss_scale: float = 1.0) -> list:
    """I_j = mean over samples and positions of |dL/dz_j * z_j|, per layer."""
    eval_batch = _batch(eval_batch)
    sums = [np.zeros(params.d_ff(l)) for l in range(params.config.num_layers)]
    count = 0
    for x, y in eval_batch:
        tr = forward(params, x)
        gs = backward(params, tr, d_logits=loss_scale * _logit_grad(tr, y), param_grads=False)
        for l in range(params.config.num_layers):
            sums[l] += np.abs(gs.d_ffn[l] * tr.ffn_activations[l]).sum(axis=0)
        count += len(tr.tokens)
    return [s / count for s in sums]


def layer_importance(params: ModelParams, eval_batch, loss_scale: float = 1.0,
                     site: str = "residual") -> np.ndarray:
    """Per-layer mean over samples of an absolute gradient-activation inner product.

    ``site="residual"`` pairs the residual output h^(l) with dL/dh^(l).
    ``site="block"`` pairs the layer's own update to the residual stream with the
    same gradient, i.e. |dL/dgamma| at gamma = 1: the first-order estimate of the
    loss change from removing the layer.
    """
    if site not in ("residual", "block"):
        raise ValueError(f"unknown site {site!r}")
    eval_batch = _batch(eval_batch)
    acc = np.zeros(params.config.num_layers)
    for x, y in eval_batch:
        tr = forward(params, x)
        d_logits = loss_scale * _logit_grad(tr, y)
        if site == "block":
            acc += np.abs(backward(params, tr, d_logits=d_logits, param_grads=False).d_layer_gates)
            continue
        gs = backward(params, tr, d_logits=d_logits, param_grads=False)
        for l in range(params.config.num_layers):
            acc[l] += abs(float((gs.d_residual[l] * tr.residual_outputs[l]).sum()))
    return acc / len(eval_batch)


def make_eval_batch(params: ModelParams, num_samples: int = 8, length: int = 16, seed: int = 0,
                    targets: str = "greedy") -> list:
    """Seeded random inputs; targets are the model's own argmax (``greedy``) or random tokens."""
    if targets not in ("greedy", "random"):
        raise ValueError(f"unknown target kind {targets!r}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(num_samples):
        s = rng.integers(0, params.config.vocab_size, length + 1)
        y = s[1:] if targets == "random" else forward(params, s[:-1]).logits.argmax(-1)
        out.append((s[:-1], y))
    return out


def importance_report(params: ModelParams, eval_batch, layer_site: str = "residual") -> ImportanceReport:
    eval_batch = _batch(eval_batch)
    return ImportanceReport(neuron_importance(params, eval_batch),
                            layer_importance(params, eval_batch, site=layer_site), len(eval_batch))


def _logit_grad(trace, targets):
    return nll_logit_grad(trace, targets)


# ---------------------------------------------------------------------------
# Concrete gates


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def concrete_gate(log_alpha, tau: float, u):
    """sigma((log_alpha + log u - log(1 - u)) / tau)."""
    u = np.asarray(u, dtype=np.float64)
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("u must lie strictly inside (0, 1)")
    return _sigmoid((np.asarray(log_alpha) + np.log(u) - np.log1p(-u)) / tau)


def sample_gate(alpha, tau: float, u):
    """Gate value for a positive location parameter ``alpha``."""
    return concrete_gate(np.log(alpha), tau, u)


@dataclass
class GateSet:
    """Learnable log(alpha) per layer and per FFN neuron."""

    layer_logits: np.ndarray
    neuron_logits: list
    temperature: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    @classmethod
    def init(cls, params: ModelParams, value: float = 3.0, temperature: float = 0.5) -> "GateSet":
        c = params.config
        return cls(np.full(c.num_layers, value), [np.full(params.d_ff(l), value) for l in range(c.num_layers)],
                   temperature)

    def realize(self, u_layer=None, u_neuron=None) -> Gates:
        """Sampled gates for the given uniforms; u = 0.5 everywhere gives the noise-free value."""
        u_layer = np.full(len(self.layer_logits), 0.5) if u_layer is None else u_layer
        u_neuron = [np.full(len(n), 0.5) for n in self.neuron_logits] if u_neuron is None else u_neuron
        return Gates(concrete_gate(self.layer_logits, self.temperature, u_layer),
                     tuple(concrete_gate(a, self.temperature, u) for a, u in zip(self.neuron_logits, u_neuron)))

    def draw_uniforms(self, rng: np.random.Generator):
        lo = np.finfo(float).tiny
        return (rng.uniform(lo, 1.0, len(self.layer_logits)),
                [rng.uniform(lo, 1.0, len(n)) for n in self.neuron_logits])

    def binarize(self) -> tuple[np.ndarray, list]:
        """Keep a gate iff its noise-free value sigma(log_alpha / tau) >= 0.5."""
        g = self.realize()
        return g.layer >= 0.5, [n >= 0.5 for n in g.neuron]


def gated_forward(params: ModelParams, gates: Gates, tokens):
    if len(gates.layer) != params.config.num_layers or any(
            len(g) != params.d_ff(l) for l, g in enumerate(gates.neuron)):
        raise ValueError("gate shapes do not match the model")
    return forward(params, tokens, gates=gates)


def sparsity_objective(task_loss: float, gates: Gates, lambda1: float, lambda2: float,
                       penalty: str = "pruned") -> float:
    """task + lambda1 * sum(1 - gamma) + lambda2 * sum(1 - g).

    ``penalty="mass"`` swaps both penalty terms for sum(gamma) and sum(g), which
    rewards switching gates off instead of penalizing it.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("penalty weights must be >= 0")
    if penalty == "pruned":
        return float(task_loss + lambda1 * np.sum(1.0 - gates.layer)
                     + lambda2 * sum(np.sum(1.0 - g) for g in gates.neuron))
    if penalty == "mass":
        return float(task_loss + lambda1 * np.sum(gates.layer) + lambda2 * sum(np.sum(g) for g in gates.neuron))
    raise ValueError(f"unknown penalty {penalty!r}")


def relaxed_objective(params: ModelParams, gateset: GateSet, eval_batch, u_layer, u_neuron,
                      lambda1: float, lambda2: float, penalty: str = "pruned"):
    """Objective value and its gradient w.r.t. the gate log-alphas (and params).

    Returns ``(value, d_layer_logits, d_neuron_logits, d_params)``.
    """
    eval_batch = _batch(eval_batch)
    gates = gateset.realize(u_layer, u_neuron)
    tau = gateset.temperature
    nb = len(eval_batch)
    d_gl = np.zeros_like(gates.layer)
    d_gn = [np.zeros_like(g) for g in gates.neuron]
    d_params: dict = {}
    task = 0.0
    for x, y in eval_batch:
        tr = forward(params, x, gates)
        task += nll_loss(tr, y) / nb
        gs = backward(params, tr, y)
        d_gl += gs.d_layer_gates / nb
        for l in range(len(d_gn)):
            d_gn[l] += gs.d_neuron_gates[l] / nb
        for name, g in gs.d_params.items():
            d_params[name] = d_params.get(name, 0.0) + g / nb
    sign = -1.0 if penalty == "pruned" else 1.0
    value = sparsity_objective(task, gates, lambda1, lambda2, penalty)
    d_gl = d_gl + sign * lambda1
    d_gn = [d + sign * lambda2 for d in d_gn]
    # d gate / d log_alpha = g (1 - g) / tau
    d_ll = d_gl * gates.layer * (1 - gates.layer) / tau
    d_nl = [d * g * (1 - g) / tau for d, g in zip(d_gn, gates.neuron)]
    return value, d_ll, d_nl, d_params


def prune_train_step(params: ModelParams, gateset: GateSet, eval_batch, lambda1: float, lambda2: float,
                     lr: float, rng: np.random.Generator, co_train: bool = False,
                     penalty: str = "pruned") -> tuple[GateSet, ModelParams, float]:
    """One gradient-descent step through the Concrete relaxation."""
    u_l, u_n = gateset.draw_uniforms(rng)
    value, d_ll, d_nl, d_params = relaxed_objective(params, gateset, eval_batch, u_l, u_n,
                                                    lambda1, lambda2, penalty)
    new_gates = replace(gateset, layer_logits=gateset.layer_logits - lr * d_ll,
                        neuron_logits=[a - lr * d for a, d in zip(gateset.neuron_logits, d_nl)])
    if co_train:
        params = params.axpy(-lr, d_params)
    return new_gates, params, value


def anneal(tau0: float = 0.5, tau_min: float = 0.05, steps: int = 100):
    """Geometric temperature schedule from tau0 to tau_min."""
    if steps <= 1:
        return [tau0]
    r = (tau_min / tau0) ** (1.0 / (steps - 1))
    return [tau0 * r ** i for i in range(steps)]


# ---------------------------------------------------------------------------
# physical pruning


def apply_width_prune(params: ModelParams, keep_masks) -> ModelParams:
    """Drop FFN neurons: rows of W1_gate / W1_up and columns of W2."""
    updates = {}
    for l, mask in enumerate(keep_masks):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (params.d_ff(l),):
            raise ValueError(f"layer {l}: mask shape {mask.shape} != ({params.d_ff(l)},)")
        if not mask.any():
            raise ValueError(f"layer {l}: keep mask removes every neuron")
        p = f"layers.{l}."
        updates[p + "w_gate"] = params[p + "w_gate"][mask].copy()
        updates[p + "w_up"] = params[p + "w_up"][mask].copy()
        updates[p + "w_down"] = params[p + "w_down"][:, mask].copy()
    if len(keep_masks) != params.config.num_layers:
        raise ValueError("need one keep mask per layer")
    out = params.replace_tensors(updates)
    out.validate()
    return out


def apply_depth_prune(params: ModelParams, keep) -> ModelParams:
    """Keep the listed layers (zero-based), in their original order."""
    keep = sorted(set(int(k) for k in keep))
    if not keep:
        raise ValueError("must keep at least one layer")
    if keep[0] < 0 or keep[-1] >= params.config.num_layers:
        raise ValueError("layer index out of range")
    tensors = {n: params[n] for n in ("tok_emb", "pos_emb", "unembed")}
    for new, old in enumerate(keep):
        for src, dst in zip(layer_tensor_names(old), layer_tensor_names(new)):
            tensors[dst] = params[src]
    out = ModelParams(replace(params.config, num_layers=len(keep)), tensors)
    out.validate()
    return out


def prune_count(total: int, percent: float) -> int:
    """Units removed at ``percent``: ceil, so any positive level removes at least one, capped at total - 1."""
    if percent <= 0:
        return 0
    return min(total - 1, math.ceil(total * percent / 100.0 - 1e-9))


def width_masks_by_importance(importance: list, percent: float) -> list:
    masks = []
    for scores in importance:
        k = prune_count(len(scores), percent)
        mask = np.ones(len(scores), dtype=bool)
        mask[np.argsort(scores, kind="stable")[:k]] = False
        masks.append(mask)
    return masks


def depth_keep_by_importance(importance: np.ndarray, percent: float) -> list:
    k = prune_count(len(importance), percent)
    drop = set(np.argsort(importance, kind="stable")[:k].tolist())
    return [l for l in range(len(importance)) if l not in drop]


def ffn_parameter_count(params: ModelParams) -> int:
    return sum(3 * params.d_ff(l) * params.config.d_model for l in range(params.config.num_layers))
