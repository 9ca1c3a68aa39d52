"""Scaled dot-product attention: a materializing reference and a blockwise
online-softmax implementation.

Both take ``q`` (N x d_k), ``k`` (N_k x d_k), ``v`` (N_k x d_v). Causal masking
aligns query row ``i`` with key column ``i`` (square case) and masks ``j > i``.
Masked scores use the finite sentinel ``NEG_INF`` rather than ``-inf`` so the
running-max arithmetic never produces ``inf - inf``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NEG_INF = -1e30


def _check(q: np.ndarray, k: np.ndarray, v: np.ndarray, causal: bool) -> None:
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("q, k, v must be 2-D")
    if q.shape[0] < 1 or k.shape[0] < 1:
        raise ValueError("attention needs at least one query and one key")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"q/k head dims differ: {q.shape[1]} vs {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"k/v lengths differ: {k.shape[0]} vs {v.shape[0]}")
    if causal and q.shape[0] != k.shape[0]:
        raise ValueError("causal attention requires square scores")


def naive_attention(q, k, v, causal: bool = False, return_probs: bool = False):
    """softmax(q k^T / sqrt(d_k) + mask) v with the full score matrix materialized."""
    q, k, v = (np.asarray(a) for a in (q, k, v))
    _check(q, k, v, causal)
    s = (q @ k.T) / math.sqrt(q.shape[1])
    if causal:
        s = np.where(np.tri(*s.shape, dtype=bool), s, NEG_INF)
    s = s - s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    out = p @ v
    return (out, p) if return_probs else out


def naive_attention_backward(q, k, v, d_out, causal: bool = False):
    """Gradients (dq, dk, dv) of ``sum(d_out * naive_attention(q, k, v))``."""
    _, p = naive_attention(q, k, v, causal, return_probs=True)
    scale = 1.0 / math.sqrt(q.shape[1])
    dv = p.T @ d_out
    dp = d_out @ v.T
    ds = p * (dp - (dp * p).sum(axis=1, keepdims=True))
    return ds @ k * scale, ds.T @ q * scale, dv


def _blocks(n: int, size: int):
    for start in range(0, n, size):
        yield start, min(start + size, n)


def flash_attention(q, k, v, causal: bool = False, block_rows: int = 64,
                    block_cols: int = 64, return_stats: bool = False):
    """Blockwise attention with online softmax; never forms the N x N score matrix.

    For each query block the running output, normalizer ``l`` and row max ``m``
    are merged across key/value blocks. With ``return_stats`` the per-row ``m``
    and ``l`` are returned too; they are all the backward pass needs to rebuild
    any probability block.
    """
    q, k, v = (np.asarray(a) for a in (q, k, v))
    _check(q, k, v, causal)
    if block_rows < 1 or block_cols < 1:
        raise ValueError("block sizes must be >= 1")
    n_q, n_k = q.shape[0], k.shape[0]
    dtype = np.result_type(q, k, v)
    scale = 1.0 / math.sqrt(q.shape[1])
    out = np.zeros((n_q, v.shape[1]), dtype=dtype)
    m_all = np.empty(n_q, dtype=dtype)
    l_all = np.empty(n_q, dtype=dtype)

    for r0, r1 in _blocks(n_q, block_rows):
        q_i = q[r0:r1]
        o_i = np.zeros((r1 - r0, v.shape[1]), dtype=dtype)
        l_i = np.zeros(r1 - r0, dtype=dtype)
        m_i = np.full(r1 - r0, NEG_INF, dtype=dtype)
        for c0, c1 in _blocks(n_k, block_cols):
            if causal and c0 > r1 - 1:
                break
            s_ij = (q_i @ k[c0:c1].T) * dtype.type(scale)
            if causal:
                keep = np.arange(r0, r1)[:, None] >= np.arange(c0, c1)[None, :]
                s_ij = np.where(keep, s_ij, NEG_INF)
            m_ij = s_ij.max(axis=1)
            p_ij = np.exp(s_ij - m_ij[:, None])
            if causal:
                p_ij = np.where(keep, p_ij, 0.0)
            l_ij = p_ij.sum(axis=1)
            m_new = np.maximum(m_i, m_ij)
            old = np.exp(m_i - m_new)
            new = np.exp(m_ij - m_new)
            l_new = old * l_i + new * l_ij
            o_i = ((old * l_i)[:, None] * o_i + new[:, None] * (p_ij @ v[c0:c1])) / l_new[:, None]
            m_i, l_i = m_new, l_new
        out[r0:r1] = o_i
        m_all[r0:r1] = m_i
        l_all[r0:r1] = l_i
    if return_stats:
        return out, m_all, l_all
    return out


def recompute_probs(q, k, m, l, causal: bool = False, block_rows: int = 64,
                    block_cols: int = 64) -> np.ndarray:
    """Rebuild the attention probabilities block by block from saved (m, l)."""
    q, k = np.asarray(q), np.asarray(k)
    scale = 1.0 / math.sqrt(q.shape[1])
    p = np.zeros((q.shape[0], k.shape[0]), dtype=np.result_type(q, k))
    for r0, r1 in _blocks(q.shape[0], block_rows):
        for c0, c1 in _blocks(k.shape[0], block_cols):
            s_ij = (q[r0:r1] @ k[c0:c1].T) * scale
            blk = np.exp(s_ij - m[r0:r1, None]) / l[r0:r1, None]
            if causal:
                blk = np.where(np.arange(r0, r1)[:, None] >= np.arange(c0, c1)[None, :], blk, 0.0)
            p[r0:r1, c0:c1] = blk
    return p


def flash_attention_backward(q, k, v, out, d_out, m, l, causal: bool = False,
                             block_rows: int = 64, block_cols: int = 64):
    """Blockwise gradients using recomputed probability tiles.

    Only O(N) statistics (``m``, ``l`` and the row dots ``D = rowsum(dO * O)``)
    are kept between tiles.
    """
    q, k, v = (np.asarray(a) for a in (q, k, v))
    scale = 1.0 / math.sqrt(q.shape[1])
    dq = np.zeros_like(q, dtype=np.result_type(q, d_out))
    dk = np.zeros_like(k, dtype=dq.dtype)
    dv = np.zeros_like(v, dtype=dq.dtype)
    row_dot = (d_out * out).sum(axis=1)
    for c0, c1 in _blocks(k.shape[0], block_cols):
        k_j, v_j = k[c0:c1], v[c0:c1]
        for r0, r1 in _blocks(q.shape[0], block_rows):
            if causal and c0 > r1 - 1:
                continue
            s_ij = (q[r0:r1] @ k_j.T) * scale
            p_ij = np.exp(s_ij - m[r0:r1, None]) / l[r0:r1, None]
            if causal:
                p_ij = np.where(np.arange(r0, r1)[:, None] >= np.arange(c0, c1)[None, :], p_ij, 0.0)
            do_i = d_out[r0:r1]
            dv[c0:c1] += p_ij.T @ do_i
            dp = do_i @ v_j.T
            ds = p_ij * (dp - row_dot[r0:r1, None])
            dq[r0:r1] += ds @ k_j * scale
            dk[c0:c1] += ds.T @ q[r0:r1] * scale
    return dq, dk, dv


@dataclass(frozen=True)
class IOStats:
    hbm_reads: int
    hbm_writes: int
    sp_traffic: int
    flops: int


def attention_stats(n: int, d_k: int, d_v: int | None = None, block_rows: int = 64,
                    block_cols: int = 64, sram_elems: int = 24_576) -> dict[str, IOStats]:
    """Analytic HBM element transfers for the naive and blockwise schedules.

    Naive: Q, K, V read once; when the N x N score matrix exceeds SRAM it is
    written as S, re-read, written as P and re-read (4 N^2 elements). Blockwise:
    each query block streams every K/V block, no S/P ever leaves SRAM, and the
    per-row (m, l) statistics are written once. Nothing here is measured.
    """
    d_v = d_k if d_v is None else d_v
    t_r = -(-n // block_rows)
    sp = 4 * n * n if n * n > sram_elems else 0
    fwd_flops = 2 * n * n * d_k + 2 * n * n * d_v
    naive = IOStats(
        hbm_reads=n * (2 * d_k + d_v) + sp // 2,
        hbm_writes=n * d_v + sp // 2,
        sp_traffic=sp,
        flops=fwd_flops,
    )
    blockwise = IOStats(
        hbm_reads=n * d_k + t_r * n * (d_k + d_v),
        hbm_writes=n * d_v + 2 * n,
        sp_traffic=0,
        flops=fwd_flops,
    )
    return {"naive": naive, "blockwise": blockwise}


def backward_flops(n: int, d_k: int, d_v: int | None = None, recompute: bool = True) -> int:
    """FLOP model of the attention backward pass, optionally with tile recomputation."""
    d_v = d_k if d_v is None else d_v
    # dV, dP, dQ, dK matmuls
    base = 2 * n * n * d_v + 2 * n * n * d_v + 2 * n * n * d_k + 2 * n * n * d_k
    return base + (2 * n * n * d_k if recompute else 0)
