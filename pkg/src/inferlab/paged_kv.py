"""Paged KV cache: fixed-size physical blocks addressed through per-sequence
block tables, with lazy allocation, copy-on-write prefix sharing and optional
group-wise integer quantization of sealed (full) blocks.
"""
from __future__ import annotations

import heapq
import math
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import attention as attn
from .model import ModelParams, decode_step
from .sampling import greedy

FP_BYTES = 8          # reference payload is float64
META_BYTES = 16       # per quantization group: float64 scale + float64 zero point


class OutOfBlocksError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuantizedGroup:
    codes: np.ndarray
    scale: float
    zero_point: float
    bits: int


def quantize_group(values, bits: int) -> QuantizedGroup:
    """codes = round(x / scale - zero), scale = (max - min) / (2^n - 1), zero = round(min / scale).

    A constant group has no range; it is stored with scale = |c| (1 for c = 0)
    so that zero = sign(c), codes = 0 and dequantization returns c exactly.
    """
    if bits not in (4, 8):
        raise ValueError(f"bits must be 4 or 8, got {bits}")
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty quantization group")
    lo, hi = float(x.min()), float(x.max())
    qmax = 2 ** bits - 1
    if hi == lo:
        scale = abs(lo) if lo != 0.0 else 1.0
    else:
        scale = (hi - lo) / qmax
    zero = float(np.rint(lo / scale))
    codes = np.clip(np.rint(x / scale - zero), 0, qmax).astype(np.uint8)
    return QuantizedGroup(codes, scale, zero, bits)


def dequantize_group(qg: QuantizedGroup) -> np.ndarray:
    return qg.scale * (qg.codes.astype(np.float64) + qg.zero_point)


# sensitivity hook: (layer, kv_head, column_group, kind "k"/"v", values) -> True keeps full precision
SensitivityHook = Callable[[int, int, int, str, np.ndarray], bool]


@dataclass
class KVBlock:
    keys: np.ndarray               # layers x H_kv x B x d_h
    values: np.ndarray
    fill: int = 0
    refcount: int = 1
    quantized: dict | None = None  # (kind, layer, head, col0) -> QuantizedGroup | None (vetoed)


@dataclass
class BlockTable:
    entries: list = field(default_factory=list)
    logical_len: int = 0


class PagedKVCache:
    """Block allocator plus the sequences that reference its blocks.

    ``bits`` enables quantization of blocks once they are full; ``group_size``
    is the number of head-dim columns per quantization group (default: the
    whole head, i.e. one B x d_h group per head).
    """

    def __init__(self, num_blocks: int, block_size: int, num_layers: int, num_kv_heads: int,
                 head_dim: int, bits: int | None = None, group_size: int | None = None,
                 sensitivity: SensitivityHook | None = None):
        if block_size < 1 or num_blocks < 0:
            raise ValueError("block_size must be >= 1 and num_blocks >= 0")
        if bits not in (None, 4, 8):
            raise ValueError("bits must be None, 4 or 8")
        self.block_size = block_size
        self.num_blocks = num_blocks
        self.shape = (num_layers, num_kv_heads, block_size, head_dim)
        self.bits = bits
        self.group_size = group_size or head_dim
        if head_dim % self.group_size:
            raise ValueError("group_size must divide head_dim")
        self.sensitivity = sensitivity
        self.blocks: dict[int, KVBlock] = {}
        self._free = list(range(num_blocks))
        heapq.heapify(self._free)
        self.tables: dict[int, BlockTable] = {}
        self._next_seq = 0
        self._lock = threading.Lock()

    @classmethod
    def for_model(cls, params: ModelParams, num_blocks: int, block_size: int = 16, **kw):
        c = params.config
        return cls(num_blocks, block_size, c.num_layers, c.num_kv_heads, c.head_dim, **kw)

    # -- allocation ---------------------------------------------------------

    def _alloc_block(self) -> int:
        with self._lock:
            if not self._free:
                raise OutOfBlocksError(f"all {self.num_blocks} physical blocks in use")
            bid = heapq.heappop(self._free)
        self.blocks[bid] = KVBlock(np.zeros(self.shape), np.zeros(self.shape))
        return bid

    def _release(self, bid: int) -> None:
        with self._lock:
            blk = self.blocks[bid]
            blk.refcount -= 1
            if blk.refcount == 0:
                del self.blocks[bid]
                heapq.heappush(self._free, bid)

    def alloc_sequence(self) -> int:
        seq = self._next_seq
        self._next_seq += 1
        self.tables[seq] = BlockTable()
        return seq

    def fork_prefix(self, seq: int) -> int:
        parent = self.tables[seq]
        child = self.alloc_sequence()
        with self._lock:
            for bid in parent.entries:
                self.blocks[bid].refcount += 1
        self.tables[child] = BlockTable(list(parent.entries), parent.logical_len)
        return child

    def drop(self, seq: int) -> None:
        for bid in self.tables.pop(seq).entries:
            self._release(bid)

    # -- writes -------------------------------------------------------------

    def reserve_slot(self, seq: int) -> tuple[int, int]:
        """Claim the next token slot of ``seq``; allocates or copies-on-write as needed."""
        table = self.tables[seq]
        off = table.logical_len % self.block_size
        if off == 0:
            table.entries.append(self._alloc_block())
        else:
            bid = table.entries[-1]
            if self.blocks[bid].refcount > 1:
                new = self._alloc_block()
                src, dst = self.blocks[bid], self.blocks[new]
                dst.keys[...] = src.keys
                dst.values[...] = src.values
                dst.fill = src.fill
                table.entries[-1] = new
                self._release(bid)
        table.logical_len += 1
        bid = table.entries[-1]
        self.blocks[bid].fill = off + 1
        return bid, off

    def write_slot(self, seq: int, layer: int, k, v) -> None:
        """Store one token's keys/values (H_kv x d_h) for ``layer`` in the last reserved slot."""
        table = self.tables[seq]
        bid = table.entries[-1]
        off = (table.logical_len - 1) % self.block_size
        blk = self.blocks[bid]
        blk.keys[layer, :, off] = k
        blk.values[layer, :, off] = v
        if layer == self.shape[0] - 1 and off == self.block_size - 1:
            self._seal(bid)

    def append_kv(self, seq: int, k, v) -> None:
        """Append one token; ``k``/``v`` are layers x H_kv x d_h."""
        self.reserve_slot(seq)
        for layer in range(self.shape[0]):
            self.write_slot(seq, layer, k[layer], v[layer])

    def _seal(self, bid: int) -> None:
        if self.bits is None:
            return
        blk = self.blocks[bid]
        blk.quantized = {}
        layers, heads, _, dh = self.shape
        for kind, arr in (("k", blk.keys), ("v", blk.values)):
            for layer in range(layers):
                for head in range(heads):
                    for c0 in range(0, dh, self.group_size):
                        vals = arr[layer, head, :, c0:c0 + self.group_size]
                        if self.sensitivity and self.sensitivity(layer, head, c0 // self.group_size, kind, vals):
                            blk.quantized[(kind, layer, head, c0)] = None
                            continue
                        qg = quantize_group(vals, self.bits)
                        blk.quantized[(kind, layer, head, c0)] = qg
                        # the full-precision copy is replaced by its dequantization;
                        # only codes + metadata count as physical bytes
                        vals[...] = dequantize_group(qg)

    # -- reads --------------------------------------------------------------

    def block_kv(self, bid: int, layer: int, kv_head: int):
        blk = self.blocks[bid]
        return blk.keys[layer, kv_head, :blk.fill], blk.values[layer, kv_head, :blk.fill]

    def gather(self, seq: int, layer: int, kv_head: int):
        """Logically contiguous (K, V) for a sequence; used as the oracle path."""
        parts = [self.block_kv(b, layer, kv_head) for b in self.tables[seq].entries]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    def stats(self) -> dict:
        return cache_stats(self)


def paged_attention(q, cache: PagedKVCache, seq: int, layer: int, kv_head: int) -> np.ndarray:
    """Attention of one query over the sequence's cached tokens, block by block.

    Per-block scores are merged with the online-softmax recurrence so the
    result is globally normalized across blocks.
    """
    table = cache.tables[seq]
    if table.logical_len == 0:
        raise ValueError("empty cache")
    q = np.asarray(q, dtype=np.float64)
    scale = 1.0 / math.sqrt(q.shape[0])
    m, l = attn.NEG_INF, 0.0
    acc = np.zeros(cache.shape[3])
    for bid in table.entries:
        k_j, v_j = cache.block_kv(bid, layer, kv_head)
        s = (k_j @ q) * scale
        m_j = float(s.max())
        p = np.exp(s - m_j)
        m_new = max(m, m_j)
        a, b = math.exp(m - m_new), math.exp(m_j - m_new)
        acc = a * acc + b * (p @ v_j)
        l = a * l + b * float(p.sum())
        m = m_new
    return acc / l


def cache_stats(cache: PagedKVCache) -> dict:
    layers, heads, bsz, dh = cache.shape
    token_bytes = 2 * layers * heads * dh * FP_BYTES
    groups_per_block = 2 * layers * heads * (dh // cache.group_size)
    group_elems = bsz * cache.group_size
    physical = 0
    for blk in cache.blocks.values():
        if blk.quantized is None:
            physical += bsz * token_bytes
            continue
        for qg in blk.quantized.values():
            if qg is None:
                physical += group_elems * FP_BYTES
            else:
                physical += math.ceil(group_elems * qg.bits / 8) + META_BYTES
        assert len(blk.quantized) == groups_per_block
    used = len(cache.blocks)
    return {
        "blocks_used": used,
        "blocks_free": cache.num_blocks - used,
        "bytes_logical": sum(t.logical_len for t in cache.tables.values()) * token_bytes,
        "bytes_physical": physical,
        "shared_blocks": sum(1 for b in cache.blocks.values() if b.refcount > 1),
    }


def refcount_audit(cache: PagedKVCache) -> bool:
    """Each live block's refcount equals the number of table entries naming it."""
    counts: dict[int, int] = {}
    for t in cache.tables.values():
        for bid in t.entries:
            counts[bid] = counts.get(bid, 0) + 1
    free = set(cache._free)
    return (counts == {b: blk.refcount for b, blk in cache.blocks.items()}
            and not free & set(counts)
            and all(len(t.entries) == -(-t.logical_len // cache.block_size) for t in cache.tables.values()))


class PagedAttend:
    """``decode_step`` attention callback backed by a paged cache."""

    def __init__(self, cache: PagedKVCache, seq: int, group_size: int):
        self.cache, self.seq, self.g = cache, seq, group_size

    def __call__(self, layer, q, k, v):
        if layer == 0:
            self.cache.reserve_slot(self.seq)
        self.cache.write_slot(self.seq, layer, k, v)
        return np.stack([paged_attention(q[i], self.cache, self.seq, layer, i // self.g)
                         for i in range(q.shape[0])])


def paged_greedy_decode(params: ModelParams, prompt, steps: int, cache: PagedKVCache,
                        seq: int | None = None, on_step=None) -> tuple[list[int], int]:
    """Greedy decoding with every attention read served from the paged cache.

    Returns the generated tokens and the sequence handle. ``on_step(i, cache)``
    is called after each generated token.
    """
    seq = cache.alloc_sequence() if seq is None else seq
    attend = PagedAttend(cache, seq, params.config.group_size)
    pos = cache.tables[seq].logical_len
    logits = None
    for tok in prompt:
        logits = decode_step(params, int(tok), pos, attend)
        pos += 1
    out = []
    for i in range(steps):
        nxt = greedy(logits)
        out.append(nxt)
        if on_step:
            on_step(i, cache)
        if i + 1 < steps:
            logits = decode_step(params, nxt, pos, attend)
            pos += 1
    return out, seq
