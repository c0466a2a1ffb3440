"""The three attention mechanisms and the attended-pair accounting.

Kinds:
  * full causal self-attention (decoder baseline, quadratic),
  * transient-global attention: a local window of radius r plus
    ceil(n/k) on-the-fly global tokens built from block means
    (encoder-side, O(n*(r + n/k)) scored pairs),
  * chunked cross-attention: decoder chunk u attends only to the encoded
    neighbors retrieved with the previous chunk's query, which keeps
    generation causal with respect to retrieval.

Every kernel can run with a pair counter armed; the counter tallies the
exact number of (query, key) pairs scored, which ``count_attended_pairs``
predicts in closed form. The two must agree exactly.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import kernels
from .autograd import Tensor
from .layers import Linear, Module, Parameter, normal_init

KINDS = ("full_causal", "tglobal", "chunked_cross")


@dataclass
class AttentionConfig:
    kind: str = "full_causal"
    n: int = 4096
    r: int = 127
    k: int = 16
    m: int = 64
    num_neighbors: int = 2
    heads: int = 4
    d_model: int = 128

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}")
        if self.r < 0 or self.k < 1 or self.m < 1:
            raise ValueError(f"invalid attention config: r={self.r} k={self.k} m={self.m}")
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")


# ---------------------------------------------------------------------------
# pair counting
# ---------------------------------------------------------------------------

_counter_stack = threading.local()


class PairCounter:
    """Context manager that tallies scored (query, key) pairs per kind."""

    def __init__(self):
        self.counts = {kind: 0 for kind in KINDS}

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def add(self, kind: str, pairs: int) -> None:
        self.counts[kind] += int(pairs)

    def __enter__(self):
        stack = getattr(_counter_stack, "stack", None)
        if stack is None:
            stack = []
            _counter_stack.stack = stack
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _counter_stack.stack.pop()
        return False


def _active_counter() -> PairCounter | None:
    stack = getattr(_counter_stack, "stack", None)
    return stack[-1] if stack else None


def count_attended_pairs(kind: str, n: int, r: int = 0, k: int = 1, m: int = 64,
                         num_neighbors: int = 2, causal: bool = False) -> int:
    """Closed-form count of scored pairs for an unpadded input of length n.

    For chunked_cross, n is the decoder sequence length and neighbors are
    assumed to carry their continuation chunk (2m non-pad tokens each).
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if kind == "full_causal":
        return n * (n + 1) // 2 if causal else n * n
    if kind == "tglobal":
        if n == 0:
            return 0
        re = min(r, n - 1)
        local = n * (2 * re + 1) - re * (re + 1)
        num_global = -(-n // k)
        return local + n * num_global
    if kind == "chunked_cross":
        return max(0, n - m) * num_neighbors * 2 * m
    raise ValueError(f"unknown attention kind {kind!r}")


def tglobal_pairs_with_padding(valid: np.ndarray, r: int, k: int) -> int:
    """Exact scored-pair count for tglobal given a validity mask."""
    n = len(valid)
    cs = np.concatenate([[0], np.cumsum(valid.astype(np.int64))])
    idx = np.arange(n)
    lo = np.maximum(idx - r, 0)
    hi = np.minimum(idx + r, n - 1)
    local = cs[hi + 1] - cs[lo]
    counts = np.add.reduceat(valid.astype(np.int64), np.arange(0, n, k))
    n_gvalid = int((counts > 0).sum())
    return int((local[valid] + n_gvalid).sum())


# ---------------------------------------------------------------------------
# fused autograd ops
# ---------------------------------------------------------------------------

def fused_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
                    bias: Tensor | None = None, count_kind: str | None = None) -> Tensor:
    """Softmax attention core. q, k, v are (t, heads, dh) tensors; the
    dh**-0.5 scale is applied internally. mask is (tq, tk) bool, True where
    the pair is allowed. Returns (tq, heads, dh)."""
    tq, heads, dh = q.shape
    scale = dh ** -0.5
    qd = np.ascontiguousarray(q.data.transpose(1, 0, 2)) * scale
    kd = np.ascontiguousarray(k.data.transpose(1, 0, 2))
    vd = np.ascontiguousarray(v.data.transpose(1, 0, 2))
    bias_d = bias.data if bias is not None else None
    out, p = kernels.dense_attn_forward(qd, kd, vd, bias_d, mask)
    counter = _active_counter()
    if counter is not None and count_kind is not None:
        pairs = int(mask.sum()) if mask is not None else q.shape[0] * k.shape[0]
        counter.add(count_kind, pairs)
    data = np.ascontiguousarray(out.transpose(1, 0, 2))

    def backward(g):
        gd = np.ascontiguousarray(g.transpose(1, 0, 2))
        dq, dk, dv, dbias = kernels.dense_attn_backward(gd, qd, kd, vd, p, bias is not None)
        grads = [
            dq.transpose(1, 0, 2) * scale,
            dk.transpose(1, 0, 2),
            dv.transpose(1, 0, 2),
        ]
        if bias is not None:
            grads.append(dbias)
        return tuple(grads)

    parents = (q, k, v) + ((bias,) if bias is not None else ())
    return ag._node(data, parents, backward)


def block_mean(x: Tensor, valid: np.ndarray, block: int) -> tuple[Tensor, np.ndarray]:
    """Mean of each length-``block`` slice of x over its valid positions.

    Returns the (nb, d) means and a (nb,) bool mask of non-empty blocks.
    Empty blocks produce a zero row.
    """
    n, d = x.shape
    nb = -(-n // block)
    pad = nb * block - n
    xd = x.data
    vm = valid.astype(xd.dtype)
    xp = np.concatenate([xd * vm[:, None], np.zeros((pad, d), xd.dtype)], axis=0)
    sums = xp.reshape(nb, block, d).sum(axis=1)
    counts = np.concatenate([vm, np.zeros(pad, xd.dtype)]).reshape(nb, block).sum(axis=1)
    gvalid = counts > 0
    denom = np.where(gvalid, counts, 1.0).astype(xd.dtype)
    data = sums / denom[:, None]

    def backward(g):
        per_row = g / denom[:, None]
        dx = np.repeat(per_row, block, axis=0)[:n]
        return (dx * vm[:, None],)

    return ag._node(data, (x,), backward), gvalid


def tglobal_core(q: Tensor, k: Tensor, v: Tensor, kg: Tensor, vg: Tensor,
                 r: int, block_k: int, valid: np.ndarray, gvalid: np.ndarray) -> Tensor:
    """Banded + global attention. q, k, v: (n, heads, dh); kg, vg: (nb, heads, dh)."""
    n, heads, dh = q.shape
    scale = dh ** -0.5
    qd = np.ascontiguousarray(q.data.transpose(1, 0, 2)) * scale
    kd = np.ascontiguousarray(k.data.transpose(1, 0, 2))
    vd = np.ascontiguousarray(v.data.transpose(1, 0, 2))
    kgd = np.ascontiguousarray(kg.data.transpose(1, 0, 2))
    vgd = np.ascontiguousarray(vg.data.transpose(1, 0, 2))
    out, pl, pg = kernels.tglobal_forward(qd, kd, vd, kgd, vgd, r, valid, gvalid)
    counter = _active_counter()
    if counter is not None:
        counter.add("tglobal", tglobal_pairs_with_padding(valid, r, block_k))
    data = np.ascontiguousarray(out.transpose(1, 0, 2))

    def backward(g):
        gd = np.ascontiguousarray(g.transpose(1, 0, 2))
        dq, dk, dv, dkg, dvg = kernels.tglobal_backward(gd, qd, kd, vd, kgd, vgd, r, pl, pg)
        return (
            dq.transpose(1, 0, 2) * scale,
            dk.transpose(1, 0, 2),
            dv.transpose(1, 0, 2),
            dkg.transpose(1, 0, 2),
            dvg.transpose(1, 0, 2),
        )

    return ag._node(data, (q, k, v, kg, vg), backward)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

_causal_masks: dict[int, np.ndarray] = {}


def causal_mask(n: int) -> np.ndarray:
    mask = _causal_masks.get(n)
    if mask is None:
        mask = np.tril(np.ones((n, n), dtype=bool))
        _causal_masks[n] = mask
    return mask


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return ag.reshape(x, (n, heads, d // heads))


def _merge_heads(x: Tensor) -> Tensor:
    n, h, dh = x.shape
    return ag.reshape(x, (n, h * dh))


class CausalSelfAttention(Module):
    """Full causal self-attention over one sequence."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.heads = heads
        self.wq = Linear(d_model, d_model, rng, dtype=dtype)
        self.wk = Linear(d_model, d_model, rng, dtype=dtype)
        self.wv = Linear(d_model, d_model, rng, dtype=dtype)
        self.wo = Linear(d_model, d_model, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        q = _split_heads(self.wq(x), self.heads)
        k = _split_heads(self.wk(x), self.heads)
        v = _split_heads(self.wv(x), self.heads)
        out = fused_attention(q, k, v, mask=causal_mask(n), count_kind="full_causal")
        return self.wo(_merge_heads(out))


class BidirectionalSelfAttention(Module):
    """Unmasked self-attention with optional key padding (neighbor encoder)."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.heads = heads
        self.wq = Linear(d_model, d_model, rng, dtype=dtype)
        self.wk = Linear(d_model, d_model, rng, dtype=dtype)
        self.wv = Linear(d_model, d_model, rng, dtype=dtype)
        self.wo = Linear(d_model, d_model, rng, dtype=dtype)

    def forward(self, x: Tensor, valid: np.ndarray | None = None) -> Tensor:
        n = x.shape[0]
        q = _split_heads(self.wq(x), self.heads)
        k = _split_heads(self.wk(x), self.heads)
        v = _split_heads(self.wv(x), self.heads)
        mask = None if valid is None else np.broadcast_to(valid, (n, n))
        out = fused_attention(q, k, v, mask=mask)
        return self.wo(_merge_heads(out))


class TGlobalAttention(Module):
    """Local window + transient global tokens; encoder-side, bidirectional.

    Global tokens are block means of the layer input, recomputed on every
    call and passed through the same key/value projections as ordinary
    tokens. Pad positions are excluded from windows, means and queries.
    """

    def __init__(self, d_model: int, heads: int, r: int, block_k: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.heads = heads
        self.r = r
        self.block_k = block_k
        self.wq = Linear(d_model, d_model, rng, dtype=dtype)
        self.wk = Linear(d_model, d_model, rng, dtype=dtype)
        self.wv = Linear(d_model, d_model, rng, dtype=dtype)
        self.wo = Linear(d_model, d_model, rng, dtype=dtype)

    def forward(self, x: Tensor, valid: np.ndarray | None = None) -> Tensor:
        n = x.shape[0]
        if n == 0:
            raise ValueError("tglobal attention requires a non-empty sequence")
        if valid is None:
            valid = np.ones(n, dtype=bool)
        q = _split_heads(self.wq(x), self.heads)
        k = _split_heads(self.wk(x), self.heads)
        v = _split_heads(self.wv(x), self.heads)
        g, gvalid = block_mean(x, valid, self.block_k)
        kg = _split_heads(self.wk(g), self.heads)
        vg = _split_heads(self.wv(g), self.heads)
        out = tglobal_core(q, k, v, kg, vg, self.r, self.block_k, valid, gvalid)
        return self.wo(_merge_heads(out))


class CrossAttention(Module):
    """Decoder-to-encoder attention for the encoder-decoder baseline."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.heads = heads
        self.wq = Linear(d_model, d_model, rng, dtype=dtype)
        self.wk = Linear(d_model, d_model, rng, dtype=dtype)
        self.wv = Linear(d_model, d_model, rng, dtype=dtype)
        self.wo = Linear(d_model, d_model, rng, dtype=dtype)

    def forward(self, y: Tensor, enc: Tensor, enc_valid: np.ndarray | None = None) -> Tensor:
        t = y.shape[0]
        n = enc.shape[0]
        q = _split_heads(self.wq(y), self.heads)
        k = _split_heads(self.wk(enc), self.heads)
        v = _split_heads(self.wv(enc), self.heads)
        mask = None if enc_valid is None else np.broadcast_to(enc_valid, (t, n))
        out = fused_attention(q, k, v, mask=mask)
        return self.wo(_merge_heads(out))


@dataclass
class NeighborBatch:
    """Encoded neighbors per completed decoder chunk.

    ``states[i]`` holds the encoder output for the neighbors retrieved with
    query chunk i+1 as a (num_neighbors, 2m, d_model) tensor, or None when
    that chunk's retrieval is masked off. ``key_valid[i]`` marks non-pad
    neighbor token positions, flattened to (num_neighbors * 2m,).
    """

    states: list[Tensor | None] = field(default_factory=list)
    key_valid: list[np.ndarray | None] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)


class MissingNeighborsError(ValueError):
    """The neighbor batch does not cover a chunk the kernel must attend."""


class ChunkedCrossAttention(Module):
    """Chunk-aligned cross-attention onto retrieved neighbor encodings.

    The layer owns its pre-norm and residual: tokens of decoder chunk u
    (u >= 2) attend to the neighbors retrieved with chunk u-1 and receive
    the attention output through a residual projection; chunk 1 and any
    chunk whose neighbors are masked pass through unchanged. The output
    projection starts at zero so a freshly retro-fitted model computes
    exactly the base model's function.
    """

    def __init__(self, d_model: int, heads: int, m: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.heads = heads
        self.m = m
        from .layers import LayerNorm

        self.ln = LayerNorm(d_model, dtype=dtype)
        self.wq = Linear(d_model, d_model, rng, dtype=dtype)
        self.wk = Linear(d_model, d_model, rng, dtype=dtype)
        self.wv = Linear(d_model, d_model, rng, dtype=dtype)
        self.wo = Linear(d_model, d_model, rng, dtype=dtype)
        self.wo.weight.data = np.zeros_like(self.wo.weight.data)
        self.pos_bias = Parameter(normal_init(rng, (heads, m, 2 * m), dtype=dtype))

    def forward(self, x: Tensor, neighbors: NeighborBatch | None) -> Tensor:
        t = x.shape[0]
        m = self.m
        if neighbors is None or t <= m:
            return x
        needed = (t - 1) // m
        if len(neighbors) < needed:
            raise MissingNeighborsError(
                f"neighbor batch covers {len(neighbors)} chunks, decoder length {t} needs {needed}"
            )
        h = self.ln(x)
        pieces = [x[0:m]]
        n_chunks = -(-t // m)
        for u in range(2, n_chunks + 1):
            lo = (u - 1) * m
            hi = min(u * m, t)
            states = neighbors.states[u - 2]
            if states is None:
                pieces.append(x[lo:hi])
                continue
            kv_mask = neighbors.key_valid[u - 2]
            n_nb, width, d = states.shape
            flat = ag.reshape(states, (n_nb * width, d))
            q = _split_heads(self.wq(h[lo:hi]), self.heads)
            k = _split_heads(self.wk(flat), self.heads)
            v = _split_heads(self.wv(flat), self.heads)
            bias_chunk = self.pos_bias[:, 0 : hi - lo, :]
            bias = ag.concat([bias_chunk] * n_nb, axis=2)
            mask = np.broadcast_to(kv_mask, (hi - lo, n_nb * width))
            att = fused_attention(q, k, v, mask=mask, bias=bias, count_kind="chunked_cross")
            delta = self.wo(_merge_heads(att))
            pieces.append(ag.add(x[lo:hi], delta))
        return ag.concat(pieces, axis=0)
