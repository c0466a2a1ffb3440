"""Attention complexity benchmark: scored pairs and wall time per kind.

Full attention scores every (query, key) pair; the banded+global pattern
scores O(n*(r + n/k)); chunked cross-attention scores a fixed number of
neighbor keys per token past the first chunk. The instrumented counts must
equal the closed-form prediction exactly, and at long inputs the sparse
pattern should also win on wall time (run single-threaded for a fair
comparison: OPENBLAS_NUM_THREADS=1 OMP_NUM_THREADS=1).
"""

from __future__ import annotations

import time

import numpy as np

from . import autograd as ag
from .attention import (
    CausalSelfAttention,
    ChunkedCrossAttention,
    NeighborBatch,
    PairCounter,
    TGlobalAttention,
    count_attended_pairs,
    fused_attention,
    _split_heads,
)
from .autograd import Tensor


class FullUnmaskedAttention(CausalSelfAttention):
    """Dense attention without the causal mask (n*n pairs), for benchmarking."""

    def forward(self, x):
        q = _split_heads(self.wq(x), self.heads)
        k = _split_heads(self.wk(x), self.heads)
        v = _split_heads(self.wv(x), self.heads)
        out = fused_attention(q, k, v, mask=None, count_kind="full_causal")
        n, h, dh = out.shape
        return self.wo(ag.reshape(out, (n, h * dh)))


def _time_forward(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, (time.perf_counter() - t0) * 1000.0)
    return best


def run_attention_bench(sizes, r=127, k=16, m=64, num_neighbors=2, heads=2, d_model=64,
                        repeats=2, seed=0):
    """One row per (kind, n): kind, n, r, k, pairs, predicted_pairs, wall_ms."""
    rng = np.random.default_rng(seed)
    full = FullUnmaskedAttention(d_model, heads, rng)
    tglobal = TGlobalAttention(d_model, heads, r=r, block_k=k, rng=rng)
    cca = ChunkedCrossAttention(d_model, heads, m, rng)
    cca.wo.weight.data = rng.standard_normal(cca.wo.weight.shape).astype(np.float32) * 0.02

    rows = []
    for n in sizes:
        x = Tensor(rng.standard_normal((n, d_model)).astype(np.float32))
        nb = NeighborBatch()
        for _ in range((n - 1) // m):
            states = rng.standard_normal((num_neighbors, 2 * m, d_model)).astype(np.float32)
            nb.states.append(Tensor(states))
            nb.key_valid.append(np.ones(num_neighbors * 2 * m, dtype=bool))

        cases = (
            ("full_causal", lambda: full(x), dict(causal=False)),
            ("tglobal", lambda: tglobal(x), dict(r=r, k=k)),
            ("chunked_cross", lambda: cca(x, nb), dict(m=m, num_neighbors=num_neighbors)),
        )
        for kind, fn, kwargs in cases:
            with ag.no_grad():
                fn()  # warmup (JIT, allocator)
                with PairCounter() as counter:
                    fn()
                wall = _time_forward(fn, repeats)
            rows.append(
                {
                    "kind": kind,
                    "n": n,
                    "r": r if kind == "tglobal" else 0,
                    "k": k if kind == "tglobal" else 0,
                    "pairs": counter.counts[kind],
                    "predicted_pairs": count_attended_pairs(kind, n, **kwargs),
                    "wall_ms": wall,
                }
            )
    return rows
