"""Hot numeric kernels: numba-compiled fast paths with pure-numpy fallbacks.

Two kernel families live here because profiling shows they dominate runtime:

1. The banded local-window + global-token attention core (forward and
   backward). A dense implementation would materialize an (n, n) score
   matrix and lose the whole point of the sparse pattern; these kernels
   touch exactly the scored (query, key) pairs.
2. The longest-common-subsequence table fill used by summary scoring,
   which is a tight O(len1 * len2) integer loop.

Dense softmax-attention cores are NOT here: those are matmul-bound and the
numpy/BLAS path is already the fast one (see ``dense_attn_forward``).

Backend selection: numba is used when importable unless the environment
variable ``RETROSUM_NUMBA=0`` forces the numpy fallback. ``backend_name()``
reports the active choice; ``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os

import numpy as np


def _probe_numba() -> bool:
    if os.environ.get("RETROSUM_NUMBA", "1") == "0":
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


NUMBA_ENABLED = _probe_numba()


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"


# ---------------------------------------------------------------------------
# dense attention core (numpy only; BLAS-bound)
# ---------------------------------------------------------------------------

def dense_attn_forward(q, k, v, bias=None, mask=None):
    """Softmax attention over all (query, key) pairs allowed by ``mask``.

    q: (H, tq, dh) already scaled by dh**-0.5; k, v: (H, tk, dh);
    bias: (H, tq, tk) additive logits or None; mask: (tq, tk) bool where
    True marks an allowed pair, or None for all-allowed.
    Returns (out (H, tq, dh), probs (H, tq, tk)).
    """
    s = q @ np.swapaxes(k, -1, -2)
    if bias is not None:
        s = s + bias
    if mask is not None:
        s = np.where(mask[None, :, :], s, -np.inf)
    mx = s.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(s - mx)
    den = e.sum(axis=-1, keepdims=True)
    den = np.where(den == 0.0, 1.0, den)
    p = e / den
    out = p @ v
    return out, p


def dense_attn_backward(dout, q, k, v, p, need_bias=False):
    """Gradients of dense_attn_forward w.r.t. q, k, v (and bias when asked)."""
    dp = dout @ np.swapaxes(v, -1, -2)
    dot = (dp * p).sum(axis=-1, keepdims=True)
    ds = p * (dp - dot)
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    dv = np.swapaxes(p, -1, -2) @ dout
    dbias = ds if need_bias else None
    return dq, dk, dv, dbias


# ---------------------------------------------------------------------------
# banded local-window + global-token attention
# ---------------------------------------------------------------------------

def _tglobal_fwd_np(q, k, v, kg, vg, r, valid, gvalid):
    H, n, dh = q.shape
    nb = kg.shape[1]
    W = 2 * r + 1
    neg = -np.inf
    sl = np.full((H, n, W), neg, dtype=q.dtype)
    for w in range(W):
        off = w - r
        lo = max(0, -off)
        hi = min(n, n - off)
        if lo >= hi:
            continue
        s = np.einsum("hnd,hnd->hn", q[:, lo:hi, :], k[:, lo + off : hi + off, :])
        kv = valid[lo + off : hi + off]
        sl[:, lo:hi, w] = np.where(kv[None, :], s, neg)
    sg = np.einsum("hnd,hbd->hnb", q, kg)
    sg = np.where(gvalid[None, None, :], sg, neg).astype(q.dtype)

    mx = np.maximum(sl.max(axis=2), sg.max(axis=2) if nb else np.full((H, n), neg, q.dtype))
    mx = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(invalid="ignore"):
        el = np.exp(sl - mx[:, :, None])
        eg = np.exp(sg - mx[:, :, None])
    el[~np.isfinite(sl)] = 0.0
    eg[~np.isfinite(sg)] = 0.0
    den = el.sum(axis=2) + eg.sum(axis=2)
    den = np.where(den == 0.0, 1.0, den)
    pl = el / den[:, :, None]
    pg = eg / den[:, :, None]
    qm = valid.astype(q.dtype)
    pl *= qm[None, :, None]
    pg *= qm[None, :, None]

    out = np.zeros_like(q)
    for w in range(W):
        off = w - r
        lo = max(0, -off)
        hi = min(n, n - off)
        if lo >= hi:
            continue
        out[:, lo:hi, :] += pl[:, lo:hi, w, None] * v[:, lo + off : hi + off, :]
    if nb:
        out += np.einsum("hnb,hbd->hnd", pg, vg)
    return out, pl, pg


def _tglobal_bwd_np(dout, q, k, v, kg, vg, r, pl, pg):
    H, n, dh = q.shape
    nb = kg.shape[1]
    W = 2 * r + 1
    dpl = np.zeros_like(pl)
    for w in range(W):
        off = w - r
        lo = max(0, -off)
        hi = min(n, n - off)
        if lo >= hi:
            continue
        dpl[:, lo:hi, w] = np.einsum(
            "hnd,hnd->hn", dout[:, lo:hi, :], v[:, lo + off : hi + off, :]
        )
    dpg = np.einsum("hnd,hbd->hnb", dout, vg) if nb else np.zeros_like(pg)
    dot = (dpl * pl).sum(axis=2) + (dpg * pg).sum(axis=2)
    dsl = pl * (dpl - dot[:, :, None])
    dsg = pg * (dpg - dot[:, :, None])

    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for w in range(W):
        off = w - r
        lo = max(0, -off)
        hi = min(n, n - off)
        if lo >= hi:
            continue
        dq[:, lo:hi, :] += dsl[:, lo:hi, w, None] * k[:, lo + off : hi + off, :]
        dk[:, lo + off : hi + off, :] += dsl[:, lo:hi, w, None] * q[:, lo:hi, :]
        dv[:, lo + off : hi + off, :] += pl[:, lo:hi, w, None] * dout[:, lo:hi, :]
    if nb:
        dq += np.einsum("hnb,hbd->hnd", dsg, kg)
        dkg = np.einsum("hnb,hnd->hbd", dsg, q)
        dvg = np.einsum("hnb,hnd->hbd", pg, dout)
    else:
        dkg = np.zeros_like(kg)
        dvg = np.zeros_like(vg)
    return dq, dk, dv, dkg, dvg


if NUMBA_ENABLED:
    from numba import njit

    @njit(cache=True, fastmath=True)
    def _tglobal_fwd_nb(q, k, v, kg, vg, r, valid, gvalid, out, pl, pg):
        H, n, dh = q.shape
        nb = kg.shape[1]
        W = 2 * r + 1
        for h in range(H):
            for i in range(n):
                if not valid[i]:
                    continue
                mx = -1e300
                for w in range(W):
                    j = i - r + w
                    if 0 <= j < n and valid[j]:
                        s = 0.0
                        for d in range(dh):
                            s += q[h, i, d] * k[h, j, d]
                        pl[h, i, w] = s
                        if s > mx:
                            mx = s
                    else:
                        pl[h, i, w] = -np.inf
                for b in range(nb):
                    if gvalid[b]:
                        s = 0.0
                        for d in range(dh):
                            s += q[h, i, d] * kg[h, b, d]
                        pg[h, i, b] = s
                        if s > mx:
                            mx = s
                    else:
                        pg[h, i, b] = -np.inf
                den = 0.0
                for w in range(W):
                    if pl[h, i, w] == -np.inf:
                        pl[h, i, w] = 0.0
                    else:
                        e = np.exp(pl[h, i, w] - mx)
                        pl[h, i, w] = e
                        den += e
                for b in range(nb):
                    if pg[h, i, b] == -np.inf:
                        pg[h, i, b] = 0.0
                    else:
                        e = np.exp(pg[h, i, b] - mx)
                        pg[h, i, b] = e
                        den += e
                if den == 0.0:
                    den = 1.0
                inv = 1.0 / den
                for w in range(W):
                    pl[h, i, w] *= inv
                for b in range(nb):
                    pg[h, i, b] *= inv
                for d in range(dh):
                    acc = 0.0
                    for w in range(W):
                        j = i - r + w
                        if 0 <= j < n:
                            acc += pl[h, i, w] * v[h, j, d]
                    for b in range(nb):
                        acc += pg[h, i, b] * vg[h, b, d]
                    out[h, i, d] = acc

    @njit(cache=True, fastmath=True)
    def _tglobal_bwd_nb(dout, q, k, v, kg, vg, r, pl, pg, dq, dk, dv, dkg, dvg):
        H, n, dh = q.shape
        nb = kg.shape[1]
        W = 2 * r + 1
        for h in range(H):
            for i in range(n):
                dot = 0.0
                for w in range(W):
                    j = i - r + w
                    if pl[h, i, w] != 0.0 and 0 <= j < n:
                        dp = 0.0
                        for d in range(dh):
                            dp += dout[h, i, d] * v[h, j, d]
                        dot += dp * pl[h, i, w]
                for b in range(nb):
                    if pg[h, i, b] != 0.0:
                        dp = 0.0
                        for d in range(dh):
                            dp += dout[h, i, d] * vg[h, b, d]
                        dot += dp * pg[h, i, b]
                for w in range(W):
                    j = i - r + w
                    if pl[h, i, w] == 0.0 or not (0 <= j < n):
                        continue
                    dp = 0.0
                    for d in range(dh):
                        dp += dout[h, i, d] * v[h, j, d]
                    ds = pl[h, i, w] * (dp - dot)
                    for d in range(dh):
                        dq[h, i, d] += ds * k[h, j, d]
                        dk[h, j, d] += ds * q[h, i, d]
                        dv[h, j, d] += pl[h, i, w] * dout[h, i, d]
                for b in range(nb):
                    if pg[h, i, b] == 0.0:
                        continue
                    dp = 0.0
                    for d in range(dh):
                        dp += dout[h, i, d] * vg[h, b, d]
                    ds = pg[h, i, b] * (dp - dot)
                    for d in range(dh):
                        dq[h, i, d] += ds * kg[h, b, d]
                        dkg[h, b, d] += ds * q[h, i, d]
                        dvg[h, b, d] += pg[h, i, b] * dout[h, i, d]

    @njit(cache=True)
    def _lcs_nb(a, b):
        m, n = len(a), len(b)
        prev = np.zeros(n + 1, np.int64)
        cur = np.zeros(n + 1, np.int64)
        for i in range(m):
            ai = a[i]
            for j in range(n):
                if ai == b[j]:
                    cur[j + 1] = prev[j] + 1
                elif prev[j + 1] >= cur[j]:
                    cur[j + 1] = prev[j + 1]
                else:
                    cur[j + 1] = cur[j]
            prev, cur = cur, prev
        return prev[n]


def tglobal_forward(q, k, v, kg, vg, r, valid, gvalid, use_numba=None):
    """Banded + global attention forward.

    q (pre-scaled), k, v: (H, n, dh); kg, vg: (H, nb, dh) global-token
    keys/values; valid: (n,) bool marking real (non-pad) positions;
    gvalid: (nb,) bool marking non-empty blocks.
    Returns (out, local_probs (H, n, 2r+1), global_probs (H, n, nb)).
    """
    use_numba = NUMBA_ENABLED if use_numba is None else (use_numba and NUMBA_ENABLED)
    if use_numba:
        H, n, dh = q.shape
        nb = kg.shape[1]
        out = np.zeros_like(q)
        pl = np.zeros((H, n, 2 * r + 1), dtype=q.dtype)
        pg = np.zeros((H, n, nb), dtype=q.dtype)
        _tglobal_fwd_nb(q, k, v, kg, vg, r, valid, gvalid, out, pl, pg)
        return out, pl, pg
    return _tglobal_fwd_np(q, k, v, kg, vg, r, valid, gvalid)


def tglobal_backward(dout, q, k, v, kg, vg, r, pl, pg, use_numba=None):
    """Gradients of tglobal_forward w.r.t. q, k, v, kg, vg."""
    use_numba = NUMBA_ENABLED if use_numba is None else (use_numba and NUMBA_ENABLED)
    if use_numba:
        dq = np.zeros_like(q)
        dk = np.zeros_like(k)
        dv = np.zeros_like(v)
        dkg = np.zeros_like(kg)
        dvg = np.zeros_like(vg)
        _tglobal_bwd_nb(dout, q, k, v, kg, vg, r, pl, pg, dq, dk, dv, dkg, dvg)
        return dq, dk, dv, dkg, dvg
    return _tglobal_bwd_np(dout, q, k, v, kg, vg, r, pl, pg)


# ---------------------------------------------------------------------------
# longest common subsequence
# ---------------------------------------------------------------------------

def _lcs_py(a, b) -> int:
    m, n = len(a), len(b)
    prev = [0] * (n + 1)
    for i in range(m):
        cur = [0] * (n + 1)
        ai = a[i]
        for j in range(n):
            if ai == b[j]:
                cur[j + 1] = prev[j] + 1
            else:
                cur[j + 1] = prev[j + 1] if prev[j + 1] >= cur[j] else cur[j]
        prev = cur
    return prev[n]


def lcs_length(a: np.ndarray, b: np.ndarray, use_numba=None) -> int:
    """Length of the longest common subsequence of two integer sequences."""
    use_numba = NUMBA_ENABLED if use_numba is None else (use_numba and NUMBA_ENABLED)
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    if len(a) == 0 or len(b) == 0:
        return 0
    if use_numba:
        return int(_lcs_nb(a, b))
    return _lcs_py(a.tolist(), b.tolist())
