"""Numpy twins of the layer forwards, used on the tape-free inference path."""

from __future__ import annotations

import numpy as np

from .tokenizer import PAD_ID


def linear(x: np.ndarray, lin) -> np.ndarray:
    y = x @ lin.weight.data
    if lin.bias is not None:
        y = y + lin.bias.data
    return y


def layer_norm(x: np.ndarray, ln) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return ln.gamma.data * (xc / np.sqrt(var + ln.eps)) + ln.beta.data


_GELU_C = 0.7978845608028654


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def feed_forward(x: np.ndarray, ff) -> np.ndarray:
    return linear(gelu(linear(x, ff.up)), ff.down)


def attend_single(q: np.ndarray, k: np.ndarray, v: np.ndarray, bias=None, key_valid=None) -> np.ndarray:
    """One query against a cache. q: (h, dh); k, v: (t, h, dh) -> (h, dh)."""
    dh = q.shape[-1]
    s = np.einsum("hd,thd->ht", q * dh**-0.5, k)
    if bias is not None:
        s = s + bias
    if key_valid is not None:
        s = np.where(key_valid[None, :], s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)
    return np.einsum("ht,thd->hd", p, v)


def neighbor_encoder_forward(encoder, ids: np.ndarray) -> np.ndarray:
    """Full bidirectional forward of the neighbor encoder over one window."""
    ids = np.asarray(ids)
    valid = ids != PAD_ID
    n = len(ids)
    x = encoder.tok_emb.table.data[ids] + encoder.pos_emb.table.data[np.arange(n)]
    for block in encoder.blocks:
        h = layer_norm(x, block.ln1)
        a = block.attn
        heads = a.heads
        q = linear(h, a.wq).reshape(n, heads, -1)
        k = linear(h, a.wk).reshape(n, heads, -1)
        v = linear(h, a.wv).reshape(n, heads, -1)
        dh = q.shape[-1]
        s = np.einsum("ihd,jhd->hij", q * dh**-0.5, k)
        s = np.where(valid[None, None, :], s, -np.inf)
        mx = s.max(axis=-1, keepdims=True)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        e = np.exp(s - mx)
        den = e.sum(axis=-1, keepdims=True)
        den = np.where(den == 0, 1.0, den)
        p = e / den
        o = np.einsum("hij,jhd->ihd", p, v).reshape(n, -1)
        x = x + linear(o, a.wo)
        x = x + feed_forward(layer_norm(x, block.ln2), block.ff)
    return layer_norm(x, encoder.ln_f)


class ChunkEmbedder:
    """Mean-pooled neighbor-encoder states over non-pad chunk positions.

    The single embedding implementation shared by index building, training
    queries and inference queries, so all three live in one vector space.
    """

    def __init__(self, encoder):
        self.encoder = encoder

    def embed_chunk_vec(self, c) -> np.ndarray:
        states = neighbor_encoder_forward(self.encoder, c.ids)
        valid = c.ids != PAD_ID
        return states[valid].mean(axis=0)
