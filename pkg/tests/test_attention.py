"""Attention kernels: gradients, causality, pair accounting, mask oracle."""

import numpy as np
import pytest

from retrosum import autograd as ag
from retrosum import kernels
from retrosum.attention import (
    AttentionConfig,
    BidirectionalSelfAttention,
    CausalSelfAttention,
    ChunkedCrossAttention,
    CrossAttention,
    MissingNeighborsError,
    NeighborBatch,
    PairCounter,
    TGlobalAttention,
    block_mean,
    count_attended_pairs,
)
from retrosum.autograd import Tensor


def leaf_finite_diff(make_loss, leaves, h=1e-5, tol=1e-4):
    for leaf in leaves:
        leaf.grad = None
    loss = make_loss()
    loss.backward()
    grads = [l.grad.copy() if l.grad is not None else np.zeros_like(l.data) for l in leaves]
    for li, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        aflat = grads[li].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = make_loss().item()
            flat[i] = orig - h
            lm = make_loss().item()
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            a = aflat[i]
            denom = max(1.0, abs(a), abs(num))
            assert abs(a - num) / denom < tol, (
                f"leaf {li} elem {i}: analytic {a:.6e} vs numeric {num:.6e}"
            )


def projection_loss(out, seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(out.shape)
    return ag.tsum(ag.mul(out, w))


def tglobal_dense_reference(q, k, v, kg, vg, r, valid, gvalid, scale):
    """Dense-mask oracle: explicit (n, n+nb) allowed matrix, f64 softmax."""
    H, n, dh = q.shape
    nb = kg.shape[1]
    keys = np.concatenate([k, kg], axis=1)
    vals = np.concatenate([v, vg], axis=1)
    idx = np.arange(n)
    allowed = np.zeros((n, n + nb), dtype=bool)
    allowed[:, :n] = (np.abs(idx[:, None] - idx[None, :]) <= r) & valid[None, :]
    allowed[:, n:] = gvalid[None, :]
    allowed &= valid[:, None]
    s = np.einsum("hid,hjd->hij", q * scale, keys).astype(np.float64)
    s[:, ~allowed] = -np.inf
    out = np.zeros_like(q, dtype=np.float64)
    for h in range(H):
        for i in range(n):
            if not valid[i]:
                continue
            row = s[h, i]
            finite = np.isfinite(row)
            if not finite.any():
                continue
            e = np.exp(row[finite] - row[finite].max())
            p = e / e.sum()
            out[h, i] = p @ vals[h][finite]
    return out


# ---------------------------------------------------------------------------
# values and structure
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        AttentionConfig(kind="banded")
    with pytest.raises(ValueError):
        AttentionConfig(d_model=10, heads=4)
    with pytest.raises(ValueError):
        AttentionConfig(k=0)


def test_single_token_full_causal_is_value_projection():
    rng = np.random.default_rng(0)
    layer = CausalSelfAttention(8, 2, rng)
    x = Tensor(rng.standard_normal((1, 8)).astype(np.float32))
    out = layer(x)
    direct = layer.wo(layer.wv(x))
    np.testing.assert_array_equal(out.data, direct.data)


def test_causal_exact_invariance_under_future_perturbation():
    rng = np.random.default_rng(1)
    layer = CausalSelfAttention(16, 4, rng)
    n = 12
    x = rng.standard_normal((n, 16)).astype(np.float32)
    base = layer(Tensor(x)).data
    for case in range(20):
        i = int(rng.integers(0, n - 1))
        x2 = x.copy()
        x2[i + 1 :] += rng.standard_normal((n - i - 1, 16)).astype(np.float32)
        out2 = layer(Tensor(x2)).data
        assert np.array_equal(base[: i + 1], out2[: i + 1])
        assert not np.array_equal(base, out2)


def test_tglobal_matches_dense_oracle():
    rng = np.random.default_rng(2)
    for case in range(8):
        H, dh = 2, 4
        n = int(rng.integers(3, 17))
        r = int(rng.integers(0, 5))
        block = int(rng.integers(1, 6))
        q, k, v = (rng.standard_normal((H, n, dh)) for _ in range(3))
        valid = rng.random(n) > 0.2
        if not valid.any():
            valid[0] = True
        nb = -(-n // block)
        gsrc = rng.standard_normal((H, nb, dh))
        gvalid_counts = np.add.reduceat(valid.astype(int), np.arange(0, n, block))
        gvalid = gvalid_counts > 0
        scale = dh**-0.5
        out, _, _ = kernels.tglobal_forward(q * scale, k, v, gsrc, gsrc * 0.5, r, valid, gvalid)
        ref = tglobal_dense_reference(q, k, v, gsrc, gsrc * 0.5, r, valid, gvalid, scale)
        np.testing.assert_allclose(out, ref, atol=1e-10)


def test_tglobal_backends_agree():
    if not kernels.NUMBA_ENABLED:
        pytest.skip("numba backend unavailable")
    rng = np.random.default_rng(3)
    H, n, dh, r, block = 2, 13, 4, 2, 4
    q, k, v = (rng.standard_normal((H, n, dh)) for _ in range(3))
    valid = np.ones(n, dtype=bool)
    valid[10] = False
    nb = -(-n // block)
    kg = rng.standard_normal((H, nb, dh))
    vg = rng.standard_normal((H, nb, dh))
    gvalid = np.ones(nb, dtype=bool)
    out_nb, pl_nb, pg_nb = kernels.tglobal_forward(q, k, v, kg, vg, r, valid, gvalid, use_numba=True)
    out_np, pl_np, pg_np = kernels.tglobal_forward(q, k, v, kg, vg, r, valid, gvalid, use_numba=False)
    np.testing.assert_allclose(out_nb, out_np, atol=1e-12)
    dout = rng.standard_normal(out_nb.shape)
    g_nb = kernels.tglobal_backward(dout, q, k, v, kg, vg, r, pl_nb, pg_nb, use_numba=True)
    g_np = kernels.tglobal_backward(dout, q, k, v, kg, vg, r, pl_np, pg_np, use_numba=False)
    for a, b in zip(g_nb, g_np):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_tglobal_degenerate_window_equals_full_plus_one_global():
    rng = np.random.default_rng(4)
    n, H, dh = 4, 2, 4
    q, k, v = (rng.standard_normal((H, n, dh)) for _ in range(3))
    kg = rng.standard_normal((H, 1, dh))
    vg = rng.standard_normal((H, 1, dh))
    valid = np.ones(n, dtype=bool)
    gvalid = np.ones(1, dtype=bool)
    scale = dh**-0.5
    out, _, _ = kernels.tglobal_forward(q * scale, k, v, kg, vg, n - 1, valid, gvalid)
    keys = np.concatenate([k, kg], axis=1)
    vals = np.concatenate([v, vg], axis=1)
    s = np.einsum("hid,hjd->hij", q * scale, keys)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    ref = p @ vals
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_tglobal_rejects_empty_sequence():
    rng = np.random.default_rng(5)
    layer = TGlobalAttention(8, 2, r=1, block_k=2, rng=rng)
    with pytest.raises(ValueError):
        layer(Tensor(np.zeros((0, 8), dtype=np.float32)))


def test_block_mean_values_and_empty_blocks():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0], [9.0, 10.0]]))
    valid = np.array([True, True, False, False, True])
    out, gvalid = block_mean(x, valid, 2)
    np.testing.assert_allclose(out.data, [[2.0, 3.0], [0.0, 0.0], [9.0, 10.0]])
    np.testing.assert_array_equal(gvalid, [True, False, True])


def test_pad_invariance_of_tglobal_layer():
    rng = np.random.default_rng(6)
    layer = TGlobalAttention(8, 2, r=2, block_k=3, rng=rng)
    x = rng.standard_normal((5, 8)).astype(np.float32)
    pad1 = np.concatenate([x, rng.standard_normal((2, 8)).astype(np.float32)], axis=0)
    pad2 = np.concatenate([x, rng.standard_normal((2, 8)).astype(np.float32)], axis=0)
    v1 = np.array([True] * 5 + [False] * 2)
    out1 = layer(Tensor(pad1), v1).data
    out2 = layer(Tensor(pad2), v1).data
    np.testing.assert_allclose(out1[:5], out2[:5], atol=1e-6)


# ---------------------------------------------------------------------------
# chunked cross-attention
# ---------------------------------------------------------------------------

def _make_neighbors(rng, n_chunks, num_neighbors, m, d, dtype=np.float32, pad_tail=0):
    batch = NeighborBatch()
    for _ in range(n_chunks):
        states = rng.standard_normal((num_neighbors, 2 * m, d)).astype(dtype)
        kv = np.ones(num_neighbors * 2 * m, dtype=bool)
        if pad_tail:
            kv = kv.reshape(num_neighbors, 2 * m)
            kv[:, -pad_tail:] = False
            kv = kv.reshape(-1)
        batch.states.append(Tensor(states))
        batch.key_valid.append(kv)
    return batch


def test_cca_first_chunk_pass_through():
    rng = np.random.default_rng(7)
    m = 4
    layer = ChunkedCrossAttention(8, 2, m, rng)
    layer.wo.weight.data = rng.standard_normal((8, 8)).astype(np.float32)
    x = Tensor(rng.standard_normal((3, 8)).astype(np.float32))
    out = layer(x, NeighborBatch())
    np.testing.assert_array_equal(out.data, x.data)


def test_cca_zero_output_projection_is_identity():
    rng = np.random.default_rng(8)
    m = 4
    layer = ChunkedCrossAttention(8, 2, m, rng)
    for t in (3, 4, 9, 12, 17):
        x = Tensor(rng.standard_normal((t, 8)).astype(np.float32))
        nb = _make_neighbors(rng, (t - 1) // m, 2, m, 8)
        out = layer(x, nb)
        assert np.array_equal(out.data, x.data)


def test_cca_chunk_causality():
    rng = np.random.default_rng(9)
    m = 4
    layer = ChunkedCrossAttention(8, 2, m, rng)
    layer.wo.weight.data = rng.standard_normal((8, 8)).astype(np.float32) * 0.1
    t = 15
    x = Tensor(rng.standard_normal((t, 8)).astype(np.float32))
    nb = _make_neighbors(rng, (t - 1) // m, 2, m, 8)
    base = layer(x, nb).data
    for u in range(1, (t - 1) // m + 1):
        nb2 = NeighborBatch(states=list(nb.states), key_valid=list(nb.key_valid))
        perturbed = nb.states[u - 1].data + rng.standard_normal(nb.states[u - 1].shape).astype(np.float32)
        nb2.states[u - 1] = Tensor(perturbed)
        out2 = layer(x, nb2).data
        assert np.array_equal(base[: u * m], out2[: u * m])
        hi = min((u + 1) * m, t)
        assert not np.array_equal(base[u * m : hi], out2[u * m : hi])
        assert np.array_equal(base[hi:], out2[hi:])


def test_cca_missing_chunk_raises():
    rng = np.random.default_rng(10)
    m = 4
    layer = ChunkedCrossAttention(8, 2, m, rng)
    x = Tensor(rng.standard_normal((10, 8)).astype(np.float32))
    with pytest.raises(MissingNeighborsError):
        layer(x, _make_neighbors(rng, 1, 2, m, 8))


def test_cca_retrieval_off_identity():
    rng = np.random.default_rng(11)
    layer = ChunkedCrossAttention(8, 2, 4, rng)
    layer.wo.weight.data = rng.standard_normal((8, 8)).astype(np.float32)
    x = Tensor(rng.standard_normal((11, 8)).astype(np.float32))
    out = layer(x, None)
    np.testing.assert_array_equal(out.data, x.data)


# ---------------------------------------------------------------------------
# pair counting
# ---------------------------------------------------------------------------

def test_count_closed_forms():
    assert count_attended_pairs("full_causal", 8, causal=True) == 36
    assert count_attended_pairs("full_causal", 8, causal=False) == 64
    assert count_attended_pairs("full_causal", 4096, causal=False) == 16_777_216
    assert count_attended_pairs("tglobal", 8, r=1, k=4) == 38
    assert count_attended_pairs("tglobal", 4096, r=127, k=16) == 2_076_800
    assert count_attended_pairs("chunked_cross", 438, m=64, num_neighbors=2) == 95_744
    assert count_attended_pairs("chunked_cross", 64, m=64, num_neighbors=2) == 0


def test_tglobal_count_matches_enumeration_small():
    for n in (1, 2, 5, 8, 13):
        for r in (0, 1, 3, 9):
            for k in (1, 2, 4, 7):
                idx = np.arange(n)
                local = int(((np.abs(idx[:, None] - idx[None, :]) <= r)).sum())
                total = local + n * (-(-n // k))
                assert count_attended_pairs("tglobal", n, r=r, k=k) == total, (n, r, k)


@pytest.mark.parametrize("n", [8, 64, 256])
def test_instrumented_full_causal_counts(n):
    rng = np.random.default_rng(n)
    layer = CausalSelfAttention(8, 2, rng)
    x = Tensor(rng.standard_normal((n, 8)).astype(np.float32))
    with PairCounter() as pc:
        layer(x)
    assert pc.counts["full_causal"] == count_attended_pairs("full_causal", n, causal=True)


@pytest.mark.parametrize("n,r,k", [(8, 1, 2), (64, 4, 4), (256, 127, 16), (64, 127, 2)])
def test_instrumented_tglobal_counts(n, r, k):
    rng = np.random.default_rng(n + r + k)
    layer = TGlobalAttention(8, 2, r=r, block_k=k, rng=rng)
    x = Tensor(rng.standard_normal((n, 8)).astype(np.float32))
    with PairCounter() as pc:
        layer(x)
    assert pc.counts["tglobal"] == count_attended_pairs("tglobal", n, r=r, k=k)


@pytest.mark.parametrize("t", [65, 130, 438])
def test_instrumented_cca_counts(t):
    rng = np.random.default_rng(t)
    m = 64
    layer = ChunkedCrossAttention(8, 2, m, rng)
    x = Tensor(rng.standard_normal((t, 8)).astype(np.float32))
    nb = _make_neighbors(rng, (t - 1) // m, 2, m, 8)
    with PairCounter() as pc:
        layer(x, nb)
    assert pc.counts["chunked_cross"] == count_attended_pairs("chunked_cross", t, m=m, num_neighbors=2)


# ---------------------------------------------------------------------------
# finite-difference gradients (f64)
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_grad_full_causal_layer(seed):
    rng = np.random.default_rng(600 + seed)
    d, heads = 6, 2
    n = int(rng.integers(2, 6))
    layer = CausalSelfAttention(d, heads, rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((n, d)), requires_grad=True)
    leaves = [x, layer.wq.weight, layer.wk.weight, layer.wv.weight, layer.wo.weight, layer.wo.bias]
    leaf_finite_diff(lambda: projection_loss(layer(x), seed), leaves)


@pytest.mark.parametrize("seed", range(5))
def test_grad_tglobal_layer(seed):
    rng = np.random.default_rng(700 + seed)
    d, heads = 6, 2
    n = int(rng.integers(4, 9))
    r = int(rng.integers(0, 3))
    block = int(rng.integers(1, 4))
    layer = TGlobalAttention(d, heads, r=r, block_k=block, rng=rng, dtype=np.float64)
    valid = np.ones(n, dtype=bool)
    if seed % 2:
        valid[-2:] = False
    x = Tensor(rng.standard_normal((n, d)), requires_grad=True)
    leaves = [x, layer.wq.weight, layer.wk.weight, layer.wv.weight, layer.wo.weight]
    leaf_finite_diff(lambda: projection_loss(layer(x, valid), seed), leaves)


@pytest.mark.parametrize("seed", range(5))
def test_grad_cca_layer(seed):
    rng = np.random.default_rng(800 + seed)
    d, heads, m = 6, 2, 3
    t = int(rng.integers(m + 1, 4 * m))
    layer = ChunkedCrossAttention(d, heads, m, rng, dtype=np.float64)
    layer.wo.weight.data = rng.standard_normal((d, d)) * 0.2
    nb = _make_neighbors(rng, (t - 1) // m, 2, m, d, dtype=np.float64, pad_tail=seed % 3)
    for s in nb.states:
        s.requires_grad = True
    x = Tensor(rng.standard_normal((t, d)), requires_grad=True)
    leaves = [x, layer.wq.weight, layer.wk.weight, layer.wv.weight, layer.wo.weight,
              layer.pos_bias, layer.ln.gamma, layer.ln.beta] + list(nb.states)
    leaf_finite_diff(lambda: projection_loss(layer(x, nb), seed), leaves)


@pytest.mark.parametrize("seed", range(3))
def test_grad_cross_attention_layer(seed):
    rng = np.random.default_rng(900 + seed)
    d, heads = 6, 2
    t, n = int(rng.integers(2, 5)), int(rng.integers(2, 6))
    layer = CrossAttention(d, heads, rng, dtype=np.float64)
    enc_valid = np.ones(n, dtype=bool)
    if n > 2:
        enc_valid[-1] = False
    x = Tensor(rng.standard_normal((t, d)), requires_grad=True)
    enc = Tensor(rng.standard_normal((n, d)), requires_grad=True)
    leaves = [x, enc, layer.wq.weight, layer.wv.weight]
    leaf_finite_diff(lambda: projection_loss(layer(x, enc, enc_valid), seed), leaves)


@pytest.mark.parametrize("seed", range(3))
def test_grad_bidirectional_layer(seed):
    rng = np.random.default_rng(1000 + seed)
    d, heads = 6, 2
    n = int(rng.integers(2, 6))
    layer = BidirectionalSelfAttention(d, heads, rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((n, d)), requires_grad=True)
    leaves = [x, layer.wq.weight, layer.wk.weight, layer.wv.weight]
    leaf_finite_diff(lambda: projection_loss(layer(x), seed), leaves)
