"""Optimizer contract: freeze, determinism, closed-form first step."""

import numpy as np
import pytest

from retrosum import autograd as ag
from retrosum.autograd import Tensor
from retrosum.layers import Parameter
from retrosum.optim import Adam, GradientError


def test_zero_gradients_leave_parameters_unchanged():
    p = Parameter(np.array([1.0, 2.0], dtype=np.float32))
    opt = Adam({"p": p}, lr=1e-4)
    p.grad = np.zeros_like(p.data)
    before = p.data.copy()
    opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_frozen_parameter_bit_identical_under_sibling_updates():
    rng = np.random.default_rng(0)
    frozen = Parameter(rng.standard_normal(4).astype(np.float32), trainable=False)
    live = Parameter(rng.standard_normal(4).astype(np.float32))
    opt = Adam({"frozen": frozen, "live": live}, lr=1e-2)
    frozen_bytes = frozen.data.tobytes()
    for _ in range(10):
        live.grad = np.ones_like(live.data)
        frozen.grad = None
        opt.step()
    assert frozen.data.tobytes() == frozen_bytes
    assert "frozen" not in opt.m


def test_first_step_matches_closed_form():
    lr, eps = 1e-4, 1e-8
    p = Parameter(np.array([0.5], dtype=np.float64))
    opt = Adam({"p": p}, lr=lr, eps=eps)
    p.grad = np.array([1.0])
    opt.step()
    # step 1: mhat = g, vhat = g*g; delta = -lr * g / (|g| + eps)
    expected = 0.5 - lr * 1.0 / (1.0 + eps)
    np.testing.assert_allclose(p.data, [expected], rtol=0, atol=1e-15)


def test_nan_gradient_aborts_with_name():
    p = Parameter(np.zeros(2, dtype=np.float32))
    opt = Adam({"layer.weight": p})
    p.grad = np.array([np.nan, 0.0], dtype=np.float32)
    with pytest.raises(GradientError, match="layer.weight"):
        opt.step()


def test_deterministic_trajectory():
    def run():
        rng = np.random.default_rng(7)
        w = Parameter(rng.standard_normal((3, 3)).astype(np.float32))
        opt = Adam({"w": w}, lr=1e-3)
        losses = []
        for _ in range(5):
            x = Tensor(rng.standard_normal((2, 3)).astype(np.float32))
            loss = ag.tmean(ag.mul(ag.matmul(x, w), ag.matmul(x, w)))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        return losses, w.data.copy()

    l1, w1 = run()
    l2, w2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(w1, w2)
