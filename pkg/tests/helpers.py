"""Shared test utilities: finite-difference gradient oracle."""

import numpy as np

from retrosum.autograd import Tensor


def finite_diff_check(fn, arrays, h=1e-5, tol=1e-4, rng=None):
    """Check analytic gradients of ``fn`` against central finite differences.

    ``fn`` takes len(arrays) Tensors and returns a scalar Tensor. All arrays
    must be float64. Fails if any element's error exceeds
    tol * max(1, |analytic|, |numeric|).
    """
    tensors = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    loss = fn(*tensors)
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst = 0.0
    for ti, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = fn(*[Tensor(x.data) for x in tensors]).item()
            flat[i] = orig - h
            lm = fn(*[Tensor(x.data) for x in tensors]).item()
            flat[i] = orig
            num[i] = (lp - lm) / (2 * h)
        a = analytic[ti].reshape(-1)
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(num)))
        err = np.abs(a - num) / denom
        worst = max(worst, float(err.max()) if err.size else 0.0)
        assert err.max() < tol, (
            f"gradient mismatch on input {ti}: max rel err {err.max():.3e} "
            f"(analytic {a[err.argmax()]:.6e} vs numeric {num[err.argmax()]:.6e})"
        )
    return worst


def random_projection_loss(out, seed=0):
    """Project a tensor output to a scalar with a fixed random direction."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(out.shape)
    from retrosum import autograd as ag

    return ag.tsum(ag.mul(out, w))
