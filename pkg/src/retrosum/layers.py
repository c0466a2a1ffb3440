"""Parameter containers and the basic trainable layers."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Parameter(Tensor):
    """A leaf tensor owned by a module. ``trainable`` mirrors requires_grad."""

    def __init__(self, data, trainable: bool = True):
        super().__init__(np.asarray(data), requires_grad=trainable)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self.requires_grad = bool(value)
        if not value:
            self.grad = None


class Module:
    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for key, value in vars(self).items():
            name = f"{prefix}.{key}" if prefix else key
            out.update(_collect(name, value))
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def modules(self) -> list["Module"]:
        found = [self]
        stack = list(vars(self).values())
        while stack:
            v = stack.pop()
            if isinstance(v, Module):
                found.append(v)
                stack.extend(vars(v).values())
            elif isinstance(v, (list, tuple)):
                stack.extend(v)
        return found

    def train(self) -> None:
        for m in self.modules():
            m.training = True

    def eval(self) -> None:
        for m in self.modules():
            m.training = False

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _collect(name: str, value) -> dict[str, Parameter]:
    if isinstance(value, Parameter):
        return {name: value}
    if isinstance(value, Module):
        return value.named_parameters(prefix=name)
    if isinstance(value, (list, tuple)):
        out = {}
        for i, v in enumerate(value):
            out.update(_collect(f"{name}.{i}", v))
        return out
    return {}


def normal_init(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32):
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(normal_init(rng, (d_in, d_out), dtype=dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ag.matmul(x, self.weight)
        if self.bias is not None:
            y = ag.add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(d, dtype=dtype))
        self.beta = Parameter(np.zeros(d, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta, self.eps)


class EmbeddingTable(Module):
    def __init__(self, size: int, d: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.table = Parameter(normal_init(rng, (size, d), dtype=dtype))

    def forward(self, ids) -> Tensor:
        return ag.embedding_lookup(self.table, ids)


class FeedForward(Module):
    def __init__(self, d: int, ff_dim: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.up = Linear(d, ff_dim, rng, dtype=dtype)
        self.down = Linear(ff_dim, d, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(ag.gelu(self.up(x)))


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        super().__init__()
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return ag.dropout(x, self.p, self.rng, self.training)
