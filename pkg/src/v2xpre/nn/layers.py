"""Parameters and the handful of layers the encoder, decoder and heads need."""
from __future__ import annotations

import numpy as np

from v2xpre.nn import tensor as T
from v2xpre.nn.tensor import Tensor


class Parameter(Tensor):
    __slots__ = ("name", "m", "v", "step")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Attribute-walking parameter registry, ``torch.nn.Module``-style."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for k, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for n, p in own.items():
            if n in state:
                arr = np.asarray(state[n], dtype=np.float64)
                if arr.shape != p.data.shape:
                    raise T.ShapeError(f"{n}: checkpoint shape {arr.shape} != {p.data.shape}")
                p.data = arr.copy()
                p.m = np.zeros_like(p.data)
                p.v = np.zeros_like(p.data)
                p.step = 0

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(kaiming_uniform(rng, (fan_in, fan_out), fan_in))
        self.bias = Parameter(np.zeros(fan_out)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if self.bias is not None else y


class Conv2d(Module):
    """Same-padded, stride-1 conv on (X, Y, C) maps."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, k: int = 3):
        self.weight = Parameter(kaiming_uniform(rng, (k, k, cin, cout), k * k * cin))
        self.bias = Parameter(np.zeros(cout))

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias)


class Affine(Module):
    """Learnable per-channel scale and shift; stands in for batch-dependent normalization."""

    def __init__(self, channels: int):
        self.scale = Parameter(np.ones(channels))
        self.shift = Parameter(np.zeros(channels))

    def __call__(self, x):
        return T.add(T.mul(x, self.scale), self.shift)
