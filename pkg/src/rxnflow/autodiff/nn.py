"""Parameter containers and the small layer vocabulary used by the model."""

from __future__ import annotations

import copy
import math

import numpy as np

from . import tensor as T
from .tensor import Tensor, get_default_dtype


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def param(self, name: str, data) -> Tensor:
        t = Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)
        setattr(self, name, t)
        return t

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def astype(self, dtype):
        """Deep copy with every parameter cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return clone

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def uniform_init(rng: np.random.Generator, fan_in: int, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        super().__init__()
        if zero:
            self.param("weight", np.zeros((n_in, n_out)))
            self.param("bias", np.zeros(n_out))
        else:
            self.param("weight", uniform_init(rng, n_in, (n_in, n_out)))
            self.param("bias", uniform_init(rng, n_in, (n_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.param("gain", np.ones(dim))
        self.param("bias", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """Stack of Linear layers with GELU between them.

    ``zero_last`` starts the network at the constant-zero function.
    """

    def __init__(self, sizes, rng, zero_last=False):
        super().__init__()
        self.depth = len(sizes) - 1
        for i in range(self.depth):
            last = i == self.depth - 1
            setattr(self, f"l{i}", Linear(sizes[i], sizes[i + 1], rng, zero=zero_last and last))

    def __call__(self, x: Tensor) -> Tensor:
        for i in range(self.depth):
            x = getattr(self, f"l{i}")(x)
            if i < self.depth - 1:
                x = T.gelu(x)
        return x
