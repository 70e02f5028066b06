"""Parameter containers and the layers the models are built from."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import CheckpointError
from .tensor import Parameter, Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples, redrawn until they fall within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class Module:
    """Base class: parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict, strict: bool = True) -> list[str]:
        """Copy matching arrays into parameters; returns names left unmatched.

        With ``strict`` any missing name or shape mismatch raises.
        """
        unmatched = []
        for name, p in self.named_parameters():
            arr = state.get(name)
            if arr is None or tuple(arr.shape) != p.shape:
                unmatched.append(name)
                continue
            p.data = np.array(arr, dtype=p.dtype)
        if strict and unmatched:
            raise CheckpointError("unmatched parameters: " + ", ".join(unmatched))
        return unmatched

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _zeros(*shape) -> Tensor:
    return Parameter(np.zeros(shape, dtype=T.get_dtype()))


def _ones(*shape) -> Tensor:
    return Parameter(np.ones(shape, dtype=T.get_dtype()))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        self.weight = _zeros(d_in, d_out)
        self.bias = _zeros(d_out) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.weight = _ones(dim)
        self.bias = _zeros(dim)
        self._eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self._eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0):
        self.weight = _zeros(c_out, c_in, kernel, kernel)
        self.bias = _zeros(c_out)
        self._stride = stride
        self._padding = padding

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self._stride, self._padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int = 2, stride: int = 2):
        self.weight = _zeros(c_in, c_out, kernel, kernel)
        self.bias = _zeros(c_out)
        self._stride = stride

    def forward(self, x):
        return T.conv_transpose2d(x, self.weight, self.bias, self._stride)


def init_default(module: Module, rng: np.random.Generator, std: float = 0.02,
                 skip: Optional[set] = None) -> None:
    """Truncated-normal weights, zero biases, unit/zero LayerNorm scale/shift.

    Parameters are visited in name order so the result is a pure function of
    the seed.
    """
    skip = skip or set()
    norms = {id(m.weight) for m in _walk(module) if isinstance(m, LayerNorm)}
    for name, p in module.named_parameters():
        if name in skip:
            continue
        if id(p) in norms:
            p.data = np.ones(p.shape, dtype=p.dtype)
        elif name.endswith("bias"):
            p.data = np.zeros(p.shape, dtype=p.dtype)
        else:
            p.data = trunc_normal(rng, p.shape, std).astype(p.dtype)


def _walk(module: Module):
    yield module
    for name, value in vars(module).items():
        if name.startswith("_"):
            continue
        if isinstance(value, Module):
            yield from _walk(value)
        elif isinstance(value, (list, tuple)):
            for item in value:
                if isinstance(item, Module):
                    yield from _walk(item)
