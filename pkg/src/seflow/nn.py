"""Parameter containers and weight-normalized convolution layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


def weight_norm_reparam(weight: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a weight into direction ``v`` and per-output-row magnitude ``g``.

    With ``g = ||v||`` the effective weight ``g * v / ||v||`` equals the
    original weight exactly.
    """
    v = np.array(weight, copy=True)
    norm = np.sqrt(np.sum(v * v, axis=tuple(range(1, v.ndim))))
    if np.any(norm == 0):
        raise ShapeError("weight_norm_reparam: direction has a zero-norm output row")
    return v, norm


class Module:
    """Walks attributes for Tensors (parameters) and child modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        extra = state.keys() - own.keys()
        if missing or extra:
            raise ShapeError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _param(data, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Pointwise(Module):
    """1x1 convolution, optionally weight-normalized.

    ``zero_init`` gives an all-zero plain (not normalized) layer; a zero
    direction has no defined norm.
    """

    def __init__(self, in_channels, out_channels, rng, *, weight_norm=True, zero_init=False, dtype=np.float64):
        if zero_init:
            self.weight = _param(np.zeros((out_channels, in_channels)), dtype)
            self.bias = _param(np.zeros(out_channels), dtype)
            self.g = None
            return
        bound = 1.0 / np.sqrt(in_channels)
        w = rng.uniform(-bound, bound, size=(out_channels, in_channels))
        self.bias = _param(rng.uniform(-bound, bound, size=out_channels), dtype)
        if weight_norm:
            v, g = weight_norm_reparam(w)
            self.v = _param(v, dtype)
            self.g = _param(g, dtype)
        else:
            self.weight = _param(w, dtype)
            self.g = None

    def effective_weight(self) -> Tensor:
        if self.g is None:
            return self.weight
        return T.weight_norm(self.v, self.g)

    def __call__(self, x: Tensor) -> Tensor:
        return T.pointwise(x, self.effective_weight(), self.bias)


class DepthwiseConv(Module):
    """Per-channel dilated convolution, weight-normalized per channel, no bias."""

    def __init__(self, channels, kernel_size, dilation, rng, *, dtype=np.float64):
        bound = 1.0 / np.sqrt(kernel_size)
        v, g = weight_norm_reparam(rng.uniform(-bound, bound, size=(channels, kernel_size)))
        self.v = _param(v, dtype)
        self.g = _param(g, dtype)
        self.dilation = dilation

    def effective_weight(self) -> Tensor:
        return T.weight_norm(self.v, self.g)

    def __call__(self, x: Tensor) -> Tensor:
        return T.depthwise_conv1d(x, self.effective_weight(), None, self.dilation)
