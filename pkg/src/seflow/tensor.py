"""Minimal reverse-mode autodiff over numpy arrays.

Activations are rank-3 arrays laid out as (batch, channels, time); parameters
may have any rank. Each op records its parents and a closure that pushes the
output gradient back to them, and ``Tensor.backward`` walks that tape in
reverse topological order.

Only the primitives the flow needs are provided. There is no general
broadcasting: binary ops require equal shapes or a Python scalar.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import GradientError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, validation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self._grad_owned = False
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""

    def __repr__(self) -> str:
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{op})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # Gradient buffers may alias arrays handed down by other adjoints; they
    # are only modified in place once this tensor owns a private copy.
    def _accumulate(self, g: np.ndarray) -> None:
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
        if self.grad is None:
            self.grad = g
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def _accumulate_at(self, index, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        elif not self._grad_owned:
            self.grad = self.grad.copy()
        self._grad_owned = True
        self.grad[index] += g

    def backward(self) -> None:
        """Populate ``grad`` on every tensor this scalar depends on."""
        if self.data.size != 1:
            raise GradientError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GradientError(
                "backward() on a tensor with no recorded graph "
                "(created under no_grad or from constants only)"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None:
                continue
            if node.grad is None:
                continue
            node._backward(node.grad)
            if node._parents:
                # intermediate buffers are no longer needed once propagated
                node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _check_rank3(x: Tensor, op: str) -> None:
    if x.data.ndim != 3:
        raise ShapeError(f"{op}: expected (batch, channels, time), got shape {x.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = float(b)

        def bw(g):
            a._accumulate(g)

        return _result(a.data + c, (a,), bw, "add_scalar")
    a = _as_tensor(a)
    _check_same_shape(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(-g)

    return _result(-a.data, (a,), bw, "neg")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = float(b)

        def bw(g):
            a._accumulate(g * c)

        return _result(a.data * c, (a,), bw, "mul_scalar")
    a = _as_tensor(a)
    _check_same_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), bw, "mul")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        a._accumulate(g * out_data)

    return _result(out_data, (a,), bw, "exp")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bw(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return _result(out_data, (a,), bw, "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for large |x|
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid(a.data)

    def bw(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _result(out_data, (a,), bw, "sigmoid")


def square(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(2.0 * g * a.data)

    return _result(a.data * a.data, (a,), bw, "square")


def gated_unit(a: Tensor, b: Tensor) -> Tensor:
    """WaveNet gate ``tanh(a) * sigmoid(b)``, fused for speed."""
    _check_same_shape(a, b, "gated_unit")
    ta = np.tanh(a.data)
    sb = _sigmoid(b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * sb * (1.0 - ta * ta))
        if b.requires_grad:
            b._accumulate(g * ta * sb * (1.0 - sb))

    return _result(ta * sb, (a, b), bw, "gated_unit")


# ----------------------------------------------------------------- reductions


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def bw(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(np.asarray(a.data.sum()), (a,), bw, "sum")


def sum_squares(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(2.0 * g * a.data)

    flat = a.data.ravel()
    return _result(np.asarray(np.dot(flat, flat)), (a,), bw, "sum_squares")


# ------------------------------------------------------------------ structure


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check_rank3(x, "slice_channels")
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_channels: [{start}:{stop}] out of range for {x.shape}")

    def bw(g):
        x._accumulate_at((slice(None), slice(start, stop)), g)

    return _result(x.data[:, start:stop], (x,), bw, "slice_channels")


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    for p in parts:
        _check_rank3(p, "concat_channels")
    b, t = parts[0].shape[0], parts[0].shape[2]
    for p in parts[1:]:
        if p.shape[0] != b or p.shape[2] != t:
            raise ShapeError(
                f"concat_channels: shape mismatch {parts[0].shape} vs {p.shape}"
            )
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi])

    return _result(np.concatenate([p.data for p in parts], axis=1), parts, bw, "concat")


# -------------------------------------------------------------- convolutions


def _batched_outer(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    """sum_b g[b] @ x[b].T for (B, O, T) and (B, C, T)."""
    return np.matmul(g, x.transpose(0, 2, 1)).sum(axis=0)


def same_padding(kernel_size: int, dilation: int) -> tuple[int, int]:
    """Zero padding (left, right) that keeps the time length unchanged."""
    total = dilation * (kernel_size - 1)
    return total // 2, total - total // 2


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Dense 1-D cross-correlation with zero same-padding.

    ``x`` is (B, C_in, T), ``weight`` is (C_out, C_in, K), ``bias`` is (C_out,).
    """
    _check_rank3(x, "conv1d")
    if weight.data.ndim != 3:
        raise ShapeError(f"conv1d: weight must be (out, in, kernel), got {weight.shape}")
    if dilation < 1:
        raise ShapeError(f"conv1d: dilation must be >= 1, got {dilation}")
    c_out, c_in, k = weight.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv1d: input shape {x.shape} does not match weight shape {weight.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv1d: bias shape {bias.shape} does not match weight shape {weight.shape}")
    t = x.shape[2]
    left, right = same_padding(k, dilation)
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right))) if left or right else x.data
    w = weight.data
    out = np.matmul(w[:, :, 0], xp[:, :, 0:t])
    for j in range(1, k):
        out += np.matmul(w[:, :, j], xp[:, :, j * dilation : j * dilation + t])
    if bias is not None:
        out += bias.data[None, :, None]

    def bw(g):
        if weight.requires_grad:
            gw = np.empty_like(w)
            for j in range(k):
                gw[:, :, j] = _batched_outer(g, xp[:, :, j * dilation : j * dilation + t])
            weight._accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            if k == 1:
                x._accumulate(np.matmul(w[:, :, 0].T, g))
                return
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j * dilation : j * dilation + t] += np.matmul(w[:, :, j].T, g)
            x._accumulate(gxp[:, :, left : left + t])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw, "conv1d")


def pointwise(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution with a (C_out, C_in) matrix."""
    _check_rank3(x, "pointwise")
    if weight.data.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"pointwise: input shape {x.shape} does not match weight shape {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"pointwise: bias shape {bias.shape} does not match weight shape {weight.shape}")
    w = weight.data
    out = np.matmul(w, x.data)
    if bias is not None:
        out += bias.data[None, :, None]

    def bw(g):
        if weight.requires_grad:
            weight._accumulate(_batched_outer(g, x.data))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            x._accumulate(np.matmul(w.T, g))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw, "pointwise")


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Per-channel 1-D cross-correlation; ``weight`` is (C, K)."""
    _check_rank3(x, "depthwise_conv1d")
    if weight.data.ndim != 2 or weight.shape[0] != x.shape[1]:
        raise ShapeError(
            f"depthwise_conv1d: input shape {x.shape} needs one filter per channel, got weight shape {weight.shape}"
        )
    if dilation < 1:
        raise ShapeError(f"depthwise_conv1d: dilation must be >= 1, got {dilation}")
    c, k = weight.shape
    t = x.shape[2]
    left, right = same_padding(k, dilation)
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right))) if left or right else x.data
    w = weight.data
    out = xp[:, :, 0:t] * w[None, :, 0, None]
    for j in range(1, k):
        out += xp[:, :, j * dilation : j * dilation + t] * w[None, :, j, None]
    if bias is not None:
        out += bias.data[None, :, None]

    def bw(g):
        if weight.requires_grad:
            gw = np.empty_like(w)
            for j in range(k):
                gw[:, j] = np.einsum("bct,bct->c", g, xp[:, :, j * dilation : j * dilation + t])
            weight._accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j * dilation : j * dilation + t] += g * w[None, :, j, None]
            x._accumulate(gxp[:, :, left : left + t])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw, "depthwise_conv1d")


def separable_conv(
    x: Tensor,
    depthwise: Tensor,
    pointwise_weight: Tensor,
    dilation: int = 1,
    depthwise_bias: Tensor | None = None,
    pointwise_bias: Tensor | None = None,
) -> Tensor:
    """Depthwise filter per channel followed by a channel-mixing 1x1 conv."""
    if depthwise.data.ndim != 2 or depthwise.shape[0] != x.shape[1]:
        raise ShapeError(
            f"separable_conv: input shape {x.shape} does not match depthwise shape {depthwise.shape}"
        )
    if pointwise_weight.data.ndim != 2 or pointwise_weight.shape[1] != depthwise.shape[0]:
        raise ShapeError(
            f"separable_conv: pointwise shape {pointwise_weight.shape} does not match "
            f"depthwise shape {depthwise.shape}"
        )
    h = depthwise_conv1d(x, depthwise, depthwise_bias, dilation)
    return pointwise(h, pointwise_weight, pointwise_bias)


# ------------------------------------------------------------------ matrices


def logabsdet(w: Tensor) -> Tensor:
    """log|det W| for a square matrix; gradient is inv(W)^T."""
    if w.data.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"logabsdet: expected a square matrix, got {w.shape}")
    _, value = np.linalg.slogdet(w.data)

    def bw(g):
        w._accumulate(g * np.linalg.inv(w.data).T)

    return _result(np.asarray(value, dtype=w.dtype), (w,), bw, "logabsdet")


def weight_norm(v: Tensor, g: Tensor) -> Tensor:
    """Effective weight ``g * v / ||v||`` with the norm taken per output row.

    ``v`` has the output dimension first; ``g`` has shape (out,).
    """
    if g.shape != (v.shape[0],):
        raise ShapeError(f"weight_norm: magnitude shape {g.shape} does not match direction {v.shape}")
    axes = tuple(range(1, v.data.ndim))
    bshape = (-1,) + (1,) * (v.data.ndim - 1)
    norm = np.sqrt(np.sum(v.data * v.data, axis=axes))
    unit = v.data / norm.reshape(bshape)
    out = unit * g.data.reshape(bshape)

    def bw(grad):
        # d/dg = <grad, unit>; d/dv = g/||v|| * (grad - <grad, unit> unit)
        proj = np.sum(grad * unit, axis=axes)
        if g.requires_grad:
            g._accumulate(proj)
        if v.requires_grad:
            scale = (g.data / norm).reshape(bshape)
            v._accumulate(scale * (grad - proj.reshape(bshape) * unit))

    return _result(out, (v, g), bw, "weight_norm")
