"""Differentiable operations on :class:`Tensor`.

Feature maps are laid out channels x height x width.  There is no general
broadcasting: binary ops take same-shape operands, and the one mixed-shape
case the network needs (a single-channel map applied to every channel) has
its own op, :func:`broadcast_mul`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Function, Tensor, as_tensor


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


class Conv2d(Function):
    """Stride-1 convolution with zero "same" padding, via im2col."""

    def forward(self, x, w, b):
        cout, cin, k, _ = w.shape
        c, h, wd = x.shape
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p)))
        # (C, H, W, k, k) -> (C, k, k, H, W) so rows line up with w.reshape(Cout, -1)
        win = sliding_window_view(xp, (k, k), axis=(1, 2))
        self.cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(cin * k * k, h * wd)
        self.w2 = w.reshape(cout, -1)
        self.geom = (cin, h, wd, k)
        out = self.w2 @ self.cols
        out += b[:, None]
        return out.reshape(cout, h, wd)

    def backward(self, grad):
        cin, h, wd, k = self.geom
        g = grad.reshape(grad.shape[0], -1)
        gx = gw = gb = None
        if self.needs_grad[1]:
            gw = (g @ self.cols.T).reshape(self.inputs[1].shape)
        if self.needs_grad[2]:
            gb = g.sum(axis=1)
        if self.needs_grad[0]:
            p = k // 2
            gcols = (self.w2.T @ g).reshape(cin, k, k, h, wd)
            gxp = np.zeros((cin, h + 2 * p, wd + 2 * p))
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + h, j:j + wd] += gcols[:, i, j]
            gx = gxp[:, p:p + h, p:p + wd]
        return gx, gw, gb


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Zero-padded "same" convolution: output spatial extent equals the input's."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects input [C,H,W] and weight [Cout,Cin,k,k], got {x.shape} and {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if cin != x.shape[0]:
        raise ShapeError(f"conv2d: weight expects {cin} input channels, input has {x.shape[0]}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    if x.shape[1] < 1 or x.shape[2] < 1:
        raise ShapeError(f"conv2d: empty spatial extent {x.shape[1:]}")
    return Conv2d.apply(x, weight, bias)


class MaxPool2x2(Function):
    def forward(self, x):
        c, h, w = x.shape
        win = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
        # argmax returns the first maximum, i.e. row-major first within the window
        self.idx = win.argmax(axis=-1)
        return np.take_along_axis(win, self.idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        c, h, w = self.inputs[0].shape
        onehot = np.zeros((c, h // 2, w // 2, 4))
        np.put_along_axis(onehot, self.idx[..., None], grad[..., None], axis=-1)
        gx = onehot.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
        return (gx,)


def maxpool2x2(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool2x2 expects [C,H,W], got {x.shape}")
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"maxpool2x2 needs even height and width, got {x.shape[1]}x{x.shape[2]}")
    return MaxPool2x2.apply(x)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Tanh(Function):
    def forward(self, x):
        self.y = np.tanh(x)
        return self.y

    def backward(self, grad):
        return (grad * (1.0 - self.y * self.y),)


def activation(x: Tensor, kind: str = "relu") -> Tensor:
    x = as_tensor(x)
    if kind == "relu":
        return Relu.apply(x)
    if kind == "tanh":
        return Tanh.apply(x)
    raise ValueError(f"unknown activation {kind!r}; expected 'relu' or 'tanh'")


def relu(x: Tensor) -> Tensor:
    return Relu.apply(as_tensor(x))


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(as_tensor(x))


class SpatialSoftmax(Function):
    def forward(self, x):
        e = np.exp(x - x.max())
        self.y = e / e.sum()
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - np.sum(grad * y)),)


def spatial_softmax(x: Tensor) -> Tensor:
    """Softmax over every spatial position of a single-channel map."""
    x = as_tensor(x)
    if x.data.ndim != 3 or x.shape[0] != 1:
        raise ShapeError(f"spatial_softmax expects [1,H,W], got {x.shape}")
    return SpatialSoftmax.apply(x)


class BroadcastMul(Function):
    def forward(self, f, m):
        return f * m

    def backward(self, grad):
        f, m = self.inputs
        gf = grad * m.data if self.needs_grad[0] else None
        gm = np.sum(grad * f.data, axis=0, keepdims=True) if self.needs_grad[1] else None
        return gf, gm


def broadcast_mul(features: Tensor, prob_map: Tensor) -> Tensor:
    """Multiply every channel of ``features`` by a single-channel map."""
    features, prob_map = as_tensor(features), as_tensor(prob_map)
    if features.data.ndim != 3 or prob_map.data.ndim != 3 or prob_map.shape[0] != 1:
        raise ShapeError(f"broadcast_mul expects [C,H,W] and [1,H,W], got {features.shape} and {prob_map.shape}")
    if features.shape[1:] != prob_map.shape[1:]:
        raise ShapeError(f"broadcast_mul: spatial extents {features.shape[1:]} and {prob_map.shape[1:]} differ")
    return BroadcastMul.apply(features, prob_map)


class Concat(Function):
    def forward(self, *arrays):
        self.sizes = [a.shape[0] for a in arrays]
        return np.concatenate(arrays, axis=0)

    def backward(self, grad):
        return np.split(grad, np.cumsum(self.sizes)[:-1], axis=0)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Channel-wise concatenation of [C_i,H,W] maps."""
    tensors = [as_tensor(t) for t in tensors]
    spatial = {t.shape[1:] for t in tensors}
    if len(spatial) != 1:
        raise ShapeError(f"concat: spatial extents differ: {sorted(spatial)}")
    return Concat.apply(*tensors)


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return (grad * b.data if self.needs_grad[0] else None,
                grad * a.data if self.needs_grad[1] else None)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return Mul.apply(a, b)


class Scale(Function):
    def forward(self, x, c):
        self.c = c
        return x * c

    def backward(self, grad):
        return (grad * self.c,)


class AddScalar(Function):
    def forward(self, x, c):
        return x + c

    def backward(self, grad):
        return (grad,)


def scale(x: Tensor, c: float) -> Tensor:
    return Scale.apply(as_tensor(x), c=c)


def add_scalar(x: Tensor, c: float) -> Tensor:
    return AddScalar.apply(as_tensor(x), c=c)


class Square(Function):
    def forward(self, x):
        return x * x

    def backward(self, grad):
        return (2.0 * grad * self.inputs[0].data,)


def square(x: Tensor) -> Tensor:
    return Square.apply(as_tensor(x))


class SumAll(Function):
    def forward(self, x):
        return np.asarray(x.sum())

    def backward(self, grad):
        return (np.full(self.inputs[0].shape, float(grad)),)


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element, as a 0-d tensor."""
    return SumAll.apply(as_tensor(x))
