"""Dense float64 tensors with a reverse-mode gradient trace."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Sequence, Tuple

import numpy as np

from ..errors import ShapeError


class Tensor:
    """An n-dimensional float64 array that optionally records how it was made.

    Leaf tensors created with ``requires_grad=True`` own a ``grad`` buffer of
    the same shape, which :func:`backward` accumulates into.  Tensors produced
    by a :class:`Function` keep a reference to it (``creator``) so the graph
    can be walked in reverse.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, creator: Optional["Function"] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.creator = creator if self.requires_grad else None
        self.grad: Optional[np.ndarray] = None
        if self.requires_grad and self.creator is None:
            self.grad = np.zeros_like(self.data)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic is restricted to same-shape operands or python scalars.
    def __add__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.add_scalar(self, -float(other))

    def __rsub__(self, other):
        from . import ops

        return ops.add_scalar(ops.scale(self, -1.0), float(other))

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def sum(self) -> "Tensor":
        from . import ops

        return ops.sum_all(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Function:
    """A differentiable operation.

    Subclasses implement ``forward`` on raw arrays and ``backward``, which maps
    the gradient w.r.t. the output onto one gradient per input (``None`` for
    inputs that do not need one).
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs
        self.needs_grad = tuple(t.requires_grad for t in inputs)

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        return Tensor(out, requires_grad=any(fn.needs_grad), creator=fn)


def _topological_order(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.creator is not None:
            for parent in node.creator.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    The graph is left intact, so calling this twice doubles the leaf gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.creator is None:
            node.grad += g
            continue
        fn = node.creator
        for parent, needed, pg in zip(fn.inputs, fn.needs_grad, fn.backward(g)):
            if not needed or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


@dataclass
class Parameter:
    """A named trainable tensor plus its Adam moment buffers."""

    name: str
    tensor: Tensor
    m: np.ndarray = field(init=False, repr=False)
    v: np.ndarray = field(init=False, repr=False)
    step: int = 0

    def __post_init__(self):
        if not self.tensor.requires_grad:
            self.tensor = Tensor(self.tensor.data, requires_grad=True)
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)

    @classmethod
    def from_array(cls, name: str, array) -> "Parameter":
        return cls(name, Tensor(np.array(array, dtype=np.float64), requires_grad=True))

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad

    @property
    def shape(self):
        return self.tensor.shape

    def zero_grad(self) -> None:
        self.tensor.zero_grad()

    def reset_state(self) -> None:
        self.m[...] = 0.0
        self.v[...] = 0.0
        self.step = 0
