"""Reverse-mode automatic differentiation over float64 numpy arrays.

The tape is define-by-run: every operation on a :class:`Tensor` that has a
differentiable input records its parents and a closure mapping the output
gradient to input gradients. ``backward`` walks the graph once in reverse
topological order.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = Tensor(data)
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- backward ---------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise binary ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad / bd, (a, b), backward)


def minimum(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("minimum", a.data, b.data)
    pick_a = a.data <= b.data

    def backward(g):
        return (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                _unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return Tensor._make(np.where(pick_a, a.data, b.data), (a, b), backward)


def maximum(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("maximum", a.data, b.data)
    pick_a = a.data >= b.data

    def backward(g):
        return (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                _unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return Tensor._make(np.where(pick_a, a.data, b.data), (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    ad = a.data

    def backward(g):
        return (g * exponent * ad ** (exponent - 1),)

    return Tensor._make(ad ** exponent, (a,), backward)


def square(a) -> Tensor:
    a = _wrap(a)
    ad = a.data

    def backward(g):
        return (2.0 * g * ad,)

    return Tensor._make(ad * ad, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if bd.ndim == 1:
                ga = np.multiply.outer(g, bd)
            else:
                ga = g @ np.swapaxes(bd, -1, -2)
            ga = _unbroadcast(ga, ad.shape)
        if b.requires_grad:
            if ad.ndim == 1:
                gb = np.multiply.outer(ad, g)
            elif bd.ndim == 1:
                gb = np.einsum("...i,...->i", ad, g) if ad.ndim > 1 else ad * g
            else:
                a2 = ad.reshape(-1, ad.shape[-1]) if bd.ndim == 2 else ad
                g2 = g.reshape(-1, g.shape[-1]) if bd.ndim == 2 else g
                gb = np.swapaxes(a2, -1, -2) @ g2
            gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), backward)


# -- elementwise unary ----------------------------------------------------------
def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return Tensor._make(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = expit(a.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._make(out, (a,), backward)


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._make(a.data * mask, (a,), backward)


def elu(a) -> Tensor:
    a = _wrap(a)
    neg = np.expm1(np.minimum(a.data, 0.0))
    pos = a.data > 0
    out = np.where(pos, a.data, neg)

    def backward(g):
        return (g * np.where(pos, 1.0, neg + 1.0),)

    return Tensor._make(out, (a,), backward)


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return Tensor._make(out, (a,), backward)


def log(a) -> Tensor:
    a = _wrap(a)
    ad = a.data

    def backward(g):
        return (g / ad,)

    return Tensor._make(np.log(ad), (a,), backward)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return Tensor._make(out, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is zero where the clamp binds."""
    a = _wrap(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * inside,)

    return Tensor._make(np.clip(a.data, lo, hi), (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), backward)


# -- reductions and shape ops ---------------------------------------------------
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    shape = a.shape
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[i] for i in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return Tensor._make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        shapes = ", ".join(str(d.shape) for d in datas)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._make(out, tensors, backward)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a, index) -> Tensor:
    a = _wrap(a)
    shape = a.shape

    fancy = _is_fancy(index)

    def backward(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return Tensor._make(a.data[index], (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return Tensor._make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return Tensor._make(np.transpose(a.data, axes), (a,), backward)


def stop_gradient(a) -> Tensor:
    return Tensor(_as_array(a))
