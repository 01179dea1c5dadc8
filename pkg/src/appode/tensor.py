"""Tape-free reverse-mode autodiff over numpy arrays.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the upstream adjoint to parent adjoints.  The
graph lives exactly as long as the tensors referencing it, so a training
iteration drops its graph as soon as the loss goes out of scope.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
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
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # construction -----------------------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        live = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = live
        out._parents = tuple(parents) if live else ()
        out._backward = backward if live else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operators --------------------------------------------------------------------
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

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(dtype or DEFAULT_DTYPE)
    return Tensor(arr)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=True, name=name)


def _lift(a, b):
    """Convert a possible python scalar / array operand to a Tensor of a matching dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# graph traversal -------------------------------------------------------------------


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that carry gradient, parents before children."""
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def graph_size(root: Tensor) -> int:
    return len(topo_order(root))


def backward(loss: Tensor, grad: np.ndarray | None = None) -> int:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns the number of graph nodes visited.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return 0
    order = topo_order(loss)
    adj: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = pg
    return len(order)


# elementwise -----------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    out = xd**p

    def bw(g):
        if p == 2:
            return (g * 2 * xd,)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * xd ** (p - 1)
        return (np.where(np.isfinite(d), g * d, 0).astype(xd.dtype),)

    return Tensor._make(out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._make(out, (x,), lambda g: (g * 0.5 / out,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # numerically stable for both signs
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1 - s),))


def swish(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid_np(xd)
    return Tensor._make(xd * s, (x,), lambda g: (g * (s * (1 + xd * (1 - s))),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._make(out, (x,), lambda g: (g * (1 - out * out),))


def absolute(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)
    return Tensor._make(np.abs(x.data), (x,), lambda g: (g * sgn,))


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; adjoint passes only where the input is strictly inside."""
    xd = x.data
    out = np.clip(xd, lo, hi)
    mask = np.ones(xd.shape, dtype=bool)
    if lo is not None:
        mask &= xd > lo
    if hi is not None:
        mask &= xd < hi
    return Tensor._make(out, (x,), lambda g: (g * mask,))


def maximum(x: Tensor, floor: float) -> Tensor:
    return clamp(x, lo=floor)


# reductions / shape ------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return Tensor._make(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(idx)

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(x.data[idx], (x,), bw)


def take(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis; repeated indices accumulate their adjoints."""
    indices = np.asarray(indices)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return Tensor._make(np.take(x.data, indices, axis=axis), (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([t.data for t in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    return Tensor._make(
        np.stack([t.data for t in xs], axis=axis),
        xs,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


def sort(x: Tensor, axis: int = -1) -> Tensor:
    """Sort along ``axis``; the adjoint is scattered back through the permutation."""
    idx = np.argsort(x.data, axis=axis, kind="stable")
    out = np.take_along_axis(x.data, idx, axis=axis)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return Tensor._make(out, (x,), bw)


def matmul(a, b) -> Tensor:
    a, b = _lift(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if bd.ndim > 1 else np.multiply.outer(g, bd)
        gb = np.swapaxes(ad, -1, -2) @ g if ad.ndim > 1 else np.multiply.outer(ad, g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(ad @ bd, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), bw)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a, b)
    return Tensor._make(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0), a.shape), _unbroadcast(np.where(mask, 0, g), b.shape)),
    )


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def ones_like(x: Tensor) -> Tensor:
    return Tensor(np.ones_like(x.data))


def parameters_to_float64(params: Iterable[Tensor]) -> None:
    for p in params:
        p.data = p.data.astype(np.float64)


def roll(x: Tensor, shift, axis) -> Tensor:
    neg = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
    return Tensor._make(np.roll(x.data, shift, axis=axis), (x,), lambda g: (np.roll(g, neg, axis=axis),))
