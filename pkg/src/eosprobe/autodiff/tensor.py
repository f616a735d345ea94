"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every backward rule is written in terms of the same recorded operations, so
differentiating a gradient (``create_graph=True``) yields exact second-order
quantities such as Hessian-vector products.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


class _NoRecord:
    def __enter__(self):
        self._prev = _recording()
        _state.recording = False

    def __exit__(self, *exc):
        _state.recording = self._prev


def no_record() -> _NoRecord:
    """Context manager that disables graph construction on this thread."""
    return _NoRecord()


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    lead = len(g.shape) - len(shape)
    axes = list(range(lead))
    for i, n in enumerate(shape):
        if n == 1 and g.shape[lead + i] != 1:
            axes.append(lead + i)
    out = sum_(g, tuple(axes)) if axes else g
    return reshape(out, shape)


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (neg(g),))


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        ga = _sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = _sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def tanh(a: Tensor) -> Tensor:
    def backward(g):
        return (mul(g, add(Tensor(1.0), neg(mul(out, out)))),)

    out = _make(np.tanh(a.data), (a,), backward)
    return out


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at the fold; the mask is a constant so second derivatives vanish
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g: (mul(g, Tensor(mask)),))


def exp(a: Tensor) -> Tensor:
    def backward(g):
        return (mul(g, out),)

    out = _make(np.exp(a.data), (a,), backward)
    return out


# -- linear algebra and shape ------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")

    def backward(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (transpose(g, inverse),),
    )


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, src),))


def sum_(a: Tensor, axis=None) -> Tensor:
    src = a.shape
    if axis is None:
        axis = tuple(range(a.data.ndim))
    elif isinstance(axis, int):
        axis = (axis,)
    axis = tuple(ax % len(src) for ax in axis)
    kept = tuple(1 if i in axis else n for i, n in enumerate(src))

    def backward(g):
        return (broadcast_to(reshape(g, kept), src),)

    return _make(a.data.sum(axis=axis), (a,), backward)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _make(
        np.broadcast_to(a.data, shape).copy(),
        (a,),
        lambda g: (_sum_to(g, src),),
    )


def pairwise_sum(a: Tensor) -> Tensor:
    """Sum a 1-D tensor by a fixed binary tree over index order."""
    if a.data.ndim != 1 or a.size == 0:
        raise ValueError("pairwise_sum expects a nonempty 1-D tensor")
    n = a.size
    return _make(
        np.asarray(tree_sum(a.data)),
        (a,),
        lambda g: (broadcast_to(g, (n,)),),
    )


def tree_sum(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    while x.size > 1:
        if x.size % 2:
            x = np.concatenate([x[:-1:2] + x[1::2], x[-1:]])
        else:
            x = x[0::2] + x[1::2]
    return float(x[0])


def slice_flat(a: Tensor, start: int, stop: int, shape: tuple[int, ...]) -> Tensor:
    """View ``a[start:stop]`` of a 1-D tensor as ``shape``."""
    n = a.size
    return _make(
        a.data[start:stop].reshape(shape),
        (a,),
        lambda g: (pad_flat(g, start, n),),
    )


def pad_flat(g: Tensor, start: int, n: int) -> Tensor:
    """Adjoint of :func:`slice_flat`: embed ``g`` into zeros of length ``n``."""
    out = np.zeros(n)
    stop = start + g.size
    out[start:stop] = g.data.reshape(-1)
    shape = g.shape
    return _make(out, (g,), lambda h: (slice_flat(h, start, stop, shape),))


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``a.ravel()[index]``; output has ``index.shape``."""
    src = a.shape
    return _make(
        a.data.reshape(-1)[index],
        (a,),
        lambda g: (scatter_add(g, index, src),),
    )


def scatter_add(g: Tensor, index: np.ndarray, shape: tuple[int, ...]) -> Tensor:
    """Adjoint of :func:`take`."""
    size = int(np.prod(shape))
    out = np.bincount(index.reshape(-1), weights=g.data.reshape(-1), minlength=size)
    return _make(out.reshape(shape), (g,), lambda h: (take(h, index),))


def logsumexp_rows(a: Tensor) -> Tensor:
    """Row-wise log-sum-exp of a 2-D tensor, max-shifted for stability."""
    x = a.data
    m = x.max(axis=1, keepdims=True)
    val = np.log(np.exp(x - m).sum(axis=1)) + m[:, 0]
    n, c = x.shape

    def backward(g):
        # softmax = exp(x - lse), kept differentiable for second-order passes
        lse = broadcast_to(reshape(out, (n, 1)), (n, c))
        probs = exp(add(a, neg(lse)))
        return (mul(broadcast_to(reshape(g, (n, 1)), (n, c)), probs),)

    out = _make(val, (a,), backward)
    return out


def im2col(x: Tensor, k: int, stride: int) -> Tensor:
    """Unfold (N, C, H, W) into patch rows of shape (N*oh*ow, C*k*k)."""
    n, c, h, w = x.shape
    oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * k * k)
    return _make(cols, (x,), lambda g: (col2im(g, x.shape, k, stride),))


def col2im(cols: Tensor, shape: tuple[int, ...], k: int, stride: int) -> Tensor:
    """Adjoint of :func:`im2col`; overlapping patches are summed."""
    n, c, h, w = shape
    oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
    blocks = cols.data.reshape(n, oh, ow, c, k, k)
    out = np.zeros(shape)
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + stride * oh:stride, dj:dj + stride * ow:stride] += (
                blocks[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            )
    return _make(out, (cols,), lambda g: (im2col(g, k, stride),))


# -- reverse pass ------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    grad_output: Tensor | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of ``output`` with respect to each of ``inputs``.

    With ``create_graph`` the returned tensors are themselves differentiable.
    Inputs the output does not depend on receive zeros.
    """
    if grad_output is None:
        grad_output = Tensor(np.ones_like(output.data))
    grads: dict[int, Tensor] = {}
    if output.requires_grad:
        grads[id(output)] = grad_output
        prev = _recording()
        _state.recording = create_graph
        try:
            for node in reversed(_topo(output)):
                g = grads.get(id(node))
                if g is None or node._backward is None:
                    continue
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = pg if key not in grads else add(grads[key], pg)
        finally:
            _state.recording = prev
    result = []
    for x in inputs:
        g = grads.get(id(x))
        result.append(g if g is not None else Tensor(np.zeros_like(x.data)))
    return result
