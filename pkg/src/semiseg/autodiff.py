"""Minimal reverse-mode automatic differentiation over numpy arrays.

Supports exactly the operations the segmentation stack needs: elementwise
arithmetic with broadcasting, matmul, reductions, relu/exp/log/sqrt,
channel softmax, same-padding convolution, max pooling, nearest-neighbor
upsampling and channel concatenation. Image batches use NCHW layout.

Gradients are accumulated into ``Tensor.grad`` by ``Tensor.backward()``.
The graph is built eagerly; wrap inference code in ``no_grad()`` to skip
graph construction entirely.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the context (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus the closure needed to backpropagate through it."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False,
                 parents: tuple = (), backward: Callable | None = None):
        self.value = np.asarray(value)
        if not np.issubdtype(self.value.dtype, np.floating):
            self.value = self.value.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad and _grad_enabled
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def item(self) -> float:
        return float(self.value)

    # -- autodiff core -------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor to every reachable leaf."""
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.value)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.value.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def sqrt(self):
        return sqrt(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap operands, casting bare python scalars to the partner's dtype.

    Keeps float32 graphs float32 when mixed with literals like 2.0.
    """
    if isinstance(a, Tensor) and not isinstance(b, (Tensor, np.ndarray)):
        return a, Tensor(np.asarray(b, dtype=a.value.dtype))
    if isinstance(b, Tensor) and not isinstance(a, (Tensor, np.ndarray)):
        return Tensor(np.asarray(a, dtype=b.value.dtype)), b
    return as_tensor(a), as_tensor(b)


def _sum_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Invert numpy broadcasting: reduce grad back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(value, parents: Iterable[Tensor], backward: Callable) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=req,
                  parents=tuple(p for p in parents if p.requires_grad),
                  backward=backward if req else None)


# -- elementwise & linear algebra ---------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_val = a.value + b.value

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g, b.value.shape))

    return _make(out_val, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_val = a.value - b.value

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(-g, b.value.shape))

    return _make(out_val, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_val = a.value * b.value

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g * b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g * a.value, b.value.shape))

    return _make(out_val, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_val = a.value / b.value

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g / b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(-g * a.value / (b.value * b.value),
                                        b.value.shape))

    return _make(out_val, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    e = float(exponent)
    out_val = a.value ** e

    def backward(g):
        a._accumulate(g * e * a.value ** (e - 1.0))

    return _make(out_val, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_val = a.value @ b.value

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    return _make(out_val, (a, b), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_val = np.exp(a.value)

    def backward(g):
        a._accumulate(g * out_val)

    return _make(out_val, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_val = np.log(a.value)

    def backward(g):
        a._accumulate(g / a.value)

    return _make(out_val, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_val = np.sqrt(a.value)

    def backward(g):
        a._accumulate(g * 0.5 / out_val)

    return _make(out_val, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    out_val = np.where(mask, a.value, 0.0).astype(a.value.dtype)

    def backward(g):
        a._accumulate(g * mask)

    return _make(out_val, (a,), backward)


# -- shape manipulation --------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old_shape = a.value.shape
    out_val = a.value.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(old_shape))

    return _make(out_val, (a,), backward)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_val = a.value.transpose(axes)

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _make(out_val, (a,), backward)


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.value.shape[axis] for t in ts]
    out_val = np.concatenate([t.value for t in ts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(out_val, ts, backward)


# -- reductions ----------------------------------------------------------


def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.value.ndim)
    out_val = a.value.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            shape = list(a.value.shape)
            for ax in axes:
                shape[ax] = 1
            g = g.reshape(shape)
        a._accumulate(np.broadcast_to(g, a.value.shape).astype(a.value.dtype))

    return _make(out_val, (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.value.ndim)
    count = float(np.prod([a.value.shape[ax] for ax in axes]))
    return mul(reduce_sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


# -- neural-network primitives -------------------------------------------


def softmax(a, axis: int = 1) -> Tensor:
    """Numerically stable softmax along `axis`."""
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_val = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_val).sum(axis=axis, keepdims=True)
        a._accumulate(out_val * (g - dot))

    return _make(out_val, (a,), backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, out_h: int, out_w: int) -> np.ndarray:
    """View a padded NCHW array as (C*kh*kw, N*out_h*out_w) patch columns."""
    n, c, _, _ = xp.shape
    s = xp.strides
    windows = as_strided(
        xp, (n, c, kh, kw, out_h, out_w), (s[0], s[1], s[2], s[3], s[2], s[3])
    )
    return windows.transpose(1, 2, 3, 0, 4, 5).reshape(c * kh * kw, n * out_h * out_w)


def conv2d(x, weight, bias=None, padding: int | None = None) -> Tensor:
    """Stride-1 2-D convolution (cross-correlation) with zero padding.

    x: (N, C, H, W); weight: (F, C, kh, kw); bias: (F,) or None.
    Default padding keeps the spatial size ("same" for odd kernels).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias_t = as_tensor(bias) if bias is not None else None
    n, c, h, w = x.value.shape
    f, c2, kh, kw = weight.value.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {c2}")
    p = kh // 2 if padding is None else padding
    xp = np.pad(x.value, ((0, 0), (0, 0), (p, p), (p, p)))
    out_h, out_w = h + 2 * p - kh + 1, w + 2 * p - kw + 1
    cols = _im2col(xp, kh, kw, out_h, out_w)
    w2d = weight.value.reshape(f, -1)
    out = (w2d @ cols).reshape(f, n, out_h, out_w).transpose(1, 0, 2, 3)
    if bias_t is not None:
        out = out + bias_t.value.reshape(1, f, 1, 1)

    def backward(g):
        go = g.transpose(1, 0, 2, 3).reshape(f, -1)
        if weight.requires_grad:
            weight._accumulate((go @ cols.T).reshape(weight.value.shape))
        if bias_t is not None and bias_t.requires_grad:
            bias_t._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = (w2d.T @ go).reshape(c, kh, kw, n, out_h, out_w)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + out_h, j:j + out_w] += gcols[:, i, j].transpose(1, 0, 2, 3)
            x._accumulate(gxp[:, :, p:p + h, p:p + w] if p else gxp)

    parents = (x, weight) if bias_t is None else (x, weight, bias_t)
    return _make(np.ascontiguousarray(out), parents, backward)


def maxpool2d(x, kernel, stride: int | None = None, padding=0) -> Tensor:
    """Max pooling on NCHW input; `kernel`/`padding` may be ints or (h, w)
    pairs (rectangular kernels make large square pools separable).

    Padded cells never win. Ties go to the first window cell in row-major
    order, so gradient routing is deterministic.
    """
    x = as_tensor(x)
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    stride = stride or max(kh, kw)
    n, c, h, w = x.value.shape
    if ph or pw:
        fill = np.finfo(x.value.dtype).min
        xp = np.pad(x.value, ((0, 0), (0, 0), (ph, ph), (pw, pw)),
                    constant_values=fill)
    else:
        xp = x.value
    hp, wp = xp.shape[2], xp.shape[3]
    out_h = (hp - kh) // stride + 1
    out_w = (wp - kw) // stride + 1

    best: np.ndarray | None = None
    best_idx: np.ndarray | None = None  # flat (row*wp + col) into padded plane
    base = ((np.arange(out_h) * stride)[:, None] * wp
            + (np.arange(out_w) * stride)[None, :]).astype(np.int64)
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, :, u:u + stride * out_h:stride, v:v + stride * out_w:stride]
            if best is None:
                best = sl.copy()
                best_idx = np.broadcast_to(base + (u * wp + v),
                                           best.shape).copy()
            else:
                upd = sl > best
                np.copyto(best, sl, where=upd)
                np.copyto(best_idx, base + (u * wp + v), where=upd)
    out_val = best

    def backward(g):
        plane = hp * wp
        offsets = (np.arange(n * c) * plane).reshape(n, c, 1, 1)
        flat = np.bincount((best_idx + offsets).ravel(),
                           weights=g.ravel().astype(np.float64),
                           minlength=n * c * plane)
        gxp = flat.reshape(n, c, hp, wp).astype(g.dtype)
        if ph or pw:
            gxp = gxp[:, :, ph:ph + h, pw:pw + w]
        x._accumulate(gxp)

    return _make(out_val, (x,), backward)


def maxpool2d_same(x, radius: int) -> Tensor:
    """Stride-1 square max pool of kernel 2*radius+1 that keeps the spatial
    size, computed as two separable rectangular pools."""
    out = maxpool2d(x, kernel=(2 * radius + 1, 1), stride=1, padding=(radius, 0))
    return maxpool2d(out, kernel=(1, 2 * radius + 1), stride=1, padding=(0, radius))


def upsample_nearest2x(x) -> Tensor:
    """Double both spatial dimensions by pixel replication."""
    x = as_tensor(x)
    n, c, h, w = x.value.shape
    out_val = np.repeat(np.repeat(x.value, 2, axis=2), 2, axis=3)

    def backward(g):
        x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(out_val, (x,), backward)
