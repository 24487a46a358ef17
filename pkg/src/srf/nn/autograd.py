"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A `Tensor` wraps an ndarray; operations record a graph of closures that
`backward()` replays in reverse topological order from a scalar root.
Only the ops the model family needs are provided.  Everything runs in
float64; there is no broadcasting surprise beyond numpy's own rules
(gradients are un-broadcast back to the operand shapes).

Determinism notes: all computation is plain single-threaded-deterministic
numpy.  Matrix products route single-row left operands through a two-row
product and slice the result, because the BLAS matrix-vector path is not
bitwise consistent with the matrix-matrix path; this makes batched
evaluation independent of batch size at the bit level.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from ..errors import NonScalarBackward, NoRecordedGraph

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the context (inference/validation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Single-row products take BLAS's gemv path, which is not bitwise equal
    # to the gemm path used for taller operands; lift to two rows instead.
    if a.shape[0] == 1:
        return (np.concatenate([a, a], axis=0) @ b)[:1]
    return a @ b


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    # --- bookkeeping -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def backward(self):
        if self.size != 1:
            raise NonScalarBackward(
                f"backward needs a scalar root, got shape {self.shape}")
        if self._backward_fn is None and not self._parents:
            raise NoRecordedGraph("tensor has no recorded operations")
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
                if id(p) not in seen and p._parents:
                    stack.append((p, False))
                elif id(p) not in seen and p.requires_grad:
                    seen.add(id(p))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _grad_to(p: Tensor, delta: np.ndarray):
    if p.requires_grad:
        p._accumulate(_unbroadcast(delta, p.data.shape))


# --- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _grad_to(a, g)
        _grad_to(b, g)
    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _grad_to(a, g)
        _grad_to(b, -g)
    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _grad_to(a, g * b.data)
        _grad_to(b, g * a.data)
    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _grad_to(a, g / b.data)
        _grad_to(b, -g * a.data / (b.data * b.data))
    return _make(a.data / b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _grad_to(a, -g)
    return _make(-a.data, (a,), backward)


def pow_(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def backward(g):
        _grad_to(a, g * exponent * a.data ** (exponent - 1.0))
    return _make(a.data ** exponent, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2D operands")

    def backward(g):
        _grad_to(a, _mm(g, b.data.T))
        _grad_to(b, _mm(a.data.T, g))
    return _make(_mm(a.data, b.data), (a, b), backward)


# --- elementwise functions ------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        _grad_to(a, g * out)
    return _make(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _grad_to(a, g / a.data)
    return _make(np.log(a.data), (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        _grad_to(a, g * 0.5 / out)
    return _make(out, (a,), backward)


def abs_(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _grad_to(a, g * np.sign(a.data))
    return _make(np.abs(a.data), (a,), backward)


def sin(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _grad_to(a, g * np.cos(a.data))
    return _make(np.sin(a.data), (a,), backward)


def cos(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _grad_to(a, -g * np.sin(a.data))
    return _make(np.cos(a.data), (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        _grad_to(a, g * (1.0 - out * out))
    return _make(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)

    def backward(g):
        _grad_to(a, g * out * (1.0 - out))
    return _make(out, (a,), backward)


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = expit(a.data)

    def backward(g):
        _grad_to(a, g * s * (1.0 + a.data * (1.0 - s)))
    return _make(a.data * s, (a,), backward)


def softplus(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _grad_to(a, g * expit(a.data))
    return _make(np.logaddexp(0.0, a.data), (a,), backward)


def clamp_gc(a, lo: float, hi: float) -> Tensor:
    """Clamp with a gradient-conserving backward: forward clips to
    [lo, hi], backward passes the gradient through unchanged."""
    a = as_tensor(a)

    def backward(g):
        _grad_to(a, g)
    return _make(np.clip(a.data, lo, hi), (a,), backward)


# --- reductions / shape ops -----------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _grad_to(a, _expand_reduced(g, a.data.shape, axis, keepdims))
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def backward(g):
        _grad_to(a, _expand_reduced(g, a.data.shape, axis, keepdims) / count)
    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _grad_to(a, g.reshape(a.data.shape))
    return _make(a.data.reshape(shape), (a,), backward)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _grad_to(a, buf)
    return _make(a.data[idx], (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _grad_to(t, piece)
    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), backward)


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _grad_to(a, np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis))
    return _make(np.cumsum(a.data, axis=axis), (a,), backward)


def norm_hist(a) -> Tensor:
    """Histogram normalization y = x / sum(x) along the last axis, with the
    quotient-rule Jacobian on the way back.  Inputs must be non-negative
    with a positive sum per row."""
    a = as_tensor(a)
    s = a.data.sum(axis=-1, keepdims=True)
    y = a.data / s

    def backward(g):
        _grad_to(a, (g - (g * y).sum(axis=-1, keepdims=True)) / s)
    return _make(y, (a,), backward)


def box_mean3(a, size: int) -> Tensor:
    """Valid-window box mean of a 3D grid: output dim = n - size + 1 per
    axis.  Used by the differentiable SSIM term."""
    a = as_tensor(a)
    nx, ny, nz = a.data.shape
    ox, oy, oz = nx - size + 1, ny - size + 1, nz - size + 1
    acc = np.zeros((ox, oy, oz))
    for dx in range(size):
        for dy in range(size):
            for dz in range(size):
                acc += a.data[dx:dx + ox, dy:dy + oy, dz:dz + oz]
    volume = float(size ** 3)

    def backward(g):
        buf = np.zeros_like(a.data)
        gs = g / volume
        for dx in range(size):
            for dy in range(size):
                for dz in range(size):
                    buf[dx:dx + ox, dy:dy + oy, dz:dz + oz] += gs
        _grad_to(a, buf)
    return _make(acc / volume, (a,), backward)


# --- operator sugar ---------------------------------------------------------

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = lambda self, other: div(self, other)
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__pow__ = lambda self, e: pow_(self, e)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.__getitem__ = lambda self, idx: getitem(self, idx)
Tensor.sum = lambda self, axis=None, keepdims=False: sum_(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: mean(self, axis, keepdims)
Tensor.reshape = lambda self, shape: reshape(self, shape)
Tensor.abs = lambda self: abs_(self)
