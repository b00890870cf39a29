"""Dense multi-dimensional arrays with reverse-mode differentiation.

A :class:`Tensor` wraps a row-major numpy array plus an implicit tape: every
primitive records its parents and a vector-Jacobian closure on the result
node when (and only when) some input requires gradients, so inference runs
at plain numpy speed.  ``backward`` replays the recorded graph in reverse
topological order exactly once; calling it again on the same root without
rebuilding the graph is an error.

Gradients are checked against :func:`finite_diff_gradient`, the independent
central-difference oracle, in the test suite.  Tensors are treated as
immutable once created; a recorded graph is owned by a single logical
thread between forward and backward.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special as _special

from .errors import NumericError, ShapeError

Axis = int | tuple[int, ...] | None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Row-major dense array node of the autodiff graph."""

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_vjp", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._backward_done = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray | None:
        """Accumulated gradient.

        A leaf that requires gradients but was never reached by ``backward``
        (disconnected from the root) reads as all zeros rather than erroring.
        """
        if self._grad is None and self.requires_grad:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing -------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = g.astype(self.data.dtype, copy=True)
        else:
            self._grad = self._grad + g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Requires a scalar root.  The graph is traversed in reverse
        topological order, visiting each node once; a second call on the
        same root raises because its tape has already been consumed.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar root, got shape {self.shape}")
        if self._backward_done:
            raise RuntimeError("backward already ran for this root; rebuild the graph first")
        self._backward_done = True

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
                if id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._vjp is None or node._grad is None:
                continue
            grads = node._vjp(node._grad)
            for parent, g in zip(node._parents, grads):
                if g is not None and parent.requires_grad:
                    parent._accumulate(g)
            if node is not self:
                node._grad = None if node._parents else node._grad

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis: Axis = None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def max(self, axis: Axis = None, keepdims: bool = False):
        return tmax(self, axis, keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad=requires_grad)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


# -- elementwise binary -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first operand."""
    a, b = tensor(a), tensor(b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to the first operand."""
    a, b = tensor(a), tensor(b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


# -- elementwise unary --------------------------------------------------------


def neg(x) -> Tensor:
    x = tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def erf(x) -> Tensor:
    x = tensor(x)
    out = _special.erf(x.data)
    c = 2.0 / math.sqrt(math.pi)
    return _make(out, (x,), lambda g: (g * c * np.exp(-x.data * x.data),))


def softplus(x) -> Tensor:
    """log(1 + exp(x)), computed without overflow for large |x|."""
    x = tensor(x)
    out = np.logaddexp(0.0, x.data)
    return _make(out, (x,), lambda g: (g * _special.expit(x.data),))


def relu(x) -> Tensor:
    x = tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


# -- reductions ---------------------------------------------------------------


def tsum(x, axis: Axis = None, keepdims: bool = False) -> Tensor:
    x = tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _make(out, (x,), vjp)


def mean(x, axis: Axis = None, keepdims: bool = False) -> Tensor:
    x = tensor(x)
    if axis is None:
        n = x.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.shape[a] for a in axis]))
    else:
        n = x.shape[axis]
    return div(tsum(x, axis, keepdims), float(n))


def tmax(x, axis: Axis = None, keepdims: bool = False) -> Tensor:
    """Max reduction; ties share the incoming gradient equally."""
    x = tensor(x)
    out = x.data.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            full = out
            gg = g
        else:
            full = x.data.max(axis=axis, keepdims=True)
            gg = g if keepdims else np.expand_dims(g, axis)
        mask = x.data == full
        counts = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
        return (mask * gg / counts,)

    return _make(out, (x,), vjp)


# -- shape manipulation -------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = tensor(x)
    shape = tuple(shape)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def take(x, idx) -> Tensor:
    """Numpy basic or integer-array indexing with gradient scatter-add."""
    x = tensor(x)
    out = x.data[idx]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.array(out, copy=True), (x,), vjp)


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(parts), vjp)


def pad2d(x, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the two leading (spatial) axes of an h x w x c tensor."""
    x = tensor(x)
    widths = ((top, bottom), (left, right)) + ((0, 0),) * (x.ndim - 2)
    out = np.pad(x.data, widths)
    h, w = x.shape[0], x.shape[1]

    def vjp(g):
        return (g[top : top + h, left : left + w],)

    return _make(out, (x,), vjp)


def roll2d(x, shift_y: int, shift_x: int) -> Tensor:
    """Cyclic shift of the two leading axes (positive = toward higher index)."""
    x = tensor(x)
    out = np.roll(x.data, (shift_y, shift_x), axis=(0, 1))

    def vjp(g):
        return (np.roll(g, (-shift_y, -shift_x), axis=(0, 1)),)

    return _make(out, (x,), vjp)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product on the trailing two axes, with stacked leading axes."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents disagree for shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(out, (a, b), vjp)


# -- composite primitives used by the backbone --------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along `axis`, stabilized by subtracting the (detached) max.

    The subtracted max is a constant of the graph; this leaves both the
    value and the gradient of the softmax mathematically unchanged.
    """
    x = tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite input")
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    e = exp(sub(x, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    x, gain, bias = tensor(x), tensor(gain), tensor(bias)
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    normed = div(xc, sqrt(add(var, eps)))
    return add(mul(normed, gain), bias)


def gelu(x) -> Tensor:
    """Gaussian error linear unit in its exact erf form: x * Phi(x).

    The erf form (rather than the tanh approximation) is used so that the
    finite-difference oracle has a single well-defined target.
    """
    x = tensor(x)
    return mul(mul(x, 0.5), add(erf(div(x, math.sqrt(2.0))), 1.0))


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale vectors along `axis` to unit Euclidean norm (eps guards zeros)."""
    x = tensor(x)
    sq = tsum(mul(x, x), axis=axis, keepdims=True)
    return div(x, sqrt(add(sq, eps)))


# -- independent gradient oracle ----------------------------------------------


def finite_diff_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Deliberately independent of the tape machinery so it can act as the
    oracle for ``backward``.
    """
    if h <= 0:
        raise ValueError("finite_diff_gradient: h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"finite_diff_gradient: non-finite value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
