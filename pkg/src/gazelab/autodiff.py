"""
Minimal reverse-mode automatic differentiation on dense float64 arrays.

Every primitive returns a new :class:`Tensor`. When any input requires a
gradient the output keeps a reference to its parents and a closure that maps
the output gradient to the input gradients. :meth:`Tensor.backward` walks the
recorded graph in reverse topological order.

There is no global state: a graph belongs to the tensors that form it, so
independent graphs can be built and differentiated on separate threads.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericError

ACOS_CLAMP = 1e-7

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    """Dense n-dimensional array that can take part in a gradient tape.

    Leaves created with ``requires_grad=True`` start with a zero gradient
    buffer, so a leaf that the loss never reaches still reads as zero after
    :meth:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to the reflected Tensor operator

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(self.data) if self.requires_grad else None
        )
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
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
        return neg(self)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- differentiation --------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise DimensionError(
                    f"backward: seed gradient shape {grad.shape} != tensor shape {self.shape}"
                )
        order = topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` with every node after all of its inputs."""
    order, seen = [], set()
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward: Callable, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.op = op
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ----------------------------------------------
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _make(out, (a, b), backward, "div")


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),)

    return _make(out, (a,), backward, "sqrt")


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _make(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def clamp(a: ArrayLike, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient passes only where the value was inside."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(out, (a,), lambda g: (g * inside,), "clamp")


def acos(a: ArrayLike, delta: float = ACOS_CLAMP) -> Tensor:
    """Arc-cosine with the argument clamped to ``[-1 + delta, 1 - delta]``.

    The clamp keeps both the value and the derivative finite for any real input.
    """
    c = clamp(a, -1.0 + delta, 1.0 - delta)
    out = np.arccos(c.data)
    return _make(out, (c,), lambda g: (-g / np.sqrt(1.0 - c.data * c.data),), "acos")


def asin(a: ArrayLike, delta: float = ACOS_CLAMP) -> Tensor:
    c = clamp(a, -1.0 + delta, 1.0 - delta)
    out = np.arcsin(c.data)
    return _make(out, (c,), lambda g: (g / np.sqrt(1.0 - c.data * c.data),), "asin")


def atan2(y: ArrayLike, x: ArrayLike) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    _broadcast_shape("atan2", y, x)
    r2 = y.data * y.data + x.data * x.data
    safe = np.where(r2 > 0, r2, 1.0)

    def backward(g):
        return (
            _unbroadcast(g * x.data / safe, y.shape),
            _unbroadcast(-g * y.data / safe, x.shape),
        )

    return _make(np.arctan2(y.data, x.data), (y, x), backward, "atan2")


def where(mask: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Masked select: ``a`` where ``mask`` is true, ``b`` elsewhere."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    try:
        shape = np.broadcast_shapes(mask.shape, a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"where: incompatible shapes mask {mask.shape}, {a.shape} and {b.shape}"
        ) from None
    m = np.broadcast_to(mask, shape)

    def backward(g):
        return (
            _unbroadcast(np.where(m, g, 0.0), a.shape),
            _unbroadcast(np.where(m, 0.0, g), b.shape),
        )

    return _make(np.where(m, a.data, b.data), (a, b), backward, "where")


def masked_assign(a: ArrayLike, mask: np.ndarray, values: ArrayLike) -> Tensor:
    """Copy of ``a`` with the masked positions replaced by ``values``."""
    return where(mask, values, a)


# -- reductions and shape ops ---------------------------------------------
def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), backward, "sum")


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a: ArrayLike, shape: tuple) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(i is Ellipsis or isinstance(i, (int, slice, np.integer)) for i in idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), backward, "getitem")


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}"
        ) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, ts, backward, "concat")


# -- linear algebra -------------------------------------------------------
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def dot(a: ArrayLike, b: ArrayLike, axis: int = -1) -> Tensor:
    """Inner product along ``axis`` (batched when inputs have leading dims)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"dot: incompatible shapes {a.shape} and {b.shape}")
    return tsum(a * b, axis=axis)


def norm(a: ArrayLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``."""
    return sqrt(tsum(square(a), axis=axis, keepdims=keepdims))


def conv2d(x: ArrayLike, w: ArrayLike, b: Optional[ArrayLike] = None) -> Tensor:
    """Direct 2-D cross-correlation, stride 1, no padding.

    ``x`` is (B, C, H, W), ``w`` is (O, C, kh, kw), ``b`` is (O,).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    if kh > H or kw > W:
        raise DimensionError(f"conv2d: kernel {w.shape} larger than input {x.shape}")
    Ho, Wo = H - kh + 1, W - kw + 1
    # (B, C, Ho, Wo, kh, kw) -> (B, Ho, Wo, C*kh*kw)
    cols = sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho, Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = (cols @ wmat.T).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise DimensionError(f"conv2d: bias shape {b.shape} does not match {O} filters")
        out = out + b.data[None, :, None, None]
        parents.append(b)
    out = np.ascontiguousarray(out)

    def backward(g):
        gw = gx = gb = None
        if w.requires_grad:
            gt = g.transpose(0, 2, 3, 1).reshape(-1, O)
            gw = (gt.T @ cols.reshape(-1, C * kh * kw)).reshape(w.shape)
        if x.requires_grad:
            # one GEMM for every kernel tap, then shift-and-add
            taps = np.tensordot(wmat, g, axes=([0], [1])).reshape(C, kh, kw, B, Ho, Wo)
            acc = np.zeros((C, B, H, W))
            for i in range(kh):
                for j in range(kw):
                    acc[:, :, i:i + Ho, j:j + Wo] += taps[:, i, j]
            gx = acc.transpose(1, 0, 2, 3)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    return _make(out, parents, backward, "conv2d")


def avg_pool2d(x: ArrayLike, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling over the last two axes."""
    x = as_tensor(x)
    H, W = x.shape[-2:]
    if H % k or W % k:
        raise DimensionError(f"avg_pool2d: spatial shape {(H, W)} not divisible by {k}")
    out = np.zeros(x.shape[:-2] + (H // k, W // k))
    for i in range(k):
        for j in range(k):
            out += x.data[..., i::k, j::k]
    out /= k * k

    def backward(g):
        full = np.empty(x.shape)
        share = g / (k * k)
        for i in range(k):
            for j in range(k):
                full[..., i::k, j::k] = share
        return (full,)

    return _make(out, (x,), backward, "avg_pool2d")


# -- gradient checking ------------------------------------------------------
def finite_diff_check(
    f: Callable[[Tensor], Tensor], x: ArrayLike, step: float = 1e-5
) -> float:
    """Largest relative disagreement between backprop and central differences.

    For every coordinate i the relative error is
    ``|analytic_i - numeric_i| / (|analytic_i| + |numeric_i| + 1e-12)``.
    """
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ContractError(f"finite_diff_check: f must return a scalar, got {out.shape}")
    if not np.all(np.isfinite(out.data)):
        raise NumericError("finite_diff_check: f(x) is not finite")
    out.backward()
    analytic = leaf.grad
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    probe = x0.copy()
    pflat = probe.reshape(-1)
    for i in range(pflat.size):
        orig = pflat[i]
        pflat[i] = orig + step
        hi = f(Tensor(probe)).data.item()
        pflat[i] = orig - step
        lo = f(Tensor(probe)).data.item()
        pflat[i] = orig
        flat[i] = (hi - lo) / (2.0 * step)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        raise NumericError("finite_diff_check: non-finite gradient encountered")
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(rel.max()) if rel.size else 0.0
