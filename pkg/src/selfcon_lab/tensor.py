"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the handful of operations needed by the encoders, contrastive losses and
MI critics are provided. Every op records its parents and a closure that maps
the output gradient to parent gradients; :meth:`Tensor.backward` walks the
graph in reverse topological order and accumulates (``+=``) into each
requires-grad node, so a tensor reached along several paths receives the sum
of all path contributions.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NormalizationError",
    "GraphError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "matmul",
    "transpose",
    "reshape",
    "add",
    "mul",
    "relu",
    "exp",
    "log",
    "tsum",
    "mean",
    "l2_normalize",
    "inner_product",
    "log_sum_exp",
    "softmax_cross_entropy",
    "take_rows",
    "concat",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NormalizationError(ValueError):
    """A row with zero Euclidean norm was passed to :func:`l2_normalize`."""

    def __init__(self, row: int):
        super().__init__(f"cannot normalize row {row}: zero norm")
        self.row = row


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (e.g. backward from a non-scalar)."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation passes)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Same values, no graph linkage, never receives gradient."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)

    # -- backward ------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(node) into every requires-grad node of the graph."""
        if self.data.size != 1 or self.ndim > 1:
            raise GraphError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward() root is not linked to any requires-grad tensor")

        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                # grads are never updated in place, so sharing g is safe
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
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


def _topological(root: Tensor) -> list[Tensor]:
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


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Iterable[Tensor], op: str, backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), "add", lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a Python scalar or constant array."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=np.float64)
        out = a.data * c
        sa = a.shape
        return _make(out, (a,), "mul", lambda g: (_unbroadcast(g * c, sa),))
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    ad, bd, sa, sb = a.data, b.data, a.shape, b.shape
    return _make(
        out, (a, b), "mul",
        lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)),
    )


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    out = np.maximum(x.data, 0.0)
    return _make(out, (x,), "relu", lambda g: (g * (out > 0),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), "log", lambda g: (g / xd,))


# -- shape ---------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), "matmul", lambda g: (g @ bd.T, ad.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {x.shape}")
    return _make(x.data.T.copy(), (x,), "transpose", lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc
    return _make(out, (x,), "reshape", lambda g: (g.reshape(src),))


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]``; repeated indices accumulate on backward."""
    idx = np.asarray(index, dtype=np.intp)
    src = x.shape

    def back(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), "take_rows", back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, "concat", lambda g: tuple(np.split(g, bounds, axis=axis)))


# -- reductions ----------------------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    src = x.shape
    out = np.asarray(x.data.sum(axis=axis))

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make(out, (x,), "sum", back)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each row of a matrix to unit Euclidean norm."""
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize needs a matrix, got {x.shape}")
    norms = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    zero = np.flatnonzero(norms[:, 0] == 0.0)
    if zero.size:
        raise NormalizationError(int(zero[0]))
    y = x.data / norms

    def back(g):
        # d(x/|x|) = (g - y (y.g)) / |x|
        return ((g - y * np.sum(y * g, axis=1, keepdims=True)) / norms,)

    return _make(y, (x,), "l2_normalize", back)


def inner_product(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"inner_product needs equal-length vectors, got {a.shape} and {b.shape}")
    return tsum(mul(a, b))


def log_sum_exp(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Max-shifted ``log(sum(exp(x)))`` along ``axis``.

    ``mask`` (boolean, same shape as ``x``) restricts the sum to selected
    entries; a slice with no selected entries yields ``-inf``.
    """
    xd = x.data
    if mask is None:
        m = np.max(xd, axis=axis, keepdims=True)
        e = np.exp(xd - m)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != xd.shape:
            raise ShapeError(f"mask shape {mask.shape} != input shape {xd.shape}")
        m = np.max(np.where(mask, xd, -np.inf), axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(np.where(mask, xd - m, 0.0)), 0.0)
    s = np.sum(e, axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out_k = m + np.log(s)
    out = np.squeeze(out_k, axis=axis)

    def back(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            soft = np.where(s > 0, e / s, 0.0)
        return (np.expand_dims(g, axis) * soft,)

    return _make(out, (x,), "log_sum_exp", back)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} incompatible with labels {labels.shape}")
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(z.shape[0])
    lse = (m + np.log(s))[:, 0]
    n = z.shape[0]
    out = np.asarray(np.mean(lse - z[rows, labels]))

    def back(g):
        d = e / s
        d[rows, labels] -= 1.0
        return (g * d / n,)

    return _make(out, (logits,), "softmax_cross_entropy", back)
