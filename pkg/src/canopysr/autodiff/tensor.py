"""Dense tensors with a reverse-mode gradient tape.

Every op records a node holding its parents and a closure mapping the output
gradient onto parent gradients. ``Tensor.backward`` walks the recorded nodes
once each in reverse execution order. Shapes must match exactly; the only
implicit broadcast is tensor-with-Python-scalar. Use :func:`expand` to
broadcast explicitly.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from canopysr.errors import DimensionError, UsageError

_counter = itertools.count()
_grad_enabled = True

_GELU_C = float(np.sqrt(2.0 / np.pi))


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
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
    """N-d float array with optional gradient tracking.

    Leaves created with ``requires_grad=True`` carry a same-shape ``grad``
    accumulator. Intermediate results keep a reference to the node that
    produced them and never store gradients themselves.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self.frozen = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_counter)

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._backward is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- reverse pass ----------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every tracked leaf reachable from this scalar."""
        if self.data.ndim != 0:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.tracked:
            raise UsageError("backward() called on a tensor that was not recorded on the tape")

        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(p for p in node._parents if p.tracked)
        nodes.sort(key=lambda n: n._seq, reverse=True)

        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in nodes:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.tracked:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    out = Tensor(data)
    parents = tuple(parents)
    if _grad_enabled and any(p.tracked for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# -- elementwise -----------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _record(a.data + b, (a,), lambda g: (g,))
    _same_shape("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _record(a.data - b, (a,), lambda g: (g,))
    _same_shape("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record(a.data * a.data.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    k = xd.dtype.type(0.044715)
    x2 = xd * xd
    inner = c * (xd + k * x2 * xd)
    th = np.tanh(inner)
    half = xd.dtype.type(0.5)
    out = half * xd * (1 + th)

    def backward(g):
        dinner = c * (1 + 3 * k * x2)
        return (g * (half * (1 + th) + half * xd * (1 - th * th) * dinner),)

    return _record(out, (x,), backward)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] \
            or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _record(ad @ bd, (a, b), backward)


# -- normalisation / attention --------------------------------------------------

def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layernorm: affine shapes {gamma.shape}/{beta.shape} do not match feature size {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    gd, bd = gamma.data, beta.data
    red = tuple(range(xd.ndim - 1))

    def backward(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record(xhat * gd + bd, (x, gamma, beta), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), backward)


# -- layout ------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc
    src = x.shape
    return _record(out, (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    nd = tensors[0].ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"concat: axis {axis} out of range for {nd}-d tensors")
    axis %= nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != axis):
            raise DimensionError(
                f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def _check_index(shape, idx) -> None:
    items = idx if isinstance(idx, tuple) else (idx,)
    if len([i for i in items if i is not Ellipsis and i is not None]) > len(shape):
        raise DimensionError(f"slice: too many indices for shape {shape}")
    for dim, item in zip(shape, items):
        if isinstance(item, (int, np.integer)) and not -dim <= item < dim:
            raise DimensionError(f"slice: index {item} out of range for axis of size {dim}")
        if not isinstance(item, (int, np.integer, slice)) and item is not Ellipsis:
            raise DimensionError(f"slice: only basic indexing is supported, got {item!r}")


def slice_(x: Tensor, idx) -> Tensor:
    """Basic (view) indexing with scatter-back gradient."""
    _check_index(x.shape, idx)
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _record(x.data[idx], (x,), backward)


def expand(x: Tensor, shape) -> Tensor:
    """Explicit broadcast to ``shape``; the gradient sums over the new axes."""
    shape = tuple(int(s) for s in shape)
    lead = len(shape) - x.ndim
    if lead < 0 or any(s != 1 and s != t for s, t in zip(x.shape, shape[lead:])):
        raise DimensionError(f"expand: cannot broadcast {x.shape} to {shape}")
    src = x.shape

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _record(np.broadcast_to(x.data, shape).copy(), (x,), backward)


# -- reductions ----------------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference, a scalar."""
    _same_shape("mse", a, b)
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        ga = g * diff * diff.dtype.type(2.0 / n)
        return ga, -ga

    return _record(np.asarray((diff * diff).mean()), (a, b), backward)
