"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value in the model is a :class:`Tensor`.  Operations record their
inputs and a closure that pushes the output gradient back to them; calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order and accumulates gradients additively.

Arrays may carry a leading batch axis; elementwise operations broadcast and
the backward pass sums gradients back to the operand's shape.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np


class EmptyInputError(ValueError):
    """An operation that needs at least one element received none."""


class DegenerateVectorError(ValueError):
    """A direction-based quantity was requested for a zero-norm vector."""


class NonFiniteError(FloatingPointError):
    """A forward value became NaN or infinite."""


class DeterminismError(RuntimeError):
    """Two evaluations of the same function disagreed."""


_GRAD_ENABLED = True
_DEBUG = False
_DTYPE = np.float64


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


@contextlib.contextmanager
def extended_precision():
    """Build new tensors in ``np.longdouble`` inside the block.

    Only meant for the finite-difference side of :func:`grad_check`; numpy's
    type promotion carries the wider type through every op.
    """
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.longdouble
    try:
        yield
    finally:
        _DTYPE = previous


def set_debug(enabled: bool) -> None:
    """Check every forward result for NaN/Inf and fail fast when set."""
    global _DEBUG
    _DEBUG = bool(enabled)


def is_debug() -> bool:
    return _DEBUG


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers -------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        if _DEBUG and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite value produced, shape {data.shape}")
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- autodiff ---------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # intermediate gradients live here; leaves get .grad
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)


class Parameter(Tensor):
    """A named trainable tensor.  The name is assigned by its owning module."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        ),
    )


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._make(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return Tensor._make(y, (x,), lambda g: (g * 0.5 / y,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 1 or ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {ad.shape} @ {bd.shape}")
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs 2-D operands, got {ad.shape} @ {bd.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        raise TypeError("index with integers, slices or numpy arrays")
    shape = x.shape
    basic = not _is_advanced(index)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._make(x.data[index], (x,), backward)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise EmptyInputError("concat of an empty sequence")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise EmptyInputError("stack of an empty sequence")

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by an integer array; gradients scatter-add."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return Tensor._make(table.data[ids], (table,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def max_over_axis(x: Tensor, axis: int = -2) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first arg-max only."""
    if x.shape[axis] == 0:
        raise EmptyInputError("max over an empty axis")
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Tensor._make(np.squeeze(out, axis=axis), (x,), backward)


def pool_max_over_time(X: Tensor) -> Tensor:
    """Elementwise maximum over the time axis of a ``(..., T, d)`` tensor."""
    if X.ndim < 2:
        raise ValueError(f"expected (..., T, d), got shape {X.shape}")
    if X.shape[-2] == 0:
        raise EmptyInputError("max-pool over zero time steps")
    return max_over_axis(X, axis=-2)


# ---------------------------------------------------------------------------
# normalisation-style composites
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise EmptyInputError("softmax over an empty axis")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise EmptyInputError("log_softmax over an empty axis")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._make(y, (x,), backward)


def norm(x: Tensor, axis: int = -1) -> Tensor:
    return sqrt(tsum(x * x, axis=axis))


def cosine_distance(u: Tensor, v: Tensor, axis: int = -1) -> Tensor:
    """``1 - u.v / (|u| |v|)`` along ``axis``; zero-norm inputs are an error."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape[axis] != v.shape[axis]:
        raise ValueError(f"cosine_distance width mismatch: {u.shape} vs {v.shape}")
    nu = np.sqrt(np.sum(u.data * u.data, axis=axis))
    nv = np.sqrt(np.sum(v.data * v.data, axis=axis))
    if np.any(nu == 0) or np.any(nv == 0):
        raise DegenerateVectorError("cosine distance of a zero-norm vector")
    dot = tsum(u * v, axis=axis)
    return 1.0 - dot / (norm(u, axis=axis) * norm(v, axis=axis))


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    loss_fn: Callable[[], Tensor],
    parameters: Iterable[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
    extended: bool = False,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``loss_fn`` is called with no arguments and must return a scalar tensor.
    If ``max_entries`` is given, at most that many entries per parameter are
    probed (chosen with ``rng``); otherwise every entry is.  The relative
    error of an entry is ``|a - n| / max(|a|, |n|, floor)``.

    With ``extended`` the finite differences are taken in ``np.longdouble``,
    which keeps their rounding noise far below ``floor`` even when the loss
    is large; the analytic side is always float64.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(parameters)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    again = loss_fn()
    if loss.data.size != 1:
        raise ValueError("loss_fn must return a scalar")
    if not np.array_equal(loss.data, again.data):
        raise DeterminismError(
            f"loss_fn is not deterministic: {loss.item()!r} vs {again.item()!r}"
        )
    loss.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)

    originals = [p.data for p in params]
    precision = extended_precision() if extended else contextlib.nullcontext()
    worst = 0.0
    try:
        with no_grad(), precision:
            if extended:
                for p in params:
                    p.data = p.data.astype(np.longdouble)
            step = np.longdouble(eps) if extended else eps
            for p, a in zip(params, analytic):
                flat = p.data.reshape(-1)
                if max_entries is not None and flat.size > max_entries:
                    entries = rng.choice(flat.size, size=max_entries, replace=False)
                else:
                    entries = range(flat.size)
                a_flat = a.reshape(-1)
                for k in entries:
                    orig = flat[k]
                    flat[k] = orig + step
                    f_plus = loss_fn().data.reshape(())
                    flat[k] = orig - step
                    f_minus = loss_fn().data.reshape(())
                    flat[k] = orig
                    numeric = float((f_plus - f_minus) / (2 * step))
                    denom = max(abs(a_flat[k]), abs(numeric), floor)
                    err = abs(a_flat[k] - numeric) / denom
                    if math.isnan(err):
                        return math.inf
                    worst = max(worst, err)
    finally:
        for p, data in zip(params, originals):
            p.data = data
            p.zero_grad()
    return worst
