"""Dense reverse-mode automatic differentiation on numpy arrays.

Each operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output cotangent to parent cotangents.  ``backward`` walks
the graph once in reverse topological order.  Graphs are kept after
``backward`` so it can be re-run; leaf gradients accumulate in ``.grad``.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from ..errors import NumericError

_state = threading.local()


def _default_dtype():
    return getattr(_state, "dtype", np.float64)


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def precision(dtype):
    """Default scalar width for tensors built from Python/integer data."""
    prev = _default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_array(x, dtype=None):
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind != "f":
        arr = arr.astype(_default_dtype())
    return arr


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and not isinstance(data, np.ndarray):
            dtype = _default_dtype()
        arr = np.array(data, dtype=dtype, copy=True) if dtype is not None else np.array(data, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _make(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        live = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = live
        out._parents = tuple(parents) if live else ()
        out._backward = backward if live else None
        out.op = op
        return out

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def is_leaf(self):
        return not self._parents

    # -- backward ----------------------------------------------------------
    def backward(self, grad=None, check_finite=False):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without an explicit cotangent needs a scalar root")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)
        if not self.requires_grad:
            return
        order = _topo_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    if check_finite and not np.all(np.isfinite(g)):
                        raise NumericError(f"non-finite gradient reaching leaf {node.name or node.shape}")
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.dtype != p.data.dtype:
                    pg = pg.astype(p.data.dtype)
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _topo_order(root):
    order, seen = [], set()
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def tensor(data, requires_grad=False, dtype=None, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _lift(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    t = Tensor.__new__(Tensor)
    t.data = _as_array(x, dtype)
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._backward = None
    t.op = "const"
    t.name = None
    return t


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    if isinstance(b, Tensor):
        return _lift(a, b), b
    return _lift(a), _lift(b)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    return Tensor._make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    return Tensor._make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def neg(a) -> Tensor:
    a = _lift(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), bw, "div")


def power(a, p: float) -> Tensor:
    a = _lift(a)
    return Tensor._make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),), f"pow{p}")


def square(a) -> Tensor:
    a = _lift(a)
    return Tensor._make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _lift(a)
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _lift(a)
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sin(a) -> Tensor:
    a = _lift(a)
    return Tensor._make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = _lift(a)
    return Tensor._make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def _sigmoid_np(x):
    return expit(x)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = _sigmoid_np(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = _lift(a)
    # derivative at exactly 0 is defined as 0
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def softplus(a) -> Tensor:
    a = _lift(a)
    x = a.data
    out = (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).astype(a.dtype, copy=False)
    return Tensor._make(out, (a,), lambda g: (g * _sigmoid_np(a.data),), "softplus")


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Tensor._make(np.maximum(a.data, b.data), (a, b), bw, "maximum")


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "minimum")
    pick_a = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Tensor._make(np.minimum(a.data, b.data), (a, b), bw, "minimum")


def clip(a, lo, hi) -> Tensor:
    a = _lift(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0), a.shape), _unbroadcast(np.where(cond, 0, g), b.shape)

    return Tensor._make(np.where(cond, a.data, b.data), (a, b), bw, "where")


def astype(a, dtype) -> Tensor:
    """Dtype conversion that stays on the tape (cotangents are cast back)."""
    a = _lift(a)
    dtype = np.dtype(dtype)
    if a.dtype == dtype:
        return a
    return Tensor._make(a.data.astype(dtype), (a,), lambda g: (g,), "astype")


def detach(a) -> Tensor:
    """Same value, no upstream gradient."""
    return _lift(a.data if isinstance(a, Tensor) else a)


# -- reductions and linear algebra -----------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul does not accept scalars")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        A, B, G = a.data, b.data, g
        if A.ndim == 1:
            A = A[None, :]
            G = G[..., None, :]
        if B.ndim == 1:
            B = B[:, None]
            G = G[..., None]
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(G, np.swapaxes(B, -1, -2)), A.shape).reshape(a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), G), B.shape).reshape(b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), bw, "matmul")


def dot(a, b, axis=-1, keepdims=False) -> Tensor:
    return tsum(mul(a, b), axis=axis, keepdims=keepdims)


def cross(a, b) -> Tensor:
    """Cross product along the last axis (length 3)."""
    a, b = _pair(a, b)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ValueError("cross needs length-3 vectors on the last axis")

    def bw(g):
        ga = _unbroadcast(np.cross(b.data, g), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.cross(g, a.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(np.cross(a.data, b.data), (a, b), bw, "cross")


def norm(a, axis=-1, keepdims=False, eps=0.0) -> Tensor:
    return sqrt(tsum(square(a), axis=axis, keepdims=keepdims) + eps)


def normalize(a, axis=-1, eps=1e-12) -> Tensor:
    """``a / max(|a|, eps)`` along ``axis``."""
    a = _lift(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    safe = np.maximum(n, eps)
    u = a.data / safe
    live = n > eps

    def bw(g):
        proj = np.sum(g * u, axis=axis, keepdims=True)
        return (np.where(live, (g - u * proj) / safe, g / safe),)

    return Tensor._make(u, (a,), bw, "normalize")


# -- shape manipulation -----------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _lift(a)
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    inv = None if axes is None else np.argsort(axes)
    return Tensor._make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors, axis=-1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(p.astype(t.dtype, copy=False) for p, t in zip(np.split(g, sizes, axis=axis), ts))

    return Tensor._make(out, ts, bw, "concat")


def stack(tensors, axis=0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(out, ts, bw, "stack")


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def index(a, idx) -> Tensor:
    """``a[idx]`` with numpy semantics (basic or advanced indexing)."""
    a = _lift(a)
    basic = _is_basic_index(idx)

    def bw(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(a.data[idx], (a,), bw, "index")


def gather(a, idx, axis=0) -> Tensor:
    """``take`` along ``axis``; repeated indices accumulate in backward."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise IndexError("gather index out of range")

    def bw(g):
        if axis != 0:
            gm = np.moveaxis(g, axis, 0)
            out = np.zeros((a.shape[axis],) + gm.shape[idx.ndim:], dtype=g.dtype)
            _scatter_rows(out, idx, gm)
            return (np.moveaxis(out, 0, axis),)
        out = np.zeros_like(a.data)
        _scatter_rows(out, idx, g)
        return (out,)

    return Tensor._make(np.take(a.data, idx, axis=axis), (a,), bw, "gather")


def _scatter_rows(out, idx, vals):
    flat_idx = idx.reshape(-1)
    flat_vals = vals.reshape((flat_idx.size,) + out.shape[1:])
    if out.ndim == 1:
        out += np.bincount(flat_idx, weights=flat_vals, minlength=len(out)).astype(out.dtype)
        return
    cols = flat_vals.reshape(flat_idx.size, -1)
    res = out.reshape(len(out), -1)
    if cols.shape[1] <= 4:
        for c in range(cols.shape[1]):
            res[:, c] += np.bincount(flat_idx, weights=cols[:, c], minlength=len(out))
        return
    # wide rows: one sparse product instead of a bincount per column
    S = sp.csr_matrix((np.ones(flat_idx.size, dtype=cols.dtype), (flat_idx, np.arange(flat_idx.size))),
                      shape=(len(out), flat_idx.size))
    res += S @ cols


def scatter_add(src, idx, size) -> Tensor:
    """Rows of ``src`` summed into ``size`` output rows at ``idx``."""
    src = _lift(src)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((size,) + src.shape[idx.ndim:], dtype=src.dtype)
    _scatter_rows(out, idx, src.data)
    return Tensor._make(out, (src,), lambda g: (g[idx],), "scatter_add")


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {what}")
    return t
