"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable quantity in the attack pipeline (mesh vertices, texture,
rendered images, detector activations) is a :class:`Tensor`. Operations record
their inputs and an adjoint closure; :func:`backward` orders the recorded graph
topologically (the tape) and replays it in reverse, accumulating gradients
into leaves.

Branching decisions (occlusion tests, inside/outside tests, argmins) are made
on plain numpy arrays and enter the graph as constants.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-dimensional array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "node_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self.op = op
        self.node_id = next(_ids)

    # -- basic properties -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar -----------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _ub(grad: np.ndarray, t: "Tensor"):
    """Unbroadcast to ``t``'s shape, or None when ``t`` takes no gradient."""
    return _unbroadcast(grad, t.shape) if t.requires_grad else None


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_ub(g, a), _ub(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_ub(g, a), _ub(-g, b) if b.requires_grad else None), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_ub(g * b.data, a) if a.requires_grad else None,
                              _ub(g * a.data, b) if b.requires_grad else None), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _ub(ga, a), (_ub(-ga * out, b) if b.requires_grad else None)

    return _result(out, (a, b), bw, "div")


def where(cond, a, b) -> Tensor:
    """Select elementwise from ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def bw(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _result(out, (a, b), bw, "where")


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return where(a.data <= b.data, a, b)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return where(a.data >= b.data, a, b)


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    if p == 2.0:
        return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")
    return _result(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log_sigmoid(a) -> Tensor:
    """``log(sigmoid(a))`` evaluated without overflow for large ``|a|``."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _result(out, (a,), lambda g: (g * _sigmoid_np(-x),), "log_sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    keep = np.ones(a.shape, dtype=bool)
    if lo is not None:
        keep &= a.data >= lo
    if hi is not None:
        keep &= a.data <= hi
    return _result(out, (a,), lambda g: (np.where(keep, g, 0.0),), "clamp")


# ---------------------------------------------------------------------------
# reductions and linear algebra
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / max(count, 1))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul: scalar operands {a.shape}, {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    out = a.data @ b.data

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return _unbroadcast(g[..., None, :] @ np.swapaxes(bd, -1, -2), (1,) + ad.shape).reshape(ad.shape), \
                _unbroadcast(ad[:, None] * g[..., None, :], bd.shape)
        if bd.ndim == 1:
            return _unbroadcast(g[..., :, None] * bd, ad.shape), \
                _unbroadcast(np.swapaxes(ad, -1, -2) @ g[..., :, None], bd.shape + (1,)).reshape(bd.shape)
        return (_unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape),
                _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape))

    return _result(out, (a, b), bw, "matmul")


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} differ")
    return tsum(a * b)


def norm2(a, axis=None, keepdims: bool = False) -> Tensor:
    return sqrt(tsum(a * a, axis, keepdims))


def cosine_similarity(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return dot(a, b) / (norm2(a) * norm2(b))


def sparse_matmul(matrix: sp.spmatrix, x) -> Tensor:
    """``matrix @ x`` for a constant sparse ``matrix`` and dense 2-D ``x``."""
    x = as_tensor(x)
    if matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse_matmul: shapes {matrix.shape} and {x.shape} do not align")
    mt = matrix.T.tocsr()
    return _result(np.asarray(matrix @ x.data), (x,), lambda g: (np.asarray(mt @ g),), "sparse_matmul")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return _result(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx) -> Tensor:
    """Slicing and integer-array gathering; gradients scatter-add back."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    rows = isinstance(idx, np.ndarray) and idx.ndim == 1 and idx.dtype.kind in "iu"

    def bw(g):
        if rows:
            # row gather: bincount is much faster than np.add.at for long index arrays
            n = a.shape[0]
            if a.ndim == 1:
                return (np.bincount(idx, weights=g, minlength=n).astype(DTYPE),)
            flat = g.reshape(len(idx), -1)
            cols = [np.bincount(idx, weights=flat[:, k], minlength=n) for k in range(flat.shape[1])]
            return (np.stack(cols, axis=1).reshape(a.shape),)
        full = np.zeros(a.shape, dtype=DTYPE)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(out, (a,), bw, "slice" if basic else "gather")


def segment_sum(values, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``values`` (along axis 0) into ``num_segments`` buckets."""
    values = as_tensor(values)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape != values.shape[:1]:
        raise ShapeError(f"segment_sum: ids {ids.shape} vs values {values.shape}")
    tail = values.shape[1:]
    if values.ndim == 1:
        out = np.bincount(ids, weights=values.data, minlength=num_segments).astype(DTYPE)
    else:
        flat = values.data.reshape(len(ids), -1)
        out = np.stack([np.bincount(ids, weights=flat[:, k], minlength=num_segments)
                        for k in range(flat.shape[1])], axis=1).reshape((num_segments,) + tail)
    return _result(out, (values,), lambda g: (g[ids],), "segment_sum")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _result(out, ts, lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([expand_dims(t, axis) for t in ts], axis=axis)


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


# ---------------------------------------------------------------------------
# convolution and pooling (NCHW)
# ---------------------------------------------------------------------------

def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int = 1) -> np.ndarray:
    ekh, ekw = (kh - 1) * dilation + 1, (kw - 1) * dilation + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (ekh, ekw), axis=(2, 3))
    return win[:, :, ::stride, ::stride, ::dilation, ::dilation]


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation. ``x``: (N, C, H, W); ``weight``: (O, C, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels, weight {weight.shape} expects {cw}")
    if h == 0 or w == 0:
        raise ShapeError(f"conv2d: zero-size spatial dims in input {x.shape}")
    if dilation < 1 or stride < 1:
        raise ValueError("conv2d: stride and dilation must be positive")
    hp, wp = h + 2 * padding, w + 2 * padding
    d = dilation
    if (kh - 1) * d + 1 > hp or (kw - 1) * d + 1 > wp:
        raise ShapeError(f"conv2d: kernel {weight.shape} (dilation {d}) larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _windows(xp, kh, kw, stride, d)  # (N, C, Ho, Wo, kh, kw)
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[None, :, None, None]
        parents.append(bias)

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
        gxp = np.zeros((n, c, hp, wp), dtype=DTYPE)
        wd = weight.data
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, wd[:, :, i, j], axes=([1], [0]))  # (N, Ho, Wo, C)
                gxp[:, :, i * d:i * d + stride * ho:stride, j * d:j * d + stride * wo:stride] += \
                    contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result(out, parents, bw, "conv2d")


def max_pool2d(x, kernel: int = 2, stride: int | None = None, padding: int = 0) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected 4-D input, got {x.shape}")
    stride = stride or kernel
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x.data
    win = _windows(xp, kernel, kernel, stride)
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        di, dj = np.divmod(arg, kernel)
        ni, ci, oi, oj = np.indices(arg.shape)
        np.add.at(gxp, (ni, ci, oi * stride + di, oj * stride + dj), g)
        return (gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp,)

    return _result(out, (x,), bw, "max_pool2d")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

class Tape:
    """Topologically ordered record of the operations reachable from a root."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = self._order(root)

    @staticmethod
    def _order(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        root = self.root
        grads: dict[int, np.ndarray] = {root.node_id: np.ones(root.shape, dtype=DTYPE)}
        for node in reversed(self.nodes):
            g = grads.pop(node.node_id, None)
            if node.is_leaf:
                if g is None:
                    g = np.zeros(node.shape, dtype=DTYPE)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node is root:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=DTYPE)
                if pg.shape != parent.shape:
                    pg = _unbroadcast(pg, parent.shape)
                prev = grads.get(parent.node_id)
                # never updated in place, so aliasing the op's output is safe
                grads[parent.node_id] = pg if prev is None else prev + pg


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf reachable from ``root``."""
    if root.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    Tape(root).backward()


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    base = np.array(as_tensor(x).data, dtype=DTYPE)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            xp = base.copy().reshape(-1)
            xm = base.copy().reshape(-1)
            xp[i] += eps
            xm[i] -= eps
            fp = f(Tensor(xp.reshape(base.shape))).item()
            fm = f(Tensor(xm.reshape(base.shape))).item()
            flat[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0


def atan2(y, x) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    out = np.arctan2(y.data, x.data)

    def bw(g):
        r2 = x.data * x.data + y.data * y.data
        r2 = np.where(r2 > 0, r2, 1.0)
        return _unbroadcast(g * x.data / r2, y.shape), _unbroadcast(-g * y.data / r2, x.shape)

    return _result(out, (y, x), bw, "atan2")
