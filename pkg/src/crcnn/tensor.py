"""Dense N-d arrays with define-by-run reverse-mode differentiation.

Only the operations the detector needs are provided. Every op takes and
returns :class:`Tensor` objects; the backward rule of an op is recorded as a
:class:`Node` when at least one input requires a gradient and gradient
recording is enabled.
"""
from __future__ import annotations

import builtins
import itertools
import os
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPES = (np.float32, np.float64)
_DEBUG = bool(os.environ.get("CRCNN_DEBUG"))

_node_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One recorded operation: inputs, output and the rule mapping the
    output gradient to input gradients."""

    __slots__ = ("id", "inputs", "backward")

    def __init__(self, inputs, backward):
        self.id = next(_node_ids)
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """N-dimensional array participating in gradient recording.

    Parameters
    ----------
    data : array_like
        Values. Floating arrays keep their dtype if it is float32/float64;
        anything else is converted to ``dtype`` (float32 by default).
    requires_grad : bool
        Whether gradients should be accumulated into ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result and record its backward rule if needed.

    ``backward(g)`` must return one gradient array (or ``None``) per input.
    """
    if _DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError("non-finite value produced from finite inputs")
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(tuple(inputs), backward)
    return out


class Tape:
    """Recorded operations reachable from one output, in topological order."""

    def __init__(self, root: Tensor):
        seen: dict[int, Node] = {}
        self.outputs: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or node.id in seen:
                continue
            seen[node.id] = node
            self.outputs[node.id] = t
            stack.extend(node.inputs)
        # ids grow monotonically at creation, so sorting gives a topological order
        self.nodes = [seen[k] for k in sorted(seen)]

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        for node in self.nodes:
            self.outputs[node.id].node = None
            node.inputs = ()
            node.backward = None
        self.nodes = []
        self.outputs = {}


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf
    that requires a gradient, then clear the recorded nodes."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise RuntimeError("loss was not produced by a recorded operation")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {loss.node.id: np.ones_like(loss.data)}

    for node in reversed(tape.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                gi = _unbroadcast(gi, t.shape)
            if t.node is None:
                gi = gi.astype(t.dtype, copy=False)
                t.grad = np.array(gi) if t.grad is None else t.grad + gi
            elif t.node.id in grads:
                grads[t.node.id] = grads[t.node.id] + gi
            else:
                grads[t.node.id] = gi
    tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------
def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    _broadcast_shape(a, b)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _make(s, (a,), lambda g: (g * s * (1 - s),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


_ELEMENTWISE = {"add": add, "mul": mul, "relu": relu, "sigmoid": sigmoid, "neg": neg}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch one of add, mul, relu, sigmoid, neg by name."""
    fn = _ELEMENTWISE[op]
    return fn(a, b) if op in ("add", "mul") else fn(a)


# -- shape ops -------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


# -- reductions --------------------------------------------------------------
def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), bw)


def max(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    x = a.data
    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    out = np.take_along_axis(x, idx, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(x)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return _make(out if keepdims else np.squeeze(out, axis), (a,), bw)


def global_avg_pool(a: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes, kept as 1x1."""
    return mean(a, axis=(2, 3), keepdims=True)


def global_max_pool(a: Tensor) -> Tensor:
    n, c, h, w = a.shape
    return reshape(max(reshape(a, (n, c, h * w)), axis=2, keepdims=True), (n, c, 1, 1))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


# -- linear algebra ------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# -- convolution ---------------------------------------------------------------
def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integral output extent: ({size} + 2*{pad} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = shape[:2]
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with kernels ``w`` [K,C,kh,kw]."""
    n, c, h, wd = x.shape
    k, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    ho = _out_extent(h, kh, stride, pad)
    wo = _out_extent(wd, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(k, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gw = (g2.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gxp = _col2im(g2 @ wmat, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        grads = (gx, gw)
        return grads if b is None else grads + (g2.sum(axis=0),)

    return _make(np.ascontiguousarray(out), inputs, bw)


def deconv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2, pad: int = 0) -> Tensor:
    """Transposed convolution; ``w`` is [C_in, C_out, kh, kw].

    Output extent is ``(H - 1) * stride + kh - 2 * pad``.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    n, c, h, wd = x.shape
    cin, cout, kh, kw = w.shape
    if c != cin:
        raise ShapeError(f"deconv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    hp = (h - 1) * stride + kh
    wp = (wd - 1) * stride + kw
    ho, wo = hp - 2 * pad, wp - 2 * pad
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"deconv2d output extent non-positive for input {x.shape}")
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    wmat = w.data.reshape(cin, -1)
    full = _col2im(x2 @ wmat, (n, cout, hp, wp), kh, kw, stride, h, wd)
    out = full[:, :, pad : pad + ho, pad : pad + wo]
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        cols = _im2col(gp, kh, kw, stride, h, wd)
        gx = (cols @ wmat.T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
        gw = (x2.T @ cols).reshape(w.shape)
        grads = (gx, gw)
        return grads if b is None else grads + (g.sum(axis=(0, 2, 3)),)

    return _make(np.ascontiguousarray(out), inputs, bw)


# -- pooling -----------------------------------------------------------------
def _pool_geometry(size: int, k: int, stride: int, clamp: bool) -> tuple[int, int]:
    """Return (output extent, right padding) for a pooling axis."""
    if k > size and not clamp:
        raise ShapeError(f"pool window {k} larger than input extent {size}")
    if clamp:
        out = -(-(size - k) // stride) + 1 if size > k else 1
    else:
        out = (size - k) // stride + 1
    return out, builtins.max(0, (out - 1) * stride + k - size)


def _pool_windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def max_pool2d(x: Tensor, k: int = 2, stride: int | None = None, clamp: bool = True) -> Tensor:
    """Max pooling; partial border windows are kept when ``clamp`` is set.

    Ties send the gradient to the first maximal element in row-major order.
    """
    stride = stride or k
    n, c, h, w = x.shape
    ho, eh = _pool_geometry(h, k, stride, clamp)
    wo, ew = _pool_geometry(w, k, stride, clamp)
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, eh), (0, ew)), constant_values=-np.inf) if (eh or ew) else x.data
    win = _pool_windows(xp, k, stride, ho, wo).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                if hit.any():
                    gp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * hit
        return (gp[:, :, :h, :w],)

    return _make(np.ascontiguousarray(out), (x,), bw)


def avg_pool2d(x: Tensor, k: int = 2, stride: int | None = None, clamp: bool = True) -> Tensor:
    """Average pooling; partial border windows average their valid cells only."""
    stride = stride or k
    n, c, h, w = x.shape
    ho, eh = _pool_geometry(h, k, stride, clamp)
    wo, ew = _pool_geometry(w, k, stride, clamp)
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, eh), (0, ew))) if (eh or ew) else x.data
    ones = np.pad(np.ones((1, 1, h, w), x.dtype), ((0, 0), (0, 0), (0, eh), (0, ew)))
    count = _pool_windows(ones, k, stride, ho, wo).sum(axis=(-1, -2))
    out = _pool_windows(xp, k, stride, ho, wo).sum(axis=(-1, -2)) / count

    def bw(g):
        gc = g / count
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gc
        return (gp[:, :, :h, :w],)

    return _make(out, (x,), bw)


_REDUCE = {
    "max_pool2d": max_pool2d,
    "avg_pool2d": avg_pool2d,
    "global_avg": global_avg_pool,
    "global_max": global_max_pool,
    "sum": sum,
    "mean": mean,
}


def reduce(op: str, x: Tensor, *args, **kwargs) -> Tensor:
    """Dispatch a reduction by name (max_pool2d, avg_pool2d, global_avg,
    global_max, sum, mean)."""
    return _REDUCE[op](x, *args, **kwargs)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)
