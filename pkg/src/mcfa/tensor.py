"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every primitive records a :class:`Node` on its output when gradients are
enabled and at least one operand requires them. :func:`backward` collects
the reachable nodes into a :class:`Graph` (operands always precede their
consumers), walks it once in reverse, then drops it.

Spatial ops accept either a single ``(C, H, W)`` image or a batch
``(N, C, H, W)``; vector ops accept ``(D,)`` or ``(N, D)``.
"""
from __future__ import annotations

import contextlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    pass


# --------------------------------------------------------------------------
# global engine state: grad mode, op counters, scope labels

_grad_enabled = True
_active_counters: list[Counter] = []
_scopes: list[str] = []


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def scope(name: str) -> Iterator[None]:
    """Label every op executed inside the block (used by the op counter)."""
    _scopes.append(name)
    try:
        yield
    finally:
        _scopes.pop()


@contextlib.contextmanager
def count_ops() -> Iterator[Counter]:
    """Count primitive ops executed inside the block.

    Keys are ``(scope, op_name)`` where scope is the innermost active
    :func:`scope` label, or ``""`` outside any scope.
    """
    counter: Counter = Counter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def _tick(op: str) -> None:
    if _active_counters:
        key = (_scopes[-1] if _scopes else "", op)
        for c in _active_counters:
            c[key] += 1


# --------------------------------------------------------------------------
# core types


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple["Tensor", ...]
    # maps the output gradient to one gradient (or None) per parent
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    # ---- basic accessors
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
    def values(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # ---- operator sugar
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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], bw) -> Tensor:
    _tick(op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, bw)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# graph and backward


@dataclass
class Graph:
    """Topologically ordered record of the ops reachable from a root."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    def run_backward(self, root: Tensor) -> None:
        root.grad = np.ones_like(root.data)
        for t in reversed(self.nodes):
            node = t.node
            if node is None or t.grad is None:
                continue
            grads = node.backward(t.grad)
            for p, g in zip(node.parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if g.shape != p.data.shape:
                    g = np.broadcast_to(g, p.data.shape)
                if p.grad is None:
                    p.grad = np.array(g, dtype=DTYPE, copy=True)
                else:
                    p.grad = p.grad + g

    def release(self) -> None:
        for t in self.nodes:
            t.node = None
        self.nodes.clear()


def backward(root: Tensor, keep_graph: bool = False) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every participating tensor."""
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    graph = Graph.from_root(root)
    graph.run_backward(root)
    if not keep_graph:
        graph.release()


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make("div", ad / bd, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _make("clip", np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


# --------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([shape[ax] for ax in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return _make("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a) -> Tensor:
    """Row-major linearisation: (C,H,W) -> (C*H*W,), (N,C,H,W) -> (N, C*H*W)."""
    a = as_tensor(a)
    if a.ndim == 4:
        return reshape(a, (a.shape[0], -1))
    return reshape(a, (-1,))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice))
                for p in parts)

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make("getitem", np.array(a.data[idx], dtype=DTYPE), (a,), bw)


def concat(a, b) -> Tensor:
    """Join two vectors (or two equal-length batches of vectors) end to end."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (1, 2):
        raise ShapeError(f"concat needs two vectors, got {a.shape} and {b.shape}")
    if a.ndim == 2 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat batch mismatch: {a.shape} vs {b.shape}")
    na = a.shape[-1]
    return _make("concat", np.concatenate([a.data, b.data], axis=-1), (a, b),
                 lambda g: (g[..., :na], g[..., na:]))


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _make("stack", np.stack([t.data for t in items], axis=axis), tuple(items), bw)


# --------------------------------------------------------------------------
# softmax


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] < 1:
        raise ShapeError("softmax needs at least one entry")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make("softmax", s, (a,), bw)


# --------------------------------------------------------------------------
# dense and spatial layers


def fully_connected(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` with weight laid out (D_in, D_out)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(
            f"fully_connected shapes: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    xd, wd = x.data, weight.data

    def bw(g):
        if xd.ndim == 1:
            gw = np.outer(xd, g)
            gb = g
        else:
            gw = xd.T @ g
            gb = g.sum(axis=0)
        return (g @ wd.T, gw, gb)

    return _make("fully_connected", xd @ wd + bias.data, (x, weight, bias), bw)


def _batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op} needs (C,H,W) or (N,C,H,W) input, got {x.shape}")


def _out_side(n: int, k: int, stride: int, pad: int = 0) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation plus per-channel bias."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    xd, single = _batched(x, "conv2d")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding nonnegative")
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be (C_out,C_in,kH,kW), got {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    n, c, h, w = xd.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias must be ({c_out},), got {bias.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    ho, wo = _out_side(h, kh, stride, padding), _out_side(w, kw, stride, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (N, C, Ho, Wo, kH, kW)
    kd = kernel.data
    out = np.tensordot(win, kd, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, C_out)
    out = out.transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        g4 = g[None] if single else g
        gk = np.tensordot(g4, win, axes=([0, 2, 3], [0, 2, 3]))  # (C_out, C, kH, kW)
        gb = g4.sum(axis=(0, 2, 3))
        cols = np.tensordot(g4, kd, axes=([1], [0]))  # (N, Ho, Wo, C, kH, kW)
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if single:
            gx = gx[0]
        return (gx, gk, gb)

    return _make("conv2d", out[0] if single else out, (x, kernel, bias), bw)


def _pool_windows(x: Tensor, window: int, stride: int, op: str):
    xd, single = _batched(x, op)
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    n, c, h, w = xd.shape
    if window > h or window > w:
        raise ShapeError(f"{op} window {window} larger than spatial extent {h}x{w}")
    win = sliding_window_view(xd, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    return xd, single, win


def avg_pool2d(x, window: int, stride: int) -> Tensor:
    x = as_tensor(x)
    xd, single, win = _pool_windows(x, window, stride, "avg_pool2d")
    out = win.mean(axis=(4, 5))
    ho, wo = out.shape[2:]
    scale = 1.0 / (window * window)

    def bw(g):
        g4 = (g[None] if single else g) * scale
        gx = np.zeros(xd.shape, dtype=DTYPE)
        for i in range(window):
            for j in range(window):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g4
        return (gx[0] if single else gx,)

    return _make("avg_pool2d", out[0] if single else out, (x,), bw)


def max_pool2d(x, window: int, stride: int) -> Tensor:
    """Max pooling; the gradient goes to the first (row-major) maximum of each window."""
    x = as_tensor(x)
    xd, single, win = _pool_windows(x, window, stride, "max_pool2d")
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        g4 = g[None] if single else g
        di, dj = np.divmod(arg, window)
        rows = np.arange(ho)[None, None, :, None] * stride + di
        cols = np.arange(wo)[None, None, None, :] * stride + dj
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        gx = np.zeros(xd.shape, dtype=DTYPE)
        if stride >= window:
            gx[nn, cc, rows, cols] = g4
        else:
            np.add.at(gx, (nn, cc, rows, cols), g4)
        return (gx[0] if single else gx,)

    return _make("max_pool2d", out[0] if single else out, (x,), bw)


def global_avg_pool2d(x) -> Tensor:
    """Mean over the full spatial extent, keeping a 1x1 map."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool2d needs (C,H,W) or (N,C,H,W), got {x.shape}")
    return mean(x, axis=(-2, -1), keepdims=True)
