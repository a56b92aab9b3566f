"""Dense real tensors with a tape-based reverse-mode autodiff engine.

Every op computes its result eagerly with numpy and, when gradients are
being tracked, appends a :class:`Node` holding its backward rule to the
active :class:`Tape`. :func:`backward` replays the tape in reverse.

There is no implicit broadcasting: binary ops take identical shapes or a
Python scalar. Use :func:`broadcast_to` when broadcasting is intended.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import config


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Tape


class Node:
    __slots__ = ("name", "inputs", "backward", "tape", "index")

    def __init__(self, name, inputs, backward):
        self.name = name
        self.inputs = inputs
        self.backward = backward
        self.tape = None
        self.index = -1


class Tape:
    """Ordered record of executed differentiable ops.

    Use as a context manager to make it the recording target::

        with Tape() as tape:
            loss = f(x)
        backward(loss, tape)
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def record(self, node: Node) -> None:
        node.tape = self
        node.index = len(self.nodes)
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.index = -1
            node.tape = None
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None


_default_tape = Tape()
_active_tape: contextvars.ContextVar[Tape] = contextvars.ContextVar("tape", default=_default_tape)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad", default=True)


def current_tape() -> Tape:
    return _active_tape.get()


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


# --------------------------------------------------------------------------
# Tensor


class Tensor:
    """N-dimensional real array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        dtype = dtype or config.default_dtype()
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operators
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def tensor(data, requires_grad=False, dtype=None, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(out: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result and record it on the active tape when needed."""
    _check_finite(out, op)
    t = Tensor._wrap(out)
    if _grad_enabled.get() and any(i.requires_grad for i in inputs):
        node = Node(op, tuple(inputs), backward_fn)
        current_tape().record(node)
        t._node = node
        t.requires_grad = True
    return t


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# Pointwise


def _sigmoid(x):
    # A single exp/add/divide chain keeps the map monotone after rounding; the
    # branchy e/(1+e) form does not. float32 exp is not monotone in numpy's
    # SIMD path, so evaluate in float64 and round once at the end.
    x = np.asarray(x)
    with np.errstate(over="ignore"):
        r = 1.0 / (1.0 + np.exp(-x.astype(np.float64)))
    return r.astype(x.dtype) if x.dtype.kind == "f" else r


def _softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def _silu(x):
    return x * _sigmoid(x)


def _d_silu(x, y):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


# name -> (forward, derivative(x, y))
UNARY = {
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "silu": (_silu, _d_silu),
    "softplus": (_softplus, lambda x, y: _sigmoid(x)),
    "exp": (np.exp, lambda x, y: y),
    "log": (np.log, lambda x, y: 1.0 / x),
    "neg": (np.negative, lambda x, y: -np.ones_like(x)),
}


def unary(x: Tensor, fn: str) -> Tensor:
    fwd, _ = UNARY[fn]
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        y = fwd(x.data)

    def back(g):
        # looked up at backward time so a patched rule takes effect
        return (g * UNARY[fn][1](x.data, y),)

    return _make(y, fn, (x,), back)


def sigmoid(x):
    return unary(x, "sigmoid")


def silu(x):
    return unary(x, "silu")


def softplus(x):
    return unary(x, "softplus")


def exp(x):
    return unary(x, "exp")


def log(x):
    return unary(x, "log")


def neg(x):
    return unary(x, "neg")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is passed through only strictly inside."""
    y = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)
    return _make(y, "clip", (x,), lambda g: (g * inside,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _make(out, "div", (a, b), lambda g: (g / b.data, -g * out / b.data))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(x.data * x.dtype.type(s), "scale", (x,), lambda g: (g * g.dtype.type(s),))


def shift(x: Tensor, s: float) -> Tensor:
    return _make(x.data + x.dtype.type(s), "shift", (x,), lambda g: (g,))


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def pointwise(x: Tensor, fn: str, other=None) -> Tensor:
    """Dispatch by name: unary activations, binary ops, or ``scale``."""
    if fn in UNARY:
        return unary(x, fn)
    if fn in _BINARY:
        if not isinstance(other, Tensor):
            return shift(x, other) if fn == "add" else scale(x, other) if fn == "mul" else _BINARY[fn](x, other)
        return _BINARY[fn](x, other)
    if fn == "scale":
        return scale(x, other)
    raise ValueError(f"unknown pointwise op {fn!r}")


# --------------------------------------------------------------------------
# Reductions and shape ops


def sum_all(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,),
                 lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _make(np.asarray(x.data.mean(), dtype=x.dtype), "mean", (x,),
                 lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)
    return _make(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, "permute", (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def permute_axis(x: Tensor, perm, axis: int) -> Tensor:
    """Reorder ``x`` along ``axis`` so that ``out[..., i, ...] = x[..., perm[i], ...]``."""
    perm = np.asarray(perm, dtype=np.intp)
    n = x.shape[axis]
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ShapeError("permute_axis needs a permutation of the axis")
    inv = np.argsort(perm)
    out = np.take(x.data, perm, axis=axis)
    return _make(out, "permute_axis", (x,), lambda g: (np.take(g, inv, axis=axis),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit broadcast; only size-1 axes may be expanded."""
    shape = tuple(shape)
    if len(shape) != x.ndim or any(a != b and a != 1 for a, b in zip(x.shape, shape)):
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}")
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a != b)
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return _make(out, "broadcast_to", (x,), lambda g: (g.sum(axis=axes, keepdims=True),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _make(out, "concat", xs, back)


def getitem(x: Tensor, idx) -> Tensor:
    out = np.array(x.data[idx], copy=True)

    key = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(k, (slice, int, type(Ellipsis), type(None))) for k in key)

    def back(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _make(out, "getitem", (x,), back)


# --------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    return _make(out, "matmul", (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# --------------------------------------------------------------------------
# 3D convolution (cross-correlation)

_COL_BUDGET = 1 << 22  # elements per im2col chunk


def _conv_out(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _row_chunks(ho, row_elems):
    rows = max(1, _COL_BUDGET // max(row_elems, 1))
    return [(h, min(h + rows, ho)) for h in range(0, ho, rows)]


def _im2col(windows, stride, h0, h1, wo, do):
    # windows: [C, H', W', D', k, k, k] view
    cin, k = windows.shape[0], windows.shape[-1]
    s = stride
    w = windows[:, h0 * s:(h1 - 1) * s + 1:s, 0:(wo - 1) * s + 1:s, 0:(do - 1) * s + 1:s]
    return w.transpose(0, 4, 5, 6, 1, 2, 3).reshape(cin * k ** 3, (h1 - h0) * wo * do)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 3D cross-correlation on an unbatched ``[C, H, W, D]`` volume."""
    if x.ndim != 4 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects [C,H,W,D] input and 5-d kernel, got {x.shape}, {weight.shape}")
    cin, h, w, d = x.shape
    cout, cin_g, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if weight.shape[2:] != (k, k, k):
        raise ShapeError("conv3d kernels must be cubic")
    if groups < 1 or cin % groups or cout % groups or cin_g != cin // groups:
        raise ShapeError(f"conv3d: {cin} input channels incompatible with kernel {weight.shape} and groups={groups}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({cout},)")
    ho, wo, do = (_conv_out(n, k, stride, padding) for n in (h, w, d))
    if min(ho, wo, do) <= 0 or stride < 1 or padding < 0:
        raise ShapeError(f"conv3d: invalid geometry for input {x.shape}, k={k}, stride={stride}, padding={padding}")

    G, cout_g, kk = groups, cout // groups, cin_g * k ** 3
    wmat = weight.data.reshape(G, cout_g, kk)
    p = padding
    pointwise_fast = k == 1 and stride == 1 and p == 0
    xp = x.data if p == 0 else np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p)))
    windows = None if pointwise_fast else sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    chunks = _row_chunks(ho, cin * k ** 3 * wo * do)

    def cols_for(h0, h1):
        if pointwise_fast:
            return x.data[:, h0:h1].reshape(G, kk, -1)
        return _im2col(windows, stride, h0, h1, wo, do).reshape(G, kk, -1)

    out = np.empty((cout, ho, wo, do), dtype=x.dtype)
    for h0, h1 in chunks:
        out[:, h0:h1] = np.matmul(wmat, cols_for(h0, h1)).reshape(cout, h1 - h0, wo, do)
    if bias is not None:
        out += bias.data[:, None, None, None]

    def back(g):
        gw = np.zeros_like(wmat)
        gxp = np.zeros_like(xp)
        wt = wmat.transpose(0, 2, 1)
        for h0, h1 in chunks:
            gc = g[:, h0:h1].reshape(G, cout_g, -1)
            gw += np.matmul(gc, cols_for(h0, h1).transpose(0, 2, 1))
            dcols = np.matmul(wt, gc)
            if pointwise_fast:
                gxp[:, h0:h1] += dcols.reshape(cin, h1 - h0, wo, do)
                continue
            dcols = dcols.reshape(cin, k, k, k, h1 - h0, wo, do)
            s = stride
            for a in range(k):
                hs = slice(h0 * s + a, h0 * s + a + (h1 - h0 - 1) * s + 1, s)
                for b in range(k):
                    ws = slice(b, b + (wo - 1) * s + 1, s)
                    for c in range(k):
                        ds = slice(c, c + (do - 1) * s + 1, s)
                        gxp[:, hs, ws, ds] += dcols[:, a, b, c]
        gx = gxp if p == 0 else gxp[:, p:p + h, p:p + w, p:p + d]
        grads = [np.ascontiguousarray(gx), gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "conv3d", inputs, back)


# --------------------------------------------------------------------------
# Normalization


def layer_norm(x: Tensor, normalized_extent: int, gamma: Tensor | None = None,
               beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    n = normalized_extent
    if n <= 0:
        raise ShapeError("layer_norm: zero-length normalization axis")
    if x.shape[-1] != n:
        raise ShapeError(f"layer_norm: last axis {x.shape[-1]} != {n}")
    for p in (gamma, beta):
        if p is not None and p.shape != (n,):
            raise ShapeError(f"layer_norm: affine parameter shape {p.shape} != ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    def back(g):
        lead = tuple(range(x.ndim - 1))
        gxhat = g * gamma.data if gamma is not None else g
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    inputs = [x] + [p for p in (gamma, beta) if p is not None]
    return _make(np.ascontiguousarray(out), "layer_norm", inputs, back)


# --------------------------------------------------------------------------
# Trilinear resize


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights ``[n_out, n_in]`` (half-pixel centres, clamped)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale_ = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale_ - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0 if i0 < n_in - 1 else 0.0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def _apply_axis(m, a, axis):
    return np.moveaxis(np.tensordot(m, a, axes=([1], [axis])), 0, axis)


def trilinear_resize(x: Tensor, target) -> Tensor:
    """Resize the three trailing axes of ``[C, H, W, D]`` to ``target``."""
    target = tuple(int(t) for t in target)
    if x.ndim != 4 or len(target) != 3 or min(target) <= 0:
        raise ShapeError(f"trilinear_resize: bad input {x.shape} or target {target}")
    mats = [None if n == t else interp_matrix(n, t, x.dtype) for n, t in zip(x.shape[1:], target)]
    out = x.data
    for ax, m in enumerate(mats, start=1):
        if m is not None:
            out = _apply_axis(m, out, ax)

    def back(g):
        for ax, m in reversed(list(enumerate(mats, start=1))):
            if m is not None:
                g = _apply_axis(m.T, g, ax)
        return (np.ascontiguousarray(g),)

    return _make(np.ascontiguousarray(out), "trilinear_resize", (x,), back)


# --------------------------------------------------------------------------
# Reverse pass


def backward(loss: Tensor, tape: Tape | None = None, retain: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    The tape is cleared afterwards unless ``retain`` is set.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, np.ones_like(loss.data))
            return
        raise TapeError("loss was not produced on a tape")
    if tape is None:
        tape = node.tape
    if node.tape is not tape or node.index < 0:
        raise TapeError("loss is not on the given tape")

    pending = {node.index: np.ones_like(loss.data)}
    for i in range(node.index, -1, -1):
        g = pending.pop(i, None)
        if g is None:
            continue
        n = tape.nodes[i]
        for inp, gi in zip(n.inputs, n.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                _accumulate_leaf(inp, gi)
            else:
                j = inp._node.index
                if j < 0 or inp._node.tape is not tape:
                    continue
                pending[j] = gi if j not in pending else pending[j] + gi
    if not retain:
        tape.clear()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g
