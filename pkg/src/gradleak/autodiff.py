"""Reverse-mode automatic differentiation over dense float64 arrays.

Every backward rule is written in terms of the differentiable ops defined in
this module, so calling :func:`gradient` with ``create_graph=True`` records
the backward pass itself and gradients of gradients are available.  This is
what gradient-matching attacks need: the attack objective depends on
``dL/dw`` and is optimised with respect to the input.

Nodes are ordered by a monotonically increasing creation id.  Parents are
always created before their children, so sorting by id gives a valid
topological order without an explicit graph object.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "GraphError", "ShapeError", "NonFiniteError",
    "no_grad", "is_grad_enabled", "tensor", "constant",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "transpose",
    "reshape", "flatten", "tsum", "mean", "broadcast_to", "sum_to",
    "exp", "log", "sqrt", "square", "sigmoid", "tanh", "relu", "logsumexp",
    "conv2d", "conv2d_input_grad", "conv2d_weight_grad",
    "avgpool2d", "upsample2d", "getitem", "scatter",
    "softmax", "log_softmax", "softmax_cross_entropy",
    "gradient", "finite_difference_gradient",
]


class GraphError(RuntimeError):
    """Raised for miswired differentiation requests."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager that disables graph recording."""
    return _grad_mode(False)


class Tensor:
    """A float64 array plus an optional handle into the autodiff graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "_id", "__weakref__")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"
        self._id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

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

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def __mul__(self, o):
        if isinstance(o, (int, float)):
            return scale(self, o)
        return mul(self, o)

    __rmul__ = __mul__

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _make(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out._id = next(_ids)
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


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    return g if g.shape == shape else sum_to(g, shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _make(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    try:
        data = a.data / b.data
    except ValueError as exc:
        raise ShapeError(f"div: {a.shape} vs {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (scale(g, c),), "scale")


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    out = None

    def backward(g):
        return (mul(g, out),)

    out = _make(data, (a,), backward, "exp")
    return out


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _make(data, (a,), lambda g: (div(g, a),), "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)
    out = None

    def backward(g):
        return (div(scale(g, 0.5), out),)

    out = _make(data, (a,), backward, "sqrt")
    return out


def sigmoid(a: Tensor) -> Tensor:
    data = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = None

    def backward(g):
        # s * (1 - s) built from recorded ops keeps the rule differentiable
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _make(data, (a,), backward, "sigmoid")
    return out


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)
    out = None

    def backward(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _make(data, (a,), backward, "tanh")
    return out


def relu(a: Tensor) -> Tensor:
    mask = Tensor((a.data > 0).astype(np.float64))
    return _make(a.data * mask.data, (a,), lambda g: (mul(g, mask),), "relu")


# ------------------------------------------------------------------ shaping


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from exc
    return _make(data, (a,), lambda g: (sum_to(g, a.shape),), "broadcast_to")


def _sum_to_array(x: np.ndarray, shape: tuple) -> np.ndarray:
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"sum_to: {x.shape} -> {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(shape) if d == 1 and x.shape[lead + i] != 1
    )
    out = x.sum(axis=axes, keepdims=True) if axes else x
    if lead:
        out = out.reshape(out.shape[lead:])
    if out.shape != shape:
        raise ShapeError(f"sum_to: {x.shape} -> {shape}")
    return out


def sum_to(a: Tensor, shape: tuple) -> Tensor:
    """Sum a broadcast tensor back down to ``shape``."""
    shape = tuple(shape)
    data = _sum_to_array(a.data, shape)
    return _make(data, (a,), lambda g: (broadcast_to(g, a.shape),), "sum_to")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from exc
    return _make(data, (a,), lambda g: (reshape(g, a.shape),), "reshape")


def flatten(a: Tensor, start: int = 1) -> Tensor:
    """Collapse all dimensions from ``start`` onward."""
    return reshape(a, a.shape[:start] + (-1,))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (transpose(g, inv),), "transpose")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            kshape = tuple(1 if i in axes else d for i, d in enumerate(a.shape))
            g = reshape(g, kshape)
        return (broadcast_to(g, a.shape),)

    return _make(np.asarray(data), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; fancy indexing is not supported."""
    data = np.array(a.data[index])
    return _make(data, (a,), lambda g: (scatter(g, index, a.shape),), "getitem")


def scatter(a: Tensor, index, shape: tuple) -> Tensor:
    """Place ``a`` at ``index`` inside a zero tensor of ``shape``."""
    data = np.zeros(shape)
    data[index] = a.data
    return _make(data, (a,), lambda g: (getitem(g, index),), "scatter")


# ------------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def backward(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv_fwd(x, w, stride, padding):
    win = _windows(x, w.shape[2], w.shape[3], stride, padding)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_bwd_input(g, w, in_shape, stride, padding):
    n, c, h, wd = in_shape
    kh, kw = w.shape[2:]
    ho, wo = g.shape[2:]
    cols = np.tensordot(g, w, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        xp = xp[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(xp)


def _conv_bwd_weight(x, g, w_shape, stride, padding):
    win = _windows(x, w_shape[2], w_shape[3], stride, padding)
    ho, wo = g.shape[2:]
    win = win[:, :, :ho, :wo]
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with kernels ``w`` (O,C,kh,kw)."""
    x, w = constant(x), constant(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape}, kernel {w.shape}")
    ho = _conv_out(x.shape[2], w.shape[2], stride, padding)
    wo = _conv_out(x.shape[3], w.shape[3], stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")
    data = _conv_fwd(x.data, w.data, stride, padding)

    def backward(g):
        gx = conv2d_input_grad(g, w, x.shape, stride, padding) if x.requires_grad else None
        gw = conv2d_weight_grad(x, g, w.shape, stride, padding) if w.requires_grad else None
        return gx, gw

    return _make(data, (x, w), backward, "conv2d")


def conv2d_input_grad(g: Tensor, w: Tensor, in_shape: tuple, stride: int = 1,
                      padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` in its input (a transposed convolution)."""
    g, w = constant(g), constant(w)
    in_shape = tuple(in_shape)
    data = _conv_bwd_input(g.data, w.data, in_shape, stride, padding)

    def backward(h):
        gg = conv2d(h, w, stride, padding) if g.requires_grad else None
        gw = conv2d_weight_grad(h, g, w.shape, stride, padding) if w.requires_grad else None
        return gg, gw

    return _make(data, (g, w), backward, "conv2d_input_grad")


def conv2d_weight_grad(x: Tensor, g: Tensor, w_shape: tuple, stride: int = 1,
                       padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` in its kernel."""
    x, g = constant(x), constant(g)
    w_shape = tuple(w_shape)
    data = _conv_bwd_weight(x.data, g.data, w_shape, stride, padding)

    def backward(h):
        gx = conv2d_input_grad(g, h, x.shape, stride, padding) if x.requires_grad else None
        gg = conv2d(x, h, stride, padding) if g.requires_grad else None
        return gx, gg

    return _make(data, (x, g), backward, "conv2d_weight_grad")


def avgpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avgpool2d: {x.shape} not divisible by {k}")
    data = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    return _make(data, (x,), lambda g: (scale(upsample2d(g, k), 1.0 / (k * k)),), "avgpool2d")


def upsample2d(x: Tensor, k: int) -> Tensor:
    """Nearest-neighbour upsampling by an integer factor."""
    data = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)
    return _make(data, (x,), lambda g: (scale(avgpool2d(g, k), float(k * k)),), "upsample2d")


# ---------------------------------------------------------------- reductions


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """Stable log-sum-exp along ``axis`` with the axis kept."""
    m = a.data.max(axis=axis, keepdims=True)
    data = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    out = None

    def backward(g):
        return (mul(broadcast_to(g, a.shape), exp(sub(a, out))),)

    out = _make(data, (a,), backward, "logsumexp")
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    return sub(a, logsumexp(a, axis))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """Mean cross-entropy ``-sum(y * log_softmax(z))`` over the batch.

    ``logits`` is (K,) or (N, K).  ``label`` is a class index, a sequence
    of indices (one per row), or a (possibly soft) distribution Tensor of
    the same shape as ``logits``.
    """
    logits = constant(logits)
    k = logits.shape[-1]
    if k < 2:
        raise ShapeError("softmax_cross_entropy needs at least 2 classes")
    if isinstance(label, Tensor):
        target = label
    else:
        idx = np.asarray(label, dtype=np.int64)
        if idx.ndim != logits.ndim - 1 or np.any(idx < 0) or np.any(idx >= k):
            raise ShapeError(f"labels {idx} incompatible with logits {logits.shape}")
        target = Tensor(np.eye(k)[idx])
    if target.shape != logits.shape:
        raise ShapeError(f"label shape {target.shape} vs logits {logits.shape}")
    batch = logits.shape[0] if logits.ndim == 2 else 1
    return scale(neg(tsum(mul(target, log_softmax(logits)))), 1.0 / batch)


# ------------------------------------------------------------ differentiation


def _collect(output: Tensor) -> list[Tensor]:
    seen = {id(output)}
    stack = [output]
    nodes = []
    while stack:
        node = stack.pop()
        nodes.append(node)
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    nodes.sort(key=lambda n: n._id)
    return nodes


def gradient(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Return d(output)/d(t) for every t in ``wrt``.

    With ``create_graph`` the returned tensors are themselves graph nodes and
    can be differentiated again.  A ``wrt`` tensor the output does not depend
    on raises :class:`GraphError` rather than silently yielding zeros.
    """
    if output.size != 1:
        raise GraphError(f"gradient() needs a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    if not output.requires_grad:
        raise GraphError("output is not connected to any tensor requiring grad")
    nodes = _collect(output)
    present = {id(n) for n in nodes}
    targets = {id(t) for t in wrt}
    missing = [i for i, t in enumerate(wrt) if id(t) not in present]
    if missing:
        raise GraphError(f"wrt tensors {missing} are not on the output's graph")

    # only propagate along nodes that lead to some wrt tensor
    needed = set()
    for n in nodes:
        if id(n) in targets or any(id(p) in needed for p in n._parents):
            needed.add(id(n))

    grads = {id(output): Tensor(np.ones(output.shape))}
    results = {}
    with _grad_mode(create_graph):
        for node in reversed(nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in targets:
                results[id(node)] = g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or id(p) not in needed:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    out = []
    for t in wrt:
        g = results.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape))
        elif g.shape != t.shape:
            g = reshape(g, t.shape)
        out.append(g)
    return out


def finite_difference_gradient(f: Callable, x, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    res = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(np.asarray(_value(f(Tensor(base.copy())))))
        flat[i] = orig - h
        fm = float(np.asarray(_value(f(Tensor(base.copy())))))
        flat[i] = orig
        res[i] = (fp - fm) / (2 * h)
    return Tensor(out)


def _value(v):
    return v.data if isinstance(v, Tensor) else v
