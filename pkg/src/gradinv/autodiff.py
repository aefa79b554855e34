"""Reverse-mode automatic differentiation on dense float64 arrays.

Every op records itself on an append-only :class:`Graph` (a tape). Adjoints
are written with the same differentiable ops, so a gradient computed with
``create_graph=True`` is itself on the tape and can be differentiated again.
That second-order path is what gradient matching needs: the attack loss
contains a parameter gradient and is minimised over the input.

Typical use::

    g = Graph()
    x = g.leaf(np.array([1.0, 2.0, 3.0]))
    loss = (x * x).sum()
    (dx,) = backward(loss, [x])          # -> [2, 4, 6]
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Sequence

import numpy as np

__all__ = [
    "AutodiffError", "ShapeError", "UnsupportedOpError",
    "Graph", "Tensor", "Op", "backward", "hvp", "no_record", "as_tensor",
    "add", "sub", "mul", "div", "neg", "scale", "power", "exp", "log",
    "relu", "sigmoid", "abs_", "matmul", "transpose", "reshape", "flatten",
    "sum_", "mean", "broadcast_to", "sum_to", "logsumexp", "log_softmax",
    "softmax", "softmax_cross_entropy", "l2_norm", "inner_product",
    "im2col", "col2im", "conv2d", "avgpool2d", "batchnorm_train", "getitem",
]


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class UnsupportedOpError(AutodiffError):
    """Raised when a second-order backward meets an op with no differentiable adjoint."""


_state = threading.local()


def _is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def _recording(flag: bool):
    prev = _is_recording()
    _state.recording = flag
    try:
        yield
    finally:
        _state.recording = prev


def no_record():
    """Context in which ops compute values but never touch any graph."""
    return _recording(False)


class Node:
    __slots__ = ("graph", "index", "op", "parents", "out")

    def __init__(self, graph, index, op, parents):
        self.graph = graph
        self.index = index
        self.op = op
        self.parents = parents
        self.out = None


class Graph:
    """Append-only tape. Insertion order is a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, parents) -> Node:
        node = Node(self, len(self.nodes), op, parents)
        self.nodes.append(node)
        return node

    def release(self) -> None:
        """Drop every node's links so the tape's arrays are freed at once.

        Nodes and their output tensors point at each other, so a finished
        graph is cyclic garbage; without this it waits for a full collection.
        Tensors already handed out keep their data.
        """
        for n in self.nodes:
            n.parents, n.out, n.op = (), None, None
        self.nodes = []

    def leaf(self, value) -> "Tensor":
        t = Tensor(np.array(value, dtype=np.float64))
        node = self._append(None, ())
        node.out = t
        t.node = node
        return t


class Tensor:
    __slots__ = ("data", "node")
    __array_priority__ = 1000

    def __init__(self, data, node: Node | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", node={self.node.index}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)
    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)
    @property
    def T(self): return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Op:
    """An operation's adjoint. Subclasses implement ``vjp``.

    ``vjp(node, g, needs)`` returns one gradient per parent (``None`` where
    ``needs`` is False). Set ``second_order = False`` for ops whose adjoint is
    computed outside the tape; backward with ``create_graph`` then refuses them.
    """

    name = "op"
    second_order = True

    def vjp(self, node: Node, g: Tensor, needs: tuple[bool, ...]):
        raise NotImplementedError


def _apply(op: Op, data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor(data)
    if not _is_recording():
        return out
    graph = None
    for p in parents:
        if p.node is not None:
            if graph is None:
                graph = p.node.graph
            elif p.node.graph is not graph:
                raise AutodiffError(f"{op.name}: inputs belong to different graphs")
    if graph is not None:
        node = graph._append(op, parents)
        node.out = out
        out.node = node
    return out


def _sum_to_array(a: np.ndarray, shape) -> np.ndarray:
    if a.shape == tuple(shape):
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1)
    out = a.sum(axis=axes, keepdims=True)
    if lead:
        out = out.reshape(out.shape[lead:])
    return out.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

class _Add(Op):
    name = "add"

    def vjp(self, node, g, needs):
        a, b = node.parents
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)


class _Sub(Op):
    name = "sub"

    def vjp(self, node, g, needs):
        a, b = node.parents
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(neg(g), b.shape) if needs[1] else None)


class _Mul(Op):
    name = "mul"

    def vjp(self, node, g, needs):
        a, b = node.parents
        return (sum_to(mul(g, b), a.shape) if needs[0] else None,
                sum_to(mul(g, a), b.shape) if needs[1] else None)


class _Div(Op):
    name = "div"

    def vjp(self, node, g, needs):
        a, b = node.parents
        ga = sum_to(div(g, b), a.shape) if needs[0] else None
        gb = sum_to(neg(div(mul(g, node.out), b)), b.shape) if needs[1] else None
        return ga, gb


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _apply(_Add(), a.data + b.data, (a, b))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _apply(_Sub(), a.data - b.data, (a, b))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _apply(_Mul(), a.data * b.data, (a, b))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    return _apply(_Div(), a.data / b.data, (a, b))


class _Scale(Op):
    name = "scale"

    def __init__(self, c):
        self.c = c

    def vjp(self, node, g, needs):
        return (scale(g, self.c),)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar."""
    a = as_tensor(a)
    return _apply(_Scale(float(c)), a.data * float(c), (a,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


class _Power(Op):
    name = "power"

    def __init__(self, p):
        self.p = p

    def vjp(self, node, g, needs):
        (a,) = node.parents
        return (mul(g, scale(power(a, self.p - 1.0), self.p)),)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    if p == 1.0:
        return a
    return _apply(_Power(float(p)), a.data ** float(p), (a,))


class _Exp(Op):
    name = "exp"

    def vjp(self, node, g, needs):
        return (mul(g, node.out),)


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _apply(_Exp(), np.exp(a.data), (a,))


class _Log(Op):
    name = "log"

    def vjp(self, node, g, needs):
        return (div(g, node.parents[0]),)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _apply(_Log(), np.log(a.data), (a,))


class _Relu(Op):
    name = "relu"

    def vjp(self, node, g, needs):
        # relu'(0) := 0; the mask is piecewise constant so its own derivative is 0
        mask = Tensor((node.parents[0].data > 0).astype(np.float64))
        return (mul(g, mask),)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _apply(_Relu(), np.maximum(a.data, 0.0), (a,))


class _Sigmoid(Op):
    name = "sigmoid"

    def vjp(self, node, g, needs):
        s = node.out
        return (mul(g, mul(s, sub(1.0, s))),)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _apply(_Sigmoid(), out, (a,))


class _Abs(Op):
    name = "abs"

    def vjp(self, node, g, needs):
        return (mul(g, Tensor(np.sign(node.parents[0].data))),)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _apply(_Abs(), np.abs(a.data), (a,))


# ---------------------------------------------------------------- shape ops

class _Matmul(Op):
    name = "matmul"

    def vjp(self, node, g, needs):
        a, b = node.parents
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)


def matmul(a, b) -> Tensor:
    """2-D matrix product, or matrix @ vector when ``b`` is 1-D."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), (a.shape[0],))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _apply(_Matmul(), a.data @ b.data, (a, b))


class _Transpose(Op):
    name = "transpose"

    def __init__(self, axes):
        self.axes = axes

    def vjp(self, node, g, needs):
        inv = None if self.axes is None else tuple(np.argsort(self.axes))
        return (transpose(g, inv),)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = None if axes is None else tuple(axes)
    return _apply(_Transpose(axes), np.transpose(a.data, axes), (a,))


class _Reshape(Op):
    name = "reshape"

    def vjp(self, node, g, needs):
        return (reshape(g, node.parents[0].shape),)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    if data.shape == a.shape:
        return a
    return _apply(_Reshape(), data, (a,))


def flatten(a) -> Tensor:
    """(b, ...) -> (b, prod(...))."""
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


class _Sum(Op):
    name = "sum"

    def __init__(self, axis, keepdims):
        self.axis = axis
        self.keepdims = keepdims

    def vjp(self, node, g, needs):
        shape = node.parents[0].shape
        if not self.keepdims and self.axis is not None:
            axes = self.axis if isinstance(self.axis, tuple) else (self.axis,)
            axes = tuple(ax % len(shape) for ax in axes)
            kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
            g = reshape(g, kept)
        return (broadcast_to(g, shape),)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if isinstance(axis, list):
        axis = tuple(axis)
    return _apply(_Sum(axis, keepdims), np.sum(a.data, axis=axis, keepdims=keepdims), (a,))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, (tuple, list)) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


class _BroadcastTo(Op):
    name = "broadcast_to"

    def vjp(self, node, g, needs):
        return (sum_to(g, node.parents[0].shape),)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _apply(_BroadcastTo(), data, (a,))


class _SumTo(Op):
    name = "sum_to"

    def vjp(self, node, g, needs):
        return (broadcast_to(g, node.parents[0].shape),)


def sum_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _apply(_SumTo(), _sum_to_array(a.data, shape), (a,))


class _GetItem(Op):
    name = "getitem"

    def __init__(self, index):
        self.index = index

    def vjp(self, node, g, needs):
        return (_scatter(g, self.index, node.parents[0].shape),)


class _Scatter(Op):
    name = "scatter"

    def __init__(self, index):
        self.index = index

    def vjp(self, node, g, needs):
        return (getitem(g, self.index),)


def _check_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    for it in items:
        if not (isinstance(it, (slice, int)) or it is Ellipsis or it is None):
            raise AutodiffError("getitem: only basic (slice/int) indexing is differentiable")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    _check_basic_index(index)
    return _apply(_GetItem(index), a.data[index].copy(), (a,))


def _scatter(g, index, shape) -> Tensor:
    g = as_tensor(g)
    out = np.zeros(shape)
    out[index] = g.data
    return _apply(_Scatter(index), out, (g,))


# ---------------------------------------------------------------- reductions / losses

class _LogSumExp(Op):
    name = "logsumexp"

    def __init__(self, axis):
        self.axis = axis

    def vjp(self, node, g, needs):
        (a,) = node.parents
        return (mul(g, exp(sub(a, node.out))),)


def logsumexp(a, axis=-1) -> Tensor:
    """Stable log-sum-exp, keepdims along ``axis``."""
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    data = m + np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True))
    return _apply(_LogSumExp(axis), data, (a,))


def log_softmax(a, axis=-1) -> Tensor:
    return sub(a, logsumexp(a, axis))


def softmax(a, axis=-1) -> Tensor:
    return exp(log_softmax(a, axis))


def softmax_cross_entropy(logits, target) -> Tensor:
    """Mean cross-entropy over the batch.

    ``target`` is either an integer label array of shape (b,) or a
    probability matrix (b, classes) -- a Tensor when soft labels are
    themselves being optimised.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    b, c = logits.shape
    if isinstance(target, Tensor) or np.asarray(target).ndim == 2:
        probs = as_tensor(target)
        if probs.shape != logits.shape:
            raise ShapeError(
                f"softmax_cross_entropy: logits {logits.shape} vs targets {probs.shape}")
    else:
        y = np.asarray(target)
        if y.shape != (b,):
            raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {y.shape}")
        if y.size and (y.min() < 0 or y.max() >= c):
            raise ValueError(f"label out of range [0, {c})")
        onehot = np.zeros((b, c))
        onehot[np.arange(b), y.astype(int)] = 1.0
        probs = Tensor(onehot)
    return scale(sum_(mul(probs, log_softmax(logits, axis=1))), -1.0 / b)


def inner_product(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"inner_product: shapes {a.shape} and {b.shape} differ")
    return sum_(mul(a, b))


def l2_norm(a) -> Tensor:
    return power(inner_product(a, a), 0.5)


# ---------------------------------------------------------------- convolution

def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col_array(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    oh, ow = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((b, oh, ow, c, kh, kw))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, :, i, j] = xp[:, :, i:i + stride * oh:stride,
                                        j:j + stride * ow:stride].transpose(0, 2, 3, 1)
    return cols.reshape(b * oh * ow, c * kh * kw)


def _col2im_array(cols, xshape, kh, kw, stride, pad):
    b, c, h, w = xshape
    oh, ow = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    cols = cols.reshape(b, oh, ow, c, kh, kw)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return xp[:, :, pad:pad + h, pad:pad + w]


class _Im2Col(Op):
    name = "im2col"

    def __init__(self, kh, kw, stride, pad):
        self.args = (kh, kw, stride, pad)

    def vjp(self, node, g, needs):
        return (col2im(g, node.parents[0].shape, *self.args),)


class _Col2Im(Op):
    name = "col2im"

    def __init__(self, kh, kw, stride, pad):
        self.args = (kh, kw, stride, pad)

    def vjp(self, node, g, needs):
        return (im2col(g, *self.args),)


def im2col(x, kh, kw, stride=1, pad=0) -> Tensor:
    """(b, c, h, w) -> (b*oh*ow, c*kh*kw) patch matrix."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col: input must be (batch, channels, H, W), got {x.shape}")
    return _apply(_Im2Col(kh, kw, stride, pad), _im2col_array(x.data, kh, kw, stride, pad), (x,))


def col2im(cols, xshape, kh, kw, stride=1, pad=0) -> Tensor:
    cols = as_tensor(cols)
    data = _col2im_array(cols.data, tuple(xshape), kh, kw, stride, pad)
    return _apply(_Col2Im(kh, kw, stride, pad), data, (cols,))


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation lowered to a single matmul over im2col patches."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    b, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels, weight {weight.shape} expects {ci}")
    oh, ow = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    cols = im2col(x, kh, kw, stride, padding)
    out = matmul(cols, transpose(reshape(weight, (o, ci * kh * kw))))
    if bias is not None:
        out = add(out, bias)
    return transpose(reshape(out, (b, oh, ow, o)), (0, 3, 1, 2))


def avgpool2d(x, k: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d: input must be 4-D, got {x.shape}")
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avgpool2d: spatial dims {(h, w)} not divisible by window {k}")
    return mean(reshape(x, (b, c, h // k, k, w // k, k)), axis=(3, 5))


def batchnorm_train(x, gamma, beta, mean_=None, var=None, eps: float = 1e-5):
    """Normalise per channel (axis 1) and apply the affine map.

    With ``mean_``/``var`` omitted the batch statistics of ``x`` are used
    (biased variance). Returns ``(out, mean, var)``; the statistics are
    tensors on the tape when computed from ``x``.
    """
    x = as_tensor(x)
    if x.ndim not in (2, 4):
        raise ShapeError(f"batchnorm_train: input must be 2-D or 4-D, got {x.shape}")
    c = x.shape[1]
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    if mean_ is None:
        mu = mean(x, axis=axes)
        centered = sub(x, reshape(mu, bshape))
        v = mean(mul(centered, centered), axis=axes)
    else:
        mu, v = as_tensor(mean_), as_tensor(var)
        if mu.shape != (c,) or v.shape != (c,):
            raise ShapeError(f"batchnorm_train: statistics {mu.shape}/{v.shape} do not match {c} channels")
        centered = sub(x, reshape(mu, bshape))
    inv = power(add(v, eps), -0.5)
    out = mul(centered, reshape(inv, bshape))
    out = add(mul(out, reshape(as_tensor(gamma), bshape)), reshape(as_tensor(beta), bshape))
    return out, mu, v


# ---------------------------------------------------------------- backward

def backward(loss: Tensor, leaves: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``loss`` with respect to each of ``leaves``, in order.

    With ``create_graph`` the returned gradients live on the same graph and
    can be differentiated again.
    """
    if loss.node is None:
        raise AutodiffError("backward: loss is detached from any graph")
    if loss.data.size != 1:
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.shape}")
    graph = loss.node.graph
    top = loss.node.index
    targets = {}
    for i, leaf in enumerate(leaves):
        if leaf.node is None or leaf.node.graph is not graph or leaf.node.index > top:
            raise AutodiffError(f"backward: leaf {i} {leaf!r} is not part of the loss graph")
        if leaf.node.index in targets:
            raise AutodiffError(f"backward: leaf {i} requested twice")
        targets[leaf.node.index] = i
    if not targets:
        return []
    nodes = graph.nodes
    lo = min(targets)

    # nodes downstream of a requested leaf; only those carry useful adjoints
    req = bytearray(top + 1)
    for idx in targets:
        req[idx] = 1
    for j in range(lo, top + 1):
        n = nodes[j]
        if n.op is not None and not req[j]:
            for p in n.parents:
                if p.node is not None and req[p.node.index]:
                    req[j] = 1
                    break

    result: list[Tensor | None] = [None] * len(leaves)
    if req[top]:
        adj = {top: Tensor(np.ones_like(loss.data))}
        with _recording(create_graph):
            for j in range(top, lo - 1, -1):
                g = adj.pop(j, None)
                if g is None:
                    continue
                n = nodes[j]
                if j in targets:
                    result[targets[j]] = g
                if n.op is None:
                    continue
                if create_graph and not n.op.second_order:
                    raise UnsupportedOpError(
                        f"op '{n.op.name}' has no differentiable adjoint; "
                        "second-order backward through it is not supported")
                needs = tuple(p.node is not None and req[p.node.index] == 1 for p in n.parents)
                if not any(needs):
                    continue
                grads = n.op.vjp(n, g, needs)
                for p, need, pg in zip(n.parents, needs, grads):
                    if not need:
                        continue
                    k = p.node.index
                    prev = adj.get(k)
                    adj[k] = pg if prev is None else add(prev, pg)
    for i, leaf in enumerate(leaves):
        if result[i] is None:
            result[i] = Tensor(np.zeros_like(leaf.data))
        elif result[i].shape != leaf.shape:
            raise AutodiffError(
                f"backward: gradient shape {result[i].shape} != leaf shape {leaf.shape}")
    return result


def hvp(loss: Tensor, leaf: Tensor, v) -> Tensor:
    """Hessian-vector product H @ v of ``loss`` at ``leaf``."""
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    if v.shape != leaf.shape:
        raise ShapeError(f"hvp: v shape {v.shape} != leaf shape {leaf.shape}")
    (g,) = backward(loss, [leaf], create_graph=True)
    s = inner_product(g, Tensor(v))
    if s.node is None:  # gradient is constant in the leaf
        return Tensor(np.zeros_like(leaf.data))
    (hv,) = backward(s, [leaf])
    return hv
