"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Design rules, enforced rather than documented away:

* shapes are strict: binary operations never broadcast, except a plain
  Python scalar against a tensor;
* a computation graph is single-use: ``backward()`` consumes it and a
  second call raises :class:`GraphConsumedError`;
* tensors with ``requires_grad=False`` never receive a gradient buffer.

Precision is configurable per tensor (float64 for verification work,
float32 for training).
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_SUPPORTED = (np.float32, np.float64)


class GraphConsumedError(RuntimeError):
    """backward() was called on a graph that has already been walked."""


class GraphNode:
    """One recorded operation: its inputs and the rule to push gradients back."""

    __slots__ = ("op", "parents", "backward_fn", "consumed")

    def __init__(self, op: str, parents: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """Dense n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _SUPPORTED:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[GraphNode] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")

    # arithmetic sugar; all graph recording happens in the module functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; "
                            "use a dedicated op")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def sum(self, axes=None):
        return reduce("sum", self, axes)

    def mean(self, axes=None):
        return reduce("mean", self, axes)

    def backward(self):
        backward(self)


def from_op(data: np.ndarray, op: str, parents: Sequence[Tensor],
            backward_fn) -> Tensor:
    """Wrap an op result, recording a graph edge when any input is tracked."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = GraphNode(op, parents, backward_fn)
    return out


def _as_operand(other, like: Tensor):
    """Return (value, is_tensor) where value is ndarray or a dtype scalar."""
    if isinstance(other, Tensor):
        if other.shape != like.shape:
            raise ValueError(
                f"shape mismatch: {like.shape} vs {other.shape}; "
                "implicit broadcasting is disabled")
        if other.dtype != like.dtype:
            raise TypeError(f"dtype mismatch: {like.dtype} vs {other.dtype}")
        return other, True
    if isinstance(other, (int, float, np.integer, np.floating)):
        return like.dtype.type(other), False
    raise TypeError(f"unsupported operand type {type(other)!r}")


def add(a: Tensor, b) -> Tensor:
    b_val, b_is_tensor = _as_operand(b, a)
    if b_is_tensor:
        out = a.data + b_val.data

        def back(g):
            return g, g

        return from_op(out, "add", (a, b_val), back)
    out = a.data + b_val

    def back(g):
        return (g,)

    return from_op(out, "add", (a,), back)


def sub(a: Tensor, b) -> Tensor:
    b_val, b_is_tensor = _as_operand(b, a)
    if b_is_tensor:
        out = a.data - b_val.data

        def back(g):
            return g, -g

        return from_op(out, "sub", (a, b_val), back)
    out = a.data - b_val

    def back(g):
        return (g,)

    return from_op(out, "sub", (a,), back)


def mul(a: Tensor, b) -> Tensor:
    b_val, b_is_tensor = _as_operand(b, a)
    if b_is_tensor:
        a_data, b_data = a.data, b_val.data
        out = a_data * b_data

        def back(g):
            return g * b_data, g * a_data

        return from_op(out, "mul", (a, b_val), back)
    out = a.data * b_val

    def back(g):
        return (g * b_val,)

    return from_op(out, "mul", (a,), back)


def neg(a: Tensor) -> Tensor:
    def back(g):
        return (-g,)

    return from_op(-a.data, "neg", (a,), back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, a.dtype.type(0))

    def back(g):
        return (g * mask,)

    return from_op(out, "relu", (a,), back)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive inputs; "
                         "clamp first on probability paths")
    a_data = a.data

    def back(g):
        return (g / a_data,)

    return from_op(np.log(a_data), "log", (a,), back)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def back(g):
        return (g * out,)

    return from_op(out, "exp", (a,), back)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "neg": neg,
                "relu": relu, "log": log, "exp": exp}
_BINARY = {"add", "sub", "mul"}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch an elementwise op by name; binary ops require equal shapes."""
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op!r} needs two operands")
        return _ELEMENTWISE[op](a, b)
    if b is not None:
        raise ValueError(f"{op!r} is unary")
    return _ELEMENTWISE[op](a)


def _normalize_axes(axes, ndim: int):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    axes = tuple(int(ax) for ax in axes)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} invalid for ndim {ndim}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise ValueError("duplicate axes")
    return tuple(sorted(norm))


def reduce(op: str, a: Tensor, axes=None) -> Tensor:
    """Sum or mean over the given axes (all axes when None)."""
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduce op {op!r}")
    norm = _normalize_axes(axes, a.ndim)
    if len(norm) == 0:
        # empty axis selection reduces nothing
        def back_id(g):
            return (g,)

        return from_op(a.data.copy(), op, (a,), back_id)
    count = 1
    for ax in norm:
        count *= a.shape[ax]
    out = a.data.sum(axis=norm)
    if op == "mean":
        out = out / a.dtype.type(count)
    in_shape = a.shape
    keep_shape = tuple(1 if i in norm else s for i, s in enumerate(in_shape))
    scale = a.dtype.type(1.0 / count) if op == "mean" else None

    def back(g):
        g_full = np.broadcast_to(g.reshape(keep_shape), in_shape)
        if scale is not None:
            return (g_full * scale,)
        return (g_full.copy(),)

    return from_op(out, op, (a,), back)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (axis 1); other extents must match."""
    inputs = list(inputs)
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    first = inputs[0]
    if first.ndim < 2:
        raise ValueError("concat_channels expects at least 2-d tensors")
    for t in inputs[1:]:
        if t.ndim != first.ndim:
            raise ValueError("rank mismatch in concat_channels")
        if t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ValueError(
                f"spatial mismatch in concat_channels: {t.shape} vs {first.shape}")
        if t.dtype != first.dtype:
            raise TypeError("dtype mismatch in concat_channels")
    out = np.concatenate([t.data for t in inputs], axis=1)
    sizes = [t.shape[1] for t in inputs]

    def back(g):
        grads = []
        start = 0
        for c in sizes:
            grads.append(g[:, start:start + c])
            start += c
        return tuple(grads)

    return from_op(out, "concat", inputs, back)


def split_channels(a: Tensor, sizes: Sequence[int]) -> list:
    """Split along the channel axis into chunks of the given sizes."""
    if sum(sizes) != a.shape[1]:
        raise ValueError(f"split sizes {sizes} do not cover {a.shape[1]} channels")
    outs = []
    start = 0
    for c in sizes:
        sl = slice(start, start + c)
        piece = a.data[:, sl].copy()

        def back(g, sl=sl):
            full = np.zeros_like(a.data)
            full[:, sl] = g
            return (full,)

        outs.append(from_op(piece, "split", (a,), back))
        start += c
    return outs


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if t.node.consumed:
                raise GraphConsumedError(
                    "backward() on a consumed graph; rebuild the forward pass")
            for p in reversed(t.node.parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate dLoss/dTensor on every reachable requires_grad tensor.

    The loss must be scalar. Gradients accumulate additively across
    multiple uses of the same tensor within the graph, and across calls
    until ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
        return
    order = _toposort(loss)
    flowing = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = flowing.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g
        node = t.node
        if node is None:
            continue
        node.consumed = True
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


def grad_check(f, x: Tensor, h: float = 1e-5, entries: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> float:
    """Compare analytic gradients of a scalar function against central
    finite differences (f(x+h)-f(x-h))/2h.

    Returns max over checked elements of
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    `entries` caps how many coordinates are probed (all by default).
    f must be deterministic; this is checked with a repeated evaluation.
    """
    v1 = float(f(x).data.reshape(()))
    v2 = float(f(x).data.reshape(()))
    if v1 != v2:
        raise ValueError("grad_check requires a deterministic function")
    x.grad = None
    y = f(x)
    if y.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    n = x.data.size
    if entries is None or entries >= n:
        idxs = np.arange(n)
    else:
        gen = rng if rng is not None else np.random.default_rng(0)
        idxs = gen.choice(n, size=entries, replace=False)
    flat = x.data.reshape(-1)
    aflat = analytic.reshape(-1)
    worst = 0.0
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data.reshape(()))
        flat[i] = orig - h
        fm = float(f(x).data.reshape(()))
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        a = float(aflat[i])
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        if err > worst:
            worst = err
    return worst
