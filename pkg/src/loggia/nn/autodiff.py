"""Reverse-mode automatic differentiation over dense float64 arrays.

Broadcasting is limited to what the policy needs: scalars, and a
trailing-dimension vector added to every row of a matrix.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g):
        if not self.requires_grad:
            return
        # gradients are never modified in place, so arrays may be shared between tensors
        if self.grad is None:
            self.grad = np.asarray(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable tensor that requires grad."""
        order = []
        seen = set()
        stack = [(self, False)]
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
        self._accum(np.ones_like(self.data) if grad is None else grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # intermediate gradients are not needed after propagation
                    node.grad = None if node is not self else node.grad

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, parents if req else (), backward if req else None)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    # row-vector bias broadcast over leading axes
    return g.reshape(-1, *shape).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(-g)

    return _make(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / b.data ** 2, b.shape))

    return _make(out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _make(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` as a single node."""
    out = x.data @ w.data + b.data

    def backward(g):
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            w._accum(x.data.T @ g)
        if b.requires_grad:
            b._accum(g.sum(axis=0))

    return _make(out, (x, w, b), backward)


def concat(parts, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        for p, gp in zip(parts, np.split(g, sizes, axis=axis)):
            p._accum(gp)

    return _make(out, parts, backward)


def column(a: Tensor, j: int) -> Tensor:
    out = a.data[:, j]

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, j] = g
        a._accum(full)

    return _make(out, (a,), backward)


def sum_(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape))
        else:
            a._accum(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make(out, (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def square(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(2.0 * a.data * g)

    return _make(a.data ** 2, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        a._accum(g * out)

    return _make(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        a._accum(g / (1.0 + np.exp(-a.data)))

    return _make(out, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)

    def backward(g):
        a._accum(np.where(pos, g, slope * g))

    return _make(out, (a,), backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def backward(g):
        a._accum(_unbroadcast(np.where(take_a, g, 0.0), a.shape))
        b._accum(_unbroadcast(np.where(take_a, 0.0, g), b.shape))

    return _make(out, (a, b), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def backward(g):
        a._accum(_unbroadcast(np.where(take_a, g, 0.0), a.shape))
        b._accum(_unbroadcast(np.where(take_a, 0.0, g), b.shape))

    return _make(out, (a, b), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        a._accum(np.where(inside, g, 0.0))

    return _make(np.clip(a.data, lo, hi), (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise normalization to zero mean and unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            d = x.shape[-1]
            x._accum(inv / d * (d * gx - gx.sum(axis=-1, keepdims=True)
                                - xhat * (gx * xhat).sum(axis=-1, keepdims=True)))

    return _make(out, (x, gain, bias), backward)


def scatter_rows(values: np.ndarray, index: np.ndarray, num: int) -> np.ndarray:
    """``out[k] = sum of values[i] with index[i] == k``."""
    if values.ndim == 1:
        return np.bincount(index, values, num).astype(np.float64)
    flat = values.reshape(len(index), -1)
    c = flat.shape[1]
    idx = (index[:, None] * c + np.arange(c)).ravel()
    return np.bincount(idx, flat.ravel(), num * c).reshape((num,) + values.shape[1:])


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``a[index]``; the backward pass scatter-adds into ``a``."""
    index = np.asarray(index, dtype=np.int64)
    out = a.data[index]

    def backward(g):
        a._accum(scatter_rows(g, index, a.shape[0]))

    return _make(out, (a,), backward)


def scatter_add(a: Tensor, index: np.ndarray, num_segments: int) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    out = scatter_rows(a.data, index, num_segments)

    def backward(g):
        a._accum(g[index])

    return _make(out, (a,), backward)


class Segments:
    """Precomputed grouping of rows by segment id, used by the segment reductions."""

    def __init__(self, index, num_segments: int):
        self.index = np.asarray(index, dtype=np.int64)
        self.num = num_segments
        self.counts = np.bincount(self.index, minlength=num_segments)
        self.nonempty = self.counts > 0
        self._padded = None

    @property
    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        """``(rows, valid)`` of shape (num, max count): member rows in ascending order, padded."""
        if self._padded is None:
            order = np.argsort(self.index, kind="stable")
            width = int(self.counts.max()) if len(self.index) else 0
            starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])
            rank = np.arange(len(order)) - starts[self.index[order]]
            rows = np.zeros((self.num, width), dtype=np.int64)
            valid = np.zeros((self.num, width), dtype=bool)
            rows[self.index[order], rank] = order
            valid[self.index[order], rank] = True
            self._padded = (rows, valid)
        return self._padded


def segment_mean(a: Tensor, seg: Segments) -> Tensor:
    total = scatter_rows(a.data, seg.index, seg.num)
    denom = np.maximum(seg.counts, 1).reshape(-1, *([1] * (a.data.ndim - 1)))
    out = total / denom

    def backward(g):
        a._accum((g / denom)[seg.index])

    return _make(out, (a,), backward)


def _segment_extreme(a: Tensor, seg: Segments, largest: bool) -> Tensor:
    data = a.data
    n = data.shape[0]
    rows, valid = seg.padded
    shape = (seg.num,) + data.shape[1:]
    if rows.shape[1] == 0:
        out, arg = np.zeros(shape), np.full(shape, n)
    else:
        fill = -np.inf if largest else np.inf
        mask = valid.reshape(valid.shape + (1,) * (data.ndim - 1))
        vals = np.where(mask, data[rows], fill)
        # first position among ties is the lowest row index, since rows are ascending
        pos = vals.argmax(axis=1) if largest else vals.argmin(axis=1)
        pos = np.expand_dims(pos, 1)
        out = np.take_along_axis(vals, pos, axis=1)[:, 0]
        arg = np.take_along_axis(np.broadcast_to(rows.reshape(rows.shape + (1,) * (data.ndim - 1)), vals.shape),
                                 pos, axis=1)[:, 0]
        empty = ~seg.nonempty
        out[empty] = 0.0
        arg[empty] = n

    def backward(g):
        # every row belongs to one segment, so the argument positions never collide
        full = np.zeros((n + 1,) + data.shape[1:])
        if data.ndim > 1:
            full[arg, np.arange(data.shape[1])] = g
        else:
            full[arg] = g
        a._accum(full[:n])

    return _make(out, (a,), backward)


def segment_min(a: Tensor, seg: Segments) -> Tensor:
    """Per-segment column-wise minimum (0 for empty segments); gradient goes to the lowest-index argmin."""
    return _segment_extreme(a, seg, False)


def segment_max(a: Tensor, seg: Segments) -> Tensor:
    """Per-segment column-wise maximum (0 for empty segments); gradient goes to the lowest-index argmax."""
    return _segment_extreme(a, seg, True)
