"""A small reverse-mode autodiff engine over float64 numpy arrays.

Each op returns a new :class:`Array` that remembers its parents and a closure
pushing the output adjoint back to them. ``backward`` walks the graph once in
reverse topological order.

Broadcasting is deliberately narrow: two operands must have equal shapes, or
one must be a scalar, or one's shape must equal the trailing axes of the
other's (broadcast over leading batch axes). Anything else is a ShapeError.
"""

from __future__ import annotations

import numpy as np

_DEBUG = False


def set_debug(flag: bool) -> None:
    """In debug mode every op checks its output for NaN/inf."""
    global _DEBUG
    _DEBUG = bool(flag)


class ShapeError(ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NonFiniteError(FloatingPointError):
    pass


class Array:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _op=""):
        if isinstance(data, np.ndarray) and data.dtype == np.float64:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = _op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Array{tag}(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other):
        if isinstance(other, Array):
            raise TypeError("division by an Array is not supported")
        return mul(self, 1.0 / other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return slice_(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_array(x) -> Array:
    return x if isinstance(x, Array) else Array(x)


def detach(x: Array) -> Array:
    return Array(x.data, requires_grad=False, name=x.name)


def _make(data, parents, op, backward):
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    rg = any(p.requires_grad for p in parents)
    out = Array(data, requires_grad=rg, _parents=parents if rg else (), _op=op)
    if rg:
        out._backward = backward
    return out


def _accum(node: Array, g):
    # Gradients may alias each other (e.g. both inputs of add receive the same
    # array), so accumulation is always out of place.
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = g if isinstance(g, np.ndarray) and g.shape == node.shape else np.broadcast_to(g, node.shape).copy()
    else:
        node.grad = node.grad + g


def _broadcast_check(op, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(op, sa, sb)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# elementwise binary ------------------------------------------------------

def add(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _broadcast_check("add", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _broadcast_check("sub", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, -_unbroadcast(g, b.shape))
    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _broadcast_check("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), "mul", bw)


def neg(a) -> Array:
    a = as_array(a)
    return _make(-a.data, (a,), "neg", lambda g: _accum(a, -g))


def scale(a, c: float) -> Array:
    a = as_array(a)
    c = float(c)
    return _make(a.data * c, (a,), "scale", lambda g: _accum(a, g * c))


def add_scalar(a, c: float) -> Array:
    a = as_array(a)
    return _make(a.data + float(c), (a,), "add_scalar", lambda g: _accum(a, g))


def power(a, p: float) -> Array:
    a = as_array(a)
    p = float(p)
    return _make(a.data ** p, (a,), "power", lambda g: _accum(a, g * p * a.data ** (p - 1.0)))


# elementwise unary -------------------------------------------------------

def relu(a) -> Array:
    a = as_array(a)
    y = np.maximum(a.data, 0.0)
    return _make(y, (a,), "relu", lambda g: _accum(a, g * (y > 0)))


def sin(a) -> Array:
    a = as_array(a)
    return _make(np.sin(a.data), (a,), "sin", lambda g: _accum(a, g * np.cos(a.data)))


def cos(a) -> Array:
    a = as_array(a)
    return _make(np.cos(a.data), (a,), "cos", lambda g: _accum(a, -g * np.sin(a.data)))


def exp(a) -> Array:
    a = as_array(a)
    y = np.exp(a.data)
    return _make(y, (a,), "exp", lambda g: _accum(a, g * y))


def log(a) -> Array:
    a = as_array(a)
    return _make(np.log(a.data), (a,), "log", lambda g: _accum(a, g / a.data))


def abs_(a) -> Array:
    a = as_array(a)
    return _make(np.abs(a.data), (a,), "abs", lambda g: _accum(a, g * np.sign(a.data)))


# reductions --------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand_back(g, shape, axes, keepdims):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Array:
    a = as_array(a)
    axes = _norm_axis(axis, a.ndim)

    def bw(g):
        _accum(a, _expand_back(np.asarray(g), a.shape, axes, keepdims))
    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), "sum", bw)


def mean(a, axis=None, keepdims=False) -> Array:
    a = as_array(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def bw(g):
        _accum(a, _expand_back(np.asarray(g), a.shape, axes, keepdims) / n)
    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), "mean", bw)


def variance(a, axis=None, keepdims=False) -> Array:
    """Population variance."""
    a = as_array(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    centered = a.data - a.data.mean(axis=axes, keepdims=True)

    def bw(g):
        _accum(a, _expand_back(np.asarray(g), a.shape, axes, keepdims) * (2.0 / n) * centered)
    return _make((centered ** 2).mean(axis=axes, keepdims=keepdims), (a,), "variance", bw)


# linear algebra ----------------------------------------------------------

def matmul(a, b) -> Array:
    """``a @ b``. Batch axes must match exactly unless ``b`` is a plain matrix."""
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
            b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, np.swapaxes(a.data, -1, -2) @ g)
    return _make(a.data @ b.data, (a, b), "matmul", bw)


def affine(x, w, b) -> Array:
    """``x @ w + b`` over the last axis of ``x``.

    Shared weights: ``w`` (in, out), ``b`` (out,), any leading axes on ``x``.
    Per-sample weights: ``x`` (B, ..., in), ``w`` (B, in, out), ``b`` (B, out);
    row i of the batch uses its own weight matrix and bias.
    """
    x, w, b = as_array(x), as_array(w), as_array(b)
    if w.ndim == 2:
        if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
            raise ShapeError("affine", x.shape, w.shape, b.shape)
        lead = x.shape[:-1]
        x2 = x.data.reshape(-1, w.shape[0])
        y = (x2 @ w.data + b.data).reshape(lead + (w.shape[1],))

        def bw(g):
            g2 = g.reshape(-1, w.shape[1])
            if x.requires_grad:
                _accum(x, (g2 @ w.data.T).reshape(x.shape))
            if w.requires_grad:
                _accum(w, x2.T @ g2)
            if b.requires_grad:
                _accum(b, g2.sum(axis=0))
        return _make(y, (x, w, b), "affine", bw)

    B = w.shape[0]
    if (w.ndim != 3 or x.shape[0] != B or x.shape[-1] != w.shape[1]
            or b.shape != (B, w.shape[2])):
        raise ShapeError("affine", x.shape, w.shape, b.shape)
    x3 = x.data.reshape(B, -1, w.shape[1])
    y = np.matmul(x3, w.data)
    y += b.data[:, None, :]
    y = y.reshape(x.shape[:-1] + (w.shape[2],))

    def bw_batched(g):
        g3 = g.reshape(B, -1, w.shape[2])
        if x.requires_grad:
            _accum(x, np.matmul(g3, np.swapaxes(w.data, 1, 2)).reshape(x.shape))
        if w.requires_grad:
            _accum(w, np.matmul(np.swapaxes(x3, 1, 2), g3))
        if b.requires_grad:
            _accum(b, g3.sum(axis=1))
    return _make(y, (x, w, b), "affine", bw_batched)


# normalization and softmax ----------------------------------------------

def layer_norm(x, gamma, beta, eps: float = 1e-8) -> Array:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``.

    ``gamma``/``beta`` are either shared (w,) or per-sample (B, w) for ``x`` of
    shape (B, ..., w).
    """
    x, gamma, beta = as_array(x), as_array(gamma), as_array(beta)
    w = x.shape[-1]
    per_sample = gamma.ndim == 2
    if gamma.shape != beta.shape or gamma.shape[-1] != w or (
            per_sample and (x.ndim < 2 or gamma.shape[0] != x.shape[0])) or gamma.ndim > 2:
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    # Row means as matrix-vector products over a 2-D view; much faster than
    # ufunc reductions along a short last axis.
    ones = np.full((w, 1), 1.0 / w)

    def rowmean(a):
        return (a.reshape(-1, w) @ ones).reshape(a.shape[:-1] + (1,))

    mu = rowmean(x.data)
    xc = x.data - mu
    inv = 1.0 / np.sqrt(rowmean(xc * xc) + eps)
    xhat = xc * inv
    if per_sample:
        mid = (1,) * (x.ndim - 2)
        g_ = gamma.data.reshape((gamma.shape[0],) + mid + (w,))
        b_ = beta.data.reshape(g_.shape)
    else:
        g_, b_ = gamma.data, beta.data
    y = xhat * g_ + b_

    def bw(g):
        if x.requires_grad:
            dxhat = g * g_
            dx = inv * (dxhat - rowmean(dxhat) - xhat * rowmean(dxhat * xhat))
            _accum(x, dx)
        red = tuple(range(1, x.ndim - 1)) if per_sample else tuple(range(x.ndim - 1))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=red))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=red))
    return _make(y, (x, gamma, beta), "layer_norm", bw)


def softmax(a) -> Array:
    a = as_array(a)
    y = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def bw(g):
        _accum(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))
    return _make(y, (a,), "softmax", bw)


def log_softmax(a) -> Array:
    a = as_array(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        _accum(a, g - p * g.sum(axis=-1, keepdims=True))
    return _make(y, (a,), "log_softmax", bw)


def cross_entropy(logits, labels) -> Array:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_array(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        _accum(logits, grad * (g / n))
    return _make(np.asarray(loss), (logits,), "cross_entropy", bw)


# structural ----------------------------------------------------------------

def concat(arrays, axis=0) -> Array:
    arrays = [as_array(a) for a in arrays]
    ref = arrays[0].shape
    ax = axis % len(ref)
    for a in arrays[1:]:
        if a.ndim != len(ref) or a.shape[:ax] + a.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError("concat", *[x.shape for x in arrays])
    bounds = np.cumsum([0] + [a.shape[ax] for a in arrays])

    def bw(g):
        for a, lo, hi in zip(arrays, bounds[:-1], bounds[1:]):
            if a.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _accum(a, g[tuple(idx)])
    return _make(np.concatenate([a.data for a in arrays], axis=ax), tuple(arrays), "concat", bw)


def stack(arrays, axis=0) -> Array:
    arrays = [as_array(a) for a in arrays]
    return concat([reshape(a, a.shape[:axis % (a.ndim + 1)] + (1,) + a.shape[axis % (a.ndim + 1):])
                   for a in arrays], axis=axis)


def slice_(a, idx) -> Array:
    """Basic (non-fancy) indexing."""
    a = as_array(a)
    if not isinstance(idx, tuple):
        idx = (idx,)
    for i in idx:
        if not (isinstance(i, (int, slice, np.integer)) or i is Ellipsis or i is None):
            raise TypeError(f"slice_: unsupported index {i!r}")
    out = a.data[idx]

    def bw(g):
        full = np.zeros(a.shape)
        full[idx] = g
        _accum(a, full)
    return _make(out, (a,), "slice", bw)


def take(a, indices, axis=0) -> Array:
    """Gather along ``axis`` with an integer index array."""
    a = as_array(a)
    indices = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim

    def bw(g):
        full = np.zeros(a.shape)
        np.add.at(full, (slice(None),) * ax + (indices,), g)
        _accum(a, full)
    return _make(np.take(a.data, indices, axis=ax), (a,), "take", bw)


def transpose(a, axes=None) -> Array:
    a = as_array(a)
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), "transpose", lambda g: _accum(a, g.transpose(inv)))


def reshape(a, shape) -> Array:
    a = as_array(a)
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: _accum(a, np.reshape(g, a.shape)))


def table_lookup(table, rows) -> Array:
    """Rows of a constant table (e.g. positional encodings); carries no gradient."""
    return Array(np.asarray(table, dtype=np.float64)[rows])


# backward -------------------------------------------------------------------

def _topo(root: Array):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Array) -> dict:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns ``{leaf: grad}``. Interior nodes' grads are released afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones(loss.shape)
    leaves = {}
    for node in reversed(order):
        if node._parents:
            if node.grad is not None:
                node._backward(node.grad)
            node.grad = None
        elif node.grad is not None:
            leaves[node] = node.grad
    return leaves


def zero_grad(params) -> None:
    for p in params:
        p.grad = None
