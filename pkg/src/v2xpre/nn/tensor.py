"""Dense float64 tensors with reverse-mode differentiation.

Every op checks its output for NaN/Inf. Gradients flow through a graph of
parent links; ``backward`` walks it in reverse topological order.
"""
from __future__ import annotations

import contextlib

import numpy as np


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    return data


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self, params=(), retain_graph=False):
        backward(self, params, retain_graph)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def sum(self, axis=None):
        return sum_over_axis(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    _finite(data, op)
    parents = tuple(parents)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, True, parents, backward_fn, op)


def _acc(t: Tensor, g, fresh: bool = False):
    """Accumulate ``g`` into ``t.grad``; ``fresh`` means no one else holds ``g``."""
    if not t.requires_grad:
        return
    if t.grad is None:
        if fresh and g.dtype == np.float64 and g.flags.writeable and g.shape == t.data.shape:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.data.shape)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    out = None

    def bw():
        if a.requires_grad:
            _acc(a, _unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(out.grad, b.shape))

    out = _make(a.data + b.data, (a, b), bw, "add")
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    out = None

    def bw():
        if a.requires_grad:
            _acc(a, _unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            _acc(b, -_unbroadcast(out.grad, b.shape), True)

    out = _make(a.data - b.data, (a, b), bw, "sub")
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    out = None

    def bw():
        if a.requires_grad:
            _acc(a, _unbroadcast(out.grad * b.data, a.shape), True)
        if b.requires_grad:
            _acc(b, _unbroadcast(out.grad * a.data, b.shape), True)

    out = _make(a.data * b.data, (a, b), bw, "mul")
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = None

    def bw():
        _acc(x, out.grad * (x.data > 0), True)

    out = _make(np.maximum(x.data, 0.0), (x,), bw, "relu")
    return out


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    out = None

    def bw():
        _acc(x, out.grad * (1.0 - y * y))

    out = _make(y, (x,), bw, "tanh")
    return out


def sigmoid_np(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = sigmoid_np(x.data)
    out = None

    def bw():
        _acc(x, out.grad * y * (1.0 - y))

    out = _make(y, (x,), bw, "sigmoid")
    return out


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    out = None

    def bw():
        _acc(x, out.grad * y)

    out = _make(y, (x,), bw, "exp")
    return out


def square(x) -> Tensor:
    x = as_tensor(x)
    out = None

    def bw():
        _acc(x, 2.0 * x.data * out.grad)

    out = _make(x.data * x.data, (x,), bw, "square")
    return out


# -- reductions --------------------------------------------------------------

def sum_over_axis(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = None

    def bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(x, np.broadcast_to(g, x.shape))

    out = _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")
    return out


def mean_over_axis(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_over_axis(x, axis, keepdims), 1.0 / n)


def max_over_axis(x, axis: int, keepdims=False) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    val = np.take_along_axis(x.data, idx, axis=axis)
    out = None

    def bw():
        g = out.grad if keepdims else np.expand_dims(out.grad, axis)
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, g, axis=axis)
        _acc(x, full)

    out = _make(val if keepdims else np.squeeze(val, axis), (x,), bw, "max")
    return out


def softmax_over_axis(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = None

    def bw():
        g = out.grad
        _acc(x, y * (g - np.sum(g * y, axis=axis, keepdims=True)))

    out = _make(y, (x,), bw, "softmax")
    return out


# -- shape ops ---------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {e}") from None
    out = None

    def bw():
        _acc(x, out.grad.reshape(x.shape))

    out = _make(y, (x,), bw, "reshape")
    return out


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    out = None

    def bw():
        _acc(x, np.transpose(out.grad, inv))

    out = _make(np.transpose(x.data, axes), (x,), bw, "transpose")
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = None

    def bw():
        for t, g in zip(tensors, np.split(out.grad, sizes, axis=axis)):
            _acc(t, g)

    out = _make(y, tensors, bw, "concat")
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


def slice_axis(x, index, axis: int = 0) -> Tensor:
    """``x`` indexed by an int, slice or integer array along ``axis``."""
    x = as_tensor(x)
    sl = [slice(None)] * x.data.ndim
    sl[axis] = index
    sl = tuple(sl)
    out = None

    def bw():
        full = np.zeros_like(x.data)
        np.add.at(full, sl, out.grad)
        _acc(x, full)

    out = _make(x.data[sl], (x,), bw, "slice")
    return out


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = None

    def bw():
        g = out.grad
        if a.requires_grad:
            _acc(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape), True)
        if b.requires_grad:
            _acc(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape), True)

    out = _make(a.data @ b.data, (a, b), bw, "matmul")
    return out


def _im2col(xp, k, X, Y):
    C = xp.shape[2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))  # X, Y, C, k, k
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(X * Y, k * k * C)


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """Same-padded 2D convolution over an (X, Y, Cin) map with a (k, k, Cin, Cout) kernel.

    Computed as a sum of k*k shifted matmuls, which avoids materializing
    the im2col matrix.
    """
    if stride != 1:
        raise ValueError("only stride 1 is supported")
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects (X,Y,C) input and (k,k,Cin,Cout) kernel, "
                         f"got {x.shape} and {w.shape}")
    k, k2, cin, cout = w.shape
    if k != k2 or k % 2 == 0 or cin != x.shape[2]:
        raise ShapeError(f"conv2d: kernel {w.shape} incompatible with input {x.shape}")
    X, Y, _ = x.shape
    p = k // 2
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0)))
    y = np.zeros((X, Y, cout))
    for a in range(k):
        for c in range(k):
            y += xp[a:a + X, c:c + Y] @ w.data[a, c]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
        y += b.data
        parents.append(b)
    out = None

    def bw():
        g = out.grad
        if w.requires_grad:
            gw = np.empty(w.shape)
            for a in range(k):
                for c in range(k):
                    gw[a, c] = np.tensordot(xp[a:a + X, c:c + Y], g, axes=([0, 1], [0, 1]))
            _acc(w, gw, True)
        if b is not None and b.requires_grad:
            _acc(b, g.sum(axis=(0, 1)), True)
        if x.requires_grad:
            gxp = np.zeros((X + 2 * p, Y + 2 * p, cin))
            for a in range(k):
                for c in range(k):
                    gxp[a:a + X, c:c + Y] += g @ w.data[a, c].T
            _acc(x, gxp[p:p + X, p:p + Y], False)

    out = _make(y, parents, bw, "conv2d")
    return out


# -- BEV scatter / gather ----------------------------------------------------

def scatter_to_bev(vectors, i, j, X: int, Y: int) -> Tensor:
    """Place each (P, C) pillar vector at cell (i[p], j[p]) of a zero (X, Y, C) map."""
    v = as_tensor(vectors)
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    if v.data.ndim != 2 or len(i) != v.shape[0] or len(j) != v.shape[0]:
        raise ShapeError(f"scatter_to_bev: {v.shape} vectors vs {len(i)} indices")
    if len(i) and (i.min() < 0 or i.max() >= X or j.min() < 0 or j.max() >= Y):
        raise ShapeError("scatter_to_bev: index out of grid bounds")
    flat = i * Y + j
    if len(np.unique(flat)) != len(flat):
        raise ShapeError("scatter_to_bev: duplicate pillar cells")
    y = np.zeros((X * Y, v.shape[1] if v.data.ndim == 2 else 0))
    y[flat] = v.data
    out = None

    def bw():
        _acc(v, out.grad.reshape(X * Y, -1)[flat])

    out = _make(y.reshape(X, Y, -1), (v,), bw, "scatter_to_bev")
    return out


def gather_cells(bev, i, j) -> Tensor:
    """Rows (M, C) of an (X, Y, C) map at the given cells."""
    bev = as_tensor(bev)
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    X, Y, C = bev.shape
    flat = i * Y + j
    out = None

    def bw():
        full = np.zeros((X * Y, C))
        np.add.at(full, flat, out.grad)
        _acc(bev, full.reshape(X, Y, C))

    out = _make(bev.data.reshape(X * Y, C)[flat], (bev,), bw, "gather_cells")
    return out


# -- losses ------------------------------------------------------------------

def bce_with_logits(logits, targets, weights=None) -> Tensor:
    """Weighted sum of numerically stable binary cross-entropy terms."""
    z = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    w = np.ones_like(t) if weights is None else np.asarray(weights, dtype=np.float64)
    loss = w * (np.maximum(z.data, 0) - z.data * t + np.log1p(np.exp(-np.abs(z.data))))
    out = None

    def bw():
        _acc(z, out.grad * w * (sigmoid_np(z.data) - t))

    out = _make(np.sum(loss), (z,), bw, "bce")
    return out


def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Summed Huber-style smooth L1."""
    p = as_tensor(pred)
    d = p.data - np.asarray(target, dtype=np.float64)
    ad = np.abs(d)
    loss = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    out = None

    def bw():
        _acc(p, out.grad * np.where(ad < beta, d / beta, np.sign(d)))

    out = _make(np.sum(loss), (p,), bw, "smooth_l1")
    return out


# -- backward ----------------------------------------------------------------

def topological_order(root: Tensor) -> list:
    """Graph nodes reachable from ``root``, parents before children."""
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=(), retain_graph: bool = False):
    """Populate ``.grad`` on every tensor reachable from a scalar ``loss``.

    Tensors in ``params`` start from zero, so unreachable parameters end up
    with an all-zero gradient rather than ``None``. Unless ``retain_graph``,
    the graph is released afterwards (backward closures form reference
    cycles that would otherwise keep every activation alive until a full
    garbage collection).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    for p in params:
        p.zero_grad()
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()
    if not retain_graph:
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()


def conv2d_at_cells(x, w, b, i, j) -> Tensor:
    """``conv2d(x, w, b)`` evaluated only at cells (i, j): returns (M, Cout).

    Equal to ``gather_cells(conv2d(x, w, b), i, j)`` without computing the
    full map.
    """
    x, w = as_tensor(x), as_tensor(w)
    k, _, cin, cout = w.shape
    if x.data.ndim != 3 or cin != x.shape[2]:
        raise ShapeError(f"conv2d_at_cells: kernel {w.shape} incompatible with input {x.shape}")
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    p = k // 2
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0)))
    di, dj = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    ii = i[:, None, None] + di  # (M, k, k) in padded coordinates
    jj = j[:, None, None] + dj
    cols = xp[ii, jj].reshape(len(i), k * k * cin)
    wm = w.data.reshape(k * k * cin, cout)
    y = cols @ wm
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        y = y + b.data
        parents.append(b)
    out = None

    def bw():
        g = out.grad
        if w.requires_grad:
            _acc(w, (cols.T @ g).reshape(w.shape))
        if b is not None and b.requires_grad:
            _acc(b, g.sum(axis=0))
        if x.requires_grad:
            gc = (g @ wm.T).reshape(len(i), k, k, cin)
            gxp = np.zeros_like(xp)
            np.add.at(gxp, (ii, jj), gc)
            _acc(x, gxp[p:p + x.shape[0], p:p + x.shape[1]])

    out = _make(y, parents, bw, "conv2d_at_cells")
    return out
