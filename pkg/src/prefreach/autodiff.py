"""Reverse-mode autodiff over dense float64 numpy arrays.

Define-by-run: every op records its inputs and a backward closure on the
output tensor; `backward()` walks the graph once and then frees it. All
storage is float64. A graph is owned by a single thread; parameter tensors
may be read concurrently once no graph references them.
"""

from __future__ import annotations

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (rollouts, eval)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class ShapeError(ValueError):
    pass


def _check(cond, op, *shapes):
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {[tuple(s) for s in shapes]}")


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.values.copy())

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, parents, backward_fn):
    """Wrap an op result; record graph edges only when a parent needs grad."""
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accum(t, g):
    if t.grad is None:
        t.grad = g.astype(np.float64, copy=True)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# elementwise / broadcast primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        vals = a.values + b.values
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _make(vals, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        vals = a.values - b.values
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _make(vals, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        vals = a.values * b.values
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.values, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.values, b.shape))

    return _make(vals, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        vals = a.values / b.values
    except ValueError:
        raise ShapeError(f"div: incompatible shapes {a.shape} {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.values, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.values / (b.values * b.values), b.shape))

    return _make(vals, (a, b), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check(a.values.ndim == 2 and b.values.ndim == 2, "matmul", a.shape, b.shape)
    _check(a.shape[1] == b.shape[0], "matmul", a.shape, b.shape)
    vals = a.values @ b.values

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.values.T)
        if b.requires_grad:
            _accum(b, a.values.T @ g)

    return _make(vals, (a, b), bw)


def relu(x):
    x = as_tensor(x)
    vals = np.maximum(x.values, 0.0)

    def bw(g):
        if x.requires_grad:
            _accum(x, g * (x.values > 0.0))

    return _make(vals, (x,), bw)


def tanh(x):
    x = as_tensor(x)
    vals = np.tanh(x.values)

    def bw(g):
        if x.requires_grad:
            _accum(x, g * (1.0 - vals * vals))

    return _make(vals, (x,), bw)


def sigmoid(x):
    x = as_tensor(x)
    # stable: never exponentiates a large positive argument
    v = x.values
    vals = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                    np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

    def bw(g):
        if x.requires_grad:
            _accum(x, g * vals * (1.0 - vals))

    return _make(vals, (x,), bw)


def exp(x):
    x = as_tensor(x)
    vals = np.exp(x.values)

    def bw(g):
        if x.requires_grad:
            _accum(x, g * vals)

    return _make(vals, (x,), bw)


def log(x):
    x = as_tensor(x)
    vals = np.log(x.values)

    def bw(g):
        if x.requires_grad:
            _accum(x, g / x.values)

    return _make(vals, (x,), bw)


def sqrt(x):
    x = as_tensor(x)
    vals = np.sqrt(x.values)

    def bw(g):
        if x.requires_grad:
            _accum(x, g * 0.5 / vals)

    return _make(vals, (x,), bw)


def square(x):
    x = as_tensor(x)
    vals = x.values * x.values

    def bw(g):
        if x.requires_grad:
            _accum(x, g * 2.0 * x.values)

    return _make(vals, (x,), bw)


def minimum(a, b):
    """Elementwise min; the gradient follows the smaller side (ties -> a)."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        vals = np.minimum(a.values, b.values)
    except ValueError:
        raise ShapeError(f"minimum: incompatible shapes {a.shape} {b.shape}")
    take_a = a.values <= b.values

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * ~take_a, b.shape))

    return _make(vals, (a, b), bw)


def clip_const(x, lo, hi):
    """Clamp to constant bounds; gradient passes only strictly inside."""
    x = as_tensor(x)
    vals = np.clip(x.values, lo, hi)
    inside = (x.values > lo) & (x.values < hi)

    def bw(g):
        if x.requires_grad:
            _accum(x, g * inside)

    return _make(vals, (x,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    vals = x.values.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not x.requires_grad:
            return
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(ge, x.shape).copy())

    return _make(vals, (x,), bw)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def tmax(x, axis, keepdims=False):
    """Max over one axis; gradient routed to the first argmax (tie-break)."""
    x = as_tensor(x)
    vals = x.values.max(axis=axis, keepdims=keepdims)
    idx = x.values.argmax(axis=axis)

    def bw(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.values)
        ge = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), ge, axis=axis)
        _accum(x, gx)

    return _make(vals, (x,), bw)


def softmax(x):
    """Softmax over the last axis, max-subtracted for overflow safety."""
    x = as_tensor(x)
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    vals = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if x.requires_grad:
            dot = (g * vals).sum(axis=-1, keepdims=True)
            _accum(x, vals * (g - dot))

    return _make(vals, (x,), bw)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    vals = x.values.reshape(shape)
    old = x.shape

    def bw(g):
        if x.requires_grad:
            _accum(x, g.reshape(old))

    return _make(vals, (x,), bw)


def gather_rows(x, idx):
    """Select rows of a 2-D tensor by integer index array (repeats allowed)."""
    x = as_tensor(x)
    _check(x.values.ndim == 2, "gather_rows", x.shape)
    idx = np.asarray(idx, dtype=np.intp)
    vals = x.values[idx]

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.values)
            np.add.at(gx, idx, g)
            _accum(x, gx)

    return _make(vals, (x,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    vals = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bw(g):
        off = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(off, off + n)
                _accum(t, g[tuple(sl)])
            off += n

    return _make(vals, tuple(tensors), bw)


def conv1d(x, w, b=None):
    """Valid 1-D convolution. x (L, Cin), w (K, Cin, Cout) -> (L-K+1, Cout)."""
    x, w = as_tensor(x), as_tensor(w)
    _check(x.values.ndim == 2 and w.values.ndim == 3, "conv1d", x.shape, w.shape)
    _check(x.shape[1] == w.shape[1], "conv1d", x.shape, w.shape)
    K = w.shape[0]
    L = x.shape[0]
    _check(L >= K, "conv1d", x.shape, w.shape)
    out = np.zeros((L - K + 1, w.shape[2]))
    for k in range(K):
        out += x.values[k:L - K + 1 + k] @ w.values[k]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        _check(b.shape == (w.shape[2],), "conv1d bias", b.shape, w.shape)
        out = out + b.values
        parents.append(b)

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.values)
            for k in range(K):
                gx[k:L - K + 1 + k] += g @ w.values[k].T
            _accum(x, gx)
        if w.requires_grad:
            gw = np.zeros_like(w.values)
            for k in range(K):
                gw[k] = x.values[k:L - K + 1 + k].T @ g
            _accum(w, gw)
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _make(out, tuple(parents), bw)


def group_norm(x, gamma, beta, num_groups, eps=1e-5):
    """Per-row group normalization of a (N, C) tensor.

    Statistics are taken over channel groups within each row independently,
    so row order never enters any reduction (keeps encoder outputs exactly
    permutation-invariant).
    """
    x = as_tensor(x)
    _check(x.values.ndim == 2, "group_norm", x.shape)
    n, c = x.shape
    _check(c % num_groups == 0, "group_norm", x.shape, (num_groups,))
    xg = reshape(x, (n, num_groups, c // num_groups))
    mu = tmean(xg, axis=2, keepdims=True)
    xc = sub(xg, mu)
    var = tmean(square(xc), axis=2, keepdims=True)
    xn = div(xc, sqrt(add(var, eps)))
    out = reshape(xn, (n, c))
    return add(mul(out, gamma), beta)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss):
    """Backpropagate from a scalar tensor; frees the graph afterwards.

    Leaf gradients accumulate across calls (caller zeroes between steps).
    """
    loss = as_tensor(loss)
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # iterative topological order (graphs can be deep)
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p._backward is not None:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.values)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # free: drop closures and intermediate grads so params can be shared
    for node in topo:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            if node is not loss:
                node.grad = None
