"""Reverse-mode automatic differentiation over a dynamic tape.

Every differentiable computation in the package (model forward, losses,
fitting loops) runs through :class:`Tensor`. The graph is built define-by-run:
each op returns a new Tensor holding references to its parents and a closure
that accumulates gradients into them. ``backward`` walks the graph once in
reverse topological order.

All tensors are float64. Gradients of parameters never touched by the loss
are exactly zero (``grad`` stays a zero array).
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """A node on the tape: a float64 ndarray plus gradient plumbing."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.name = name
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, name={self.name})"

    def detach(self):
        """Stop-gradient: a constant view of the current value."""
        return Tensor(self.data.copy())

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        g = _unbroadcast(np.asarray(g, dtype=np.float64), self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def backward(self):
        """Reverse pass from a scalar output."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar output, got shape {self.data.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    @property
    def T(self):
        return transpose(self)


def astensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root):
    """Nodes reachable from root, root first (reverse topological)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order[::-1]


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def custom_op(out_data, inputs, backward):
    """Build a tape node from a hand-written forward result.

    ``backward(grad_out)`` must return one gradient array (or None) per input,
    in order.
    """
    inputs = tuple(astensor(x) for x in inputs)

    def _bw(g):
        grads = backward(g)
        for inp, gi in zip(inputs, grads):
            if gi is not None and inp.requires_grad:
                inp._accumulate(gi)

    return Tensor(out_data, _parents=inputs, _backward=_bw)


# -- elementwise and structural ops ---------------------------------------


def add(a, b):
    a, b = astensor(a), astensor(b)
    out = a.data + b.data

    def bw(g):
        return g, g

    return custom_op(out, (a, b), bw)


def sub(a, b):
    a, b = astensor(a), astensor(b)
    out = a.data - b.data

    def bw(g):
        return g, -g

    return custom_op(out, (a, b), bw)


def mul(a, b):
    a, b = astensor(a), astensor(b)
    out = a.data * b.data

    def bw(g):
        return g * b.data, g * a.data

    return custom_op(out, (a, b), bw)


def div(a, b):
    a, b = astensor(a), astensor(b)
    out = a.data / b.data

    def bw(g):
        return g / b.data, -g * a.data / (b.data * b.data)

    return custom_op(out, (a, b), bw)


def power(a, p):
    a = astensor(a)
    out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return custom_op(out, (a,), bw)


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    a1, b1 = a.ndim == 1, b.ndim == 1
    if a1:
        a = reshape(a, (1,) + a.shape)
    if b1:
        b = reshape(b, b.shape + (1,))
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    res = custom_op(out, (a, b), bw)
    if a1 and b1:
        return reshape(res, ())
    if a1:
        return reshape(res, res.shape[:-2] + (res.shape[-1],))
    if b1:
        return reshape(res, res.shape[:-1])
    return res


def tsum(a, axis=None):
    a = astensor(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape),)

    return custom_op(out, (a,), bw)


def tmean(a, axis=None):
    a = astensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return tsum(a, axis) * (1.0 / n)


def tabs(a):
    a = astensor(a)
    out = np.abs(a.data)

    def bw(g):
        return (g * np.sign(a.data),)

    return custom_op(out, (a,), bw)


def relu(a):
    a = astensor(a)
    out = np.maximum(a.data, 0.0)

    def bw(g):
        return (g * (a.data > 0.0),)

    return custom_op(out, (a,), bw)


def sigmoid(a):
    a = astensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        return (g * out * (1.0 - out),)

    return custom_op(out, (a,), bw)


def silu(a):
    a = astensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s

    def bw(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return custom_op(out, (a,), bw)


def exp(a):
    a = astensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return custom_op(out, (a,), bw)


def log(a):
    a = astensor(a)
    out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return custom_op(out, (a,), bw)


def sqrt(a):
    a = astensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / out,)

    return custom_op(out, (a,), bw)


def tanh(a):
    a = astensor(a)
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return custom_op(out, (a,), bw)


def maximum(a, b):
    a, b = astensor(a), astensor(b)
    out = np.maximum(a.data, b.data)

    def bw(g):
        mask = a.data >= b.data
        return g * mask, g * (~mask)

    return custom_op(out, (a, b), bw)


def minimum(a, b):
    a, b = astensor(a), astensor(b)
    out = np.minimum(a.data, b.data)

    def bw(g):
        mask = a.data <= b.data
        return g * mask, g * (~mask)

    return custom_op(out, (a, b), bw)


def clip_min(a, lo):
    """max(a, lo) against a constant; gradient passes where a > lo."""
    a = astensor(a)
    out = np.maximum(a.data, lo)

    def bw(g):
        return (g * (a.data > lo),)

    return custom_op(out, (a,), bw)


def take(a, idx):
    a = astensor(a)
    out = a.data[idx]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return custom_op(out, (a,), bw)


def scatter_rows(src, indices, num_rows, channels=None):
    """Place rows of ``src`` (K, C) at ``indices`` in a zero (num_rows, C)
    tensor. Indices must be unique."""
    src = astensor(src)
    indices = np.asarray(indices, dtype=np.int64)
    c = channels if channels is not None else (src.shape[1] if src.ndim == 2 else 1)
    sd = src.data if src.ndim == 2 else src.data[:, None]
    if sd.shape[1] == 1 and c > 1:
        sd = np.broadcast_to(sd, (sd.shape[0], c))
    out = np.zeros((num_rows, c))
    out[indices] = sd

    def bw(g):
        gs = g[indices]
        if src.ndim == 1:
            gs = gs.sum(axis=1) if gs.ndim == 2 else gs
        elif src.shape[1] == 1 and c > 1:
            gs = gs.sum(axis=1, keepdims=True)
        return (gs,)

    return custom_op(out, (src,), bw)


def reshape(a, shape):
    a = astensor(a)
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.data.shape),)

    return custom_op(out, (a,), bw)


def transpose(a, axes=None):
    a = astensor(a)
    out = np.transpose(a.data, axes)

    def bw(g):
        inv = None if axes is None else np.argsort(axes)
        return (np.transpose(g, inv),)

    return custom_op(out, (a,), bw)


def concat(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return custom_op(out, tuple(tensors), bw)


def stack(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return custom_op(out, tuple(tensors), bw)


def dot(a, b):
    """Sum of elementwise product (inner product of flattened tensors)."""
    return tsum(mul(a, b))


def norm_sq(a, axis=None):
    return tsum(mul(a, a), axis)


def cross3(a, b):
    """Row-wise cross product for (..., 3) tensors."""
    a, b = astensor(a), astensor(b)
    out = np.cross(a.data, b.data)

    def bw(g):
        return np.cross(b.data, g), np.cross(g, a.data)

    return custom_op(out, (a, b), bw)


def atan2(y, x):
    y, x = astensor(y), astensor(x)
    out = np.arctan2(y.data, x.data)
    denom = y.data * y.data + x.data * x.data

    def bw(g):
        return g * x.data / denom, -g * y.data / denom

    return custom_op(out, (y, x), bw)


# -- parameter registry ----------------------------------------------------


class Params:
    """Named leaf tensors: the optimizable state of a model or fit."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name, data):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state(self):
        """Snapshot of values, name -> ndarray copy."""
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state):
        for k, v in state.items():
            if k not in self._params:
                raise KeyError(f"unknown parameter {k!r} in state")
            if self._params[k].data.shape != v.shape:
                raise ValueError(f"shape mismatch for {k!r}")
            self._params[k].data = np.array(v, dtype=np.float64)


def finite_diff_check(loss_fn, params, eps=1e-5, max_coords_per_param=None, rng=None):
    """Compare tape gradients against central finite differences.

    ``loss_fn()`` must rebuild the loss from the current parameter values and
    return a scalar Tensor. Returns ``(max_relative_error, worst_param_name)``.
    With ``max_coords_per_param`` set, a deterministic random subset of
    coordinates is checked per parameter (needed for large weight tensors).
    """
    items = list(params) if isinstance(params, Params) else list(params.items())
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise ValueError("loss is not finite")
    for _, t in items:
        t.grad = None
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in items}

    if rng is None:
        rng = np.random.default_rng(0)
    # denominator floor relative to the gradient's overall scale, so
    # coordinates whose true derivative is negligible cannot report pure
    # finite-difference roundoff as a large relative error
    gscale = max((np.abs(g).max() for g in analytic.values() if g.size), default=0.0)
    floor = max(1e-6, 1e-4 * gscale)
    worst = 0.0
    worst_name = None
    for name, t in items:
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        an = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(loss_fn().data)
            flat[i] = orig - eps
            lm = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ValueError(f"loss not finite while perturbing {name}[{i}]")
            fd = (lp - lm) / (2.0 * eps)
            denom = max(abs(fd), abs(an[i]), floor)
            err = abs(fd - an[i]) / denom
            if err > worst:
                worst = err
                worst_name = f"{name}[{i}]"
    return worst, worst_name
