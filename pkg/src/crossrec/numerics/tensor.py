"""Dense tensors with reverse-mode gradients.

Every op builds an output ``Tensor`` holding its parents and a closure that
maps the output gradient to one gradient per parent.  ``Tensor.backward``
walks the graph in reverse topological order and accumulates gradients only
into leaves that require them (typically ``Parameter`` objects); intermediate
gradients are dropped once consumed.

Determinism contract: for a fixed input shape, dtype and BLAS thread count the
forward and backward passes are bitwise reproducible.  Reductions inside
``matmul`` are delegated to BLAS, whose summation order can depend on the
operand shape, so the same rows evaluated under a different batch partition
agree to within 1e-12 relative rather than bitwise.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

MASK_VALUE = -1e9


class ShapeError(ValueError):
    """Raised when operands of an op have incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        dims = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {dims}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class Parameter(Tensor):
    """A trainable leaf; ``grad`` accumulates across backward calls until zeroed."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)

    def zero_grad(self):
        self.grad = None


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_all(a: Tensor) -> Tensor:
    return _make(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.sum(a.data) / n, (a,), lambda g: (np.full(a.shape, g / n),))


def mean_rows(a: Tensor, axis: int = -2) -> Tensor:
    n = a.shape[axis]
    out = a.data.mean(axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return _make(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), backward)


def concat_rows(tensors: Sequence[Tensor], axis: int = -2) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat_rows", *(t.shape for t in tensors))
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return _make(out, tensors, backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def embedding_lookup(table: Tensor, idx) -> Tensor:
    """Rows of ``table`` at integer positions ``idx`` (any shape)."""
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"embedding_lookup: index out of range for table with {n} rows")
    out = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (full,)

    return _make(out, (table,), backward)


def row_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gain, bias), backward)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """softmax(q k^T / sqrt(dh) + mask) v over the last two axes.

    ``mask`` is an additive array broadcastable to ``(..., Lq, Lk)``; blocked
    positions carry ``MASK_VALUE``.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("scaled_dot_attention", q.shape, k.shape, v.shape)
    c = 1.0 / np.sqrt(q.shape[-1])
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * c
    if mask is not None:
        s = s + mask
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def backward(g):
        gv = np.swapaxes(p, -1, -2) @ g if v.requires_grad else None
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gq = (gs @ k.data) * c if q.requires_grad else None
        gk = (np.swapaxes(gs, -1, -2) @ q.data) * c if k.requires_grad else None
        return (_unbroadcast(gq, q.shape) if gq is not None else None,
                _unbroadcast(gk, k.shape) if gk is not None else None,
                _unbroadcast(gv, v.shape) if gv is not None else None)

    return _make(out, (q, k, v), backward)


def l2_normalize(x: Tensor, eps: float = 1e-30) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _make(y, (x,), backward)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-30) -> Tensor:
    """Cosine along the last axis; broadcasts over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    na = np.maximum(np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True)), eps)
    nb = np.maximum(np.sqrt((b.data * b.data).sum(axis=-1, keepdims=True)), eps)
    ua, ub = a.data / na, b.data / nb
    cos = (ua * ub).sum(axis=-1, keepdims=True)
    out = cos[..., 0]

    def backward(g):
        g = g[..., None]
        ga = _unbroadcast(g * (ub - cos * ua) / na, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * (ua - cos * ub) / nb, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def info_nce(anchor: Tensor, positive: Tensor, negatives: Tensor, tau: Tensor) -> Tensor:
    """Per-row contrastive loss against a shared negative set.

    loss_n = -log( e^{tau s+_n} / (e^{tau s+_n} + sum_j e^{tau s_nj}) ) with
    s+_n = <anchor_n, positive_n> and s_nj = <anchor_n, negatives_j>.  Rows
    are expected to be unit norm, so the dot products are cosines.  The
    log-sum-exp is evaluated with max subtraction.
    """
    if anchor.shape != positive.shape or anchor.ndim != 2 or negatives.ndim != 2 \
            or negatives.shape[1] != anchor.shape[1]:
        raise ShapeError("info_nce", anchor.shape, positive.shape, negatives.shape)
    t = float(tau.data)
    sp = (anchor.data * positive.data).sum(axis=1)
    # broadcast product rather than BLAS so each score is independent of its column
    sn = (anchor.data[:, None, :] * negatives.data[None, :, :]).sum(axis=2)
    logits = np.concatenate([sp[:, None], sn], axis=1) * t
    top = logits.argmax(axis=1)
    rows = np.arange(len(top))
    mx = logits[rows, top][:, None]
    e = np.exp(logits - mx)
    # mass outside the max term, summed in sorted order so the value does not
    # depend on the order of the negatives; log1p keeps tiny losses positive
    rest = e.copy()
    rest[rows, top] = 0.0
    rest = np.sort(rest, axis=1).sum(axis=1)
    z = (1.0 + rest)[:, None]
    p = e / z
    loss = (mx[:, 0] - logits[:, 0]) + np.log1p(rest)

    def backward(g):
        # dL/dlogit_0 = p0 - 1, dL/dlogit_j = p_j
        w0 = (p[:, 0] - 1.0) * g
        wn = p[:, 1:] * g[:, None]
        ga = (w0[:, None] * positive.data + wn @ negatives.data) * t
        gp = w0[:, None] * anchor.data * t
        gn = (wn.T @ anchor.data) * t
        gt = np.asarray(w0 @ sp + (wn * sn).sum())
        return ga, gp, gn, gt.reshape(tau.shape)

    return _make(loss, (anchor, positive, negatives, tau), backward)
