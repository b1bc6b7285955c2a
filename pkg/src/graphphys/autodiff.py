"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every op builds a node on a dynamic tape that is discarded after
:func:`backward`.  Binary ops accept operands of identical shape, a scalar,
or shapes that differ only by extra *leading* (batch) extents.  Anything
else raises :class:`DimensionError` so shape mistakes surface early.
"""

import builtins

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, DomainError

__all__ = [
    "Tensor", "tensor", "parameter", "constant", "stop_gradient", "backward",
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "sigmoid",
    "logsigmoid", "tanh", "relu", "square", "softmax_rows", "log_softmax_rows",
    "logsumexp_rows", "concat_cols", "slice_cols", "transpose", "reshape",
    "sum", "mean", "bilinear", "gradcheck",
]


class Tensor:
    """Dense float64 array that may participate in a computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "op")

    def __init__(self, data, requires_grad=False, op=""):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            or data.dtype != np.float64 else data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._consumed = False
        self.op = op

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op!r})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def parameter(data):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data):
    return Tensor(data)


def stop_gradient(x):
    return Tensor(x.data)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    # grads are never mutated in place, so aliasing g is safe
    if t.grad is None:
        t.grad = np.reshape(g, t.shape)
    else:
        t.grad = t.grad + g


def _check_pair(a, b, op):
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise DimensionError(f"{op}: shapes {sa} and {sb} are not conformable")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _swap(x):
    return np.swapaxes(x, -1, -2)


# --------------------------------------------------------------------------- #
# elementwise arithmetic

def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_pair(a, b, "add")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _check_pair(a, b, "sub")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))
    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _check_pair(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _lift(a), _lift(b)
    _check_pair(a, b, "div")
    zero = np.argwhere(b.data == 0)
    if zero.size:
        idx = tuple(int(i) for i in zero[0])
        raise DomainError(f"div: zero divisor at index {idx}", index=idx)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))
    return _node(out, (a, b), bw, "div")


def neg(a):
    a = _lift(a)
    return _node(-a.data, (a,), lambda g: _accumulate(a, -g), "neg")


def square(a):
    a = _lift(a)
    return _node(a.data * a.data, (a,), lambda g: _accumulate(a, 2.0 * a.data * g), "square")


def exp(a):
    a = _lift(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: _accumulate(a, g * out), "exp")


def log(a):
    a = _lift(a)
    bad = np.argwhere(~(a.data > 0))
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise DomainError(f"log: non-positive argument {a.data[idx]!r} at index {idx}", index=idx)
    return _node(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data), "log")


def sigmoid(a):
    a = _lift(a)
    out = expit(a.data)
    return _node(out, (a,), lambda g: _accumulate(a, g * out * (1.0 - out)), "sigmoid")


def logsigmoid(a):
    """log(sigmoid(x)), stable for large |x|."""
    a = _lift(a)
    out = -np.logaddexp(0.0, -a.data)
    return _node(out, (a,), lambda g: _accumulate(a, g * expit(-a.data)), "logsigmoid")


def tanh(a):
    a = _lift(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: _accumulate(a, g * (1.0 - out * out)), "tanh")


def relu(a):
    a = _lift(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: _accumulate(a, g * mask), "relu")


# --------------------------------------------------------------------------- #
# row-wise (last axis) reductions

def logsumexp_rows(a):
    """log(sum(exp(x))) over the last axis, keeping it as extent 1."""
    a = _lift(a)
    m = a.data.max(axis=-1, keepdims=True)
    s = np.exp(a.data - m)
    tot = s.sum(axis=-1, keepdims=True)
    out = m + np.log(tot)
    return _node(out, (a,), lambda g: _accumulate(a, g * (s / tot)), "logsumexp_rows")


def softmax_rows(a):
    a = _lift(a)
    e = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(a, out * (g - (g * out).sum(axis=-1, keepdims=True)))
    return _node(out, (a,), bw, "softmax_rows")


def log_softmax_rows(a):
    a = _lift(a)
    m = a.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=-1, keepdims=True))
    out = a.data - lse
    p = np.exp(out)

    def bw(g):
        _accumulate(a, g - p * g.sum(axis=-1, keepdims=True))
    return _node(out, (a,), bw, "log_softmax_rows")


# --------------------------------------------------------------------------- #
# structural ops

def concat_cols(*tensors):
    ts = [_lift(t) for t in tensors]
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(
                f"concat_cols: shapes {ts[0].shape} and {t.shape} differ outside the last axis")
    widths = [t.shape[-1] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=-1)

    def bw(g):
        start = 0
        for t, w in zip(ts, widths):
            if t.requires_grad:
                _accumulate(t, g[..., start:start + w])
            start += w
    return _node(out, tuple(ts), bw, "concat_cols")


def slice_cols(a, start, stop):
    a = _lift(a)
    n = a.shape[-1]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"slice_cols: [{start}:{stop}] outside width {n}")

    def bw(g):
        full = np.zeros(a.shape)
        full[..., start:stop] = g
        _accumulate(a, full)
    return _node(a.data[..., start:stop], (a,), bw, "slice_cols")


def transpose(a):
    a = _lift(a)
    if a.ndim < 2:
        raise DimensionError(f"transpose: need at least 2 axes, got shape {a.shape}")
    return _node(_swap(a.data), (a,), lambda g: _accumulate(a, _swap(g)), "transpose")


def reshape(a, shape):
    a = _lift(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _node(out, (a,), lambda g: _accumulate(a, g.reshape(a.shape)), "reshape")


def sum(a, axis=None, keepdims=False):
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))
    return _node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = _lift(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# --------------------------------------------------------------------------- #
# products

def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    ba, bb = a.shape[:-2], b.shape[:-2]
    if ba and bb and ba != bb:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} differ")
    k, n = b.shape[-2], b.shape[-1]
    flat_rhs = b.ndim == 2
    if flat_rhs:
        # batched @ matrix: one GEMM over all stacked rows
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, _swap(b.data)), a.shape))
        if b.requires_grad:
            if flat_rhs:
                _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _accumulate(b, _unbroadcast(np.matmul(_swap(a.data), g), b.shape))
    return _node(out, (a, b), bw, "matmul")


def bilinear(z, w, z2):
    """Pairwise bilinear form ``out[..., i, j] = z[i] @ w @ z2[j]``.

    ``z`` and ``z2`` are (..., v, d).  ``w`` is (d, d), giving (..., v, v),
    or a stack (C, d, d) of channel weights, giving (..., v, v, C).  With
    d == 1 and one channel this is the scaled outer product ``w * z z2^T``.
    """
    z, w, z2 = _lift(z), _lift(w), _lift(z2)
    d = z.shape[-1] if z.ndim else -1
    ok = (z.ndim >= 2 and z2.ndim >= 2 and w.ndim in (2, 3) and w.shape[-2:] == (d, d)
          and z2.shape[-1] == d and z.shape[:-2] == z2.shape[:-2])
    if not ok:
        raise DimensionError(f"bilinear: shapes {z.shape}, {w.shape}, {z2.shape} are not conformable")
    stacked = w.ndim == 3
    wd = w.data if stacked else w.data[None]
    C = wd.shape[0]
    lead, v, v2 = z.shape[:-2], z.shape[-2], z2.shape[-2]
    w_cat = wd.transpose(1, 0, 2).reshape(d, C * d)
    zw = (z.data.reshape(-1, d) @ w_cat).reshape(lead + (v * C, d))
    # (..., v*C, d) @ (..., d, v2) -> (..., v, C, v2) -> (..., v, v2, C)
    out = np.swapaxes(np.matmul(zw, _swap(z2.data)).reshape(lead + (v, C, v2)), -1, -2)

    def bw(g):
        gc = g if stacked else g[..., None]
        g_y = np.ascontiguousarray(np.swapaxes(gc, -1, -2)).reshape(lead + (v * C, v2))
        if z2.requires_grad:
            _accumulate(z2, np.matmul(_swap(g_y), zw))
        if z.requires_grad or w.requires_grad:
            g_zw = np.matmul(g_y, z2.data).reshape(-1, C * d)
            if z.requires_grad:
                _accumulate(z, (g_zw @ w_cat.T).reshape(z.shape))
            if w.requires_grad:
                g_cat = z.data.reshape(-1, d).T @ g_zw
                g_w = g_cat.reshape(d, C, d).transpose(1, 0, 2)
                _accumulate(w, g_w if stacked else g_w[0])
    return _node(out if stacked else out[..., 0], (z, w, z2), bw, "bilinear")


# --------------------------------------------------------------------------- #

def backward(root):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    The tape is released afterwards; calling again on the same root raises.
    """
    if root._consumed:
        raise ContractError("backward() already ran on this root; rebuild the graph first")
    if root.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward() root does not depend on any requires_grad tensor")

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

    root.grad = np.ones(root.shape)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node._parents:
            # interior node: release tape entry and its gradient buffer
            node._backward = None
            node._parents = ()
            node._consumed = True
            node.grad = None
    root._consumed = True


def gradcheck(fn, inputs, h=1e-5, max_coords=None, seed=0):
    """Norm-wise relative discrepancy between backward and central differences.

    ``fn(*inputs)`` must return a scalar Tensor.  Over every checked
    coordinate of every input with ``requires_grad`` the result is
    ``max|g_ad - g_fd| / max(|g_ad|, |g_fd|)``, i.e. the error relative to
    the largest gradient entry.  ``max_coords`` limits each input to a
    random subset of its coordinates.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.grad = None
    backward(fn(*inputs))
    err, scale = 0.0, 1e-12
    for t in inputs:
        if not t.requires_grad:
            continue
        t.data = np.asarray(t.data, dtype=np.float64)   # 0-d results may be numpy scalars
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1).copy()
        t.grad = None
        coords = np.arange(t.size)
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(rng.choice(t.size, max_coords, replace=False))
        analytic = analytic[coords]
        numeric = np.zeros(coords.size)
        for j, i in enumerate(coords):
            idx = np.unravel_index(i, t.shape)
            orig = t.data[idx]
            t.data[idx] = orig + h
            up = fn(*inputs).item()
            t.data[idx] = orig - h
            down = fn(*inputs).item()
            t.data[idx] = orig
            numeric[j] = (up - down) / (2.0 * h)
        if coords.size:
            err = builtins.max(err, float(np.abs(analytic - numeric).max()))
            scale = builtins.max(scale, float(np.abs(analytic).max()), float(np.abs(numeric).max()))
    return err / scale
