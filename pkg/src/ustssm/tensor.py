"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the op vocabulary the point-cloud-video pipeline needs is provided:
elementwise arithmetic with broadcasting, matmul, a few activations,
reductions, softmax, row gathers and permutations, concatenation,
layer normalization and a safe L2 norm.  Fused ops (the selective scan)
plug in through :func:`custom_op`.
"""
from __future__ import annotations

import contextlib
import weakref

import numpy as np
from scipy import sparse

_grad_enabled = True
_counters: list["AllocationCounter"] = []


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class AllocationCounter:
    """Counts bytes held by tensors created while the counter is active.

    ``peak_bytes`` is the high-water mark of live tensor payloads, which is
    deterministic for a given computation (unlike OS resident size).
    """

    def __init__(self):
        self.live_bytes = 0
        self.peak_bytes = 0
        self.total_bytes = 0
        self.n_tensors = 0

    def _add(self, nbytes: int):
        self.live_bytes += nbytes
        self.total_bytes += nbytes
        self.n_tensors += 1
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes

    def _release(self, nbytes: int):
        self.live_bytes -= nbytes

    def __enter__(self):
        _counters.append(self)
        return self

    def __exit__(self, *exc):
        _counters.remove(self)
        return False


def _track(t: "Tensor"):
    nbytes = t.data.nbytes
    for c in _counters:
        c._add(nbytes)
        weakref.finalize(t, c._release, nbytes)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        if _counters:
            _track(self)

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

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it.

        The recorded graph is released afterwards.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.data.shape:
                    pg = _unbroadcast(pg, p.data.shape)
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._parents = ()
            node._backward = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo_order(root: Tensor) -> list:
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


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data: np.ndarray, parents, backward) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward(g)`` must return one gradient (or ``None``) per parent.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return custom_op(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return custom_op(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    return custom_op(out, (a,), lambda g: (g * _sigmoid(x),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, m]`` with ``b`` two-dimensional."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2:
        raise ValueError("matmul expects a 2-D right operand")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return custom_op(out, (a, b), backward)


def linear(x: Tensor, W: Tensor, b: Tensor, act: str = "none") -> Tensor:
    """Fused ``act(x @ W + b)`` for ``act`` in {'none', 'relu'}."""
    x = as_tensor(x)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {W.shape}")
    out = x.data @ W.data
    out += b.data
    if act == "relu":
        np.maximum(out, 0.0, out=out)
    d_in, d_out = W.shape

    def backward(g):
        if act == "relu":
            g = np.where(out > 0, g, 0.0)
        g2 = g.reshape(-1, d_out)
        gx = g @ W.data.T if x.requires_grad else None
        gW = x.data.reshape(-1, d_in).T @ g2 if W.requires_grad else None
        return gx, gW, g2.sum(axis=0)

    return custom_op(out, (x, W, b), backward)


def linear_relu_max(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Fused ``max over axis -2 of relu(x @ W + b)``, the tail of a set abstraction.

    Only a boolean mask of the maximizers is kept; the gradient flows to the
    first maximizer of each output channel and only where that maximum is
    positive.
    """
    x = as_tensor(x)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {W.shape}")
    z = x.data @ W.data
    z += b.data
    zmax = z.max(axis=-2)
    winner = z == np.expand_dims(zmax, -2)
    del z
    ties = winner.sum(axis=-2) > 1
    if ties.any():
        first = np.cumsum(winner, axis=-2) == 1
        winner &= first
    out = np.maximum(zmax, 0.0)
    d_in, d_out = W.shape

    def backward(g):
        gz = winner * np.expand_dims(np.where(out > 0, g, 0.0), -2)
        gz2 = gz.reshape(-1, d_out)
        gx = gz @ W.data.T if x.requires_grad else None
        gW = x.data.reshape(-1, d_in).T @ gz2 if W.requires_grad else None
        return gx, gW, gz2.sum(axis=0)

    return custom_op(out, (x, W, b), backward)


# ---------------------------------------------------------------- reductions

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def max_(a: Tensor, axis: int) -> Tensor:
    """Max along one axis; the gradient goes to the first maximizer."""
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)
    shape = a.shape

    def backward(g):
        ga = np.zeros(shape)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return custom_op(out, (a,), backward)


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    s = softmax_np(a.data, axis)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return custom_op(s, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return custom_op(out, (a,), backward)


def l2norm(a: Tensor, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm along ``axis``; zero vectors get a zero subgradient."""
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * a.data / safe, 0.0),)

    out = n if keepdims else n.squeeze(axis)
    return custom_op(out, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Zero-mean, unit-variance normalization along ``axis`` (no affine)."""
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gym = np.mean(g * y, axis=axis, keepdims=True)
        return (rstd * (g - gm - y * gym),)

    return custom_op(y, (a,), backward)


# ---------------------------------------------------------------- shape / index

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return custom_op(np.swapaxes(a.data, ax1, ax2).copy(), (a,),
                     lambda g: (np.swapaxes(g, ax1, ax2),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    return custom_op(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (g,))


def index(a: Tensor, key) -> Tensor:
    """Basic slicing (no fancy indexing; use :func:`take` for that)."""
    shape = a.shape

    def backward(g):
        ga = np.zeros(shape)
        ga[key] = g
        return (ga,)

    return custom_op(a.data[key].copy(), (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return custom_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of ``a`` (axis 0); the backward pass scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    n = a.shape[0]
    out = a.data[idx]

    def backward(g):
        flat = idx.ravel()
        # scatter-add as a sparse (n x len(idx)) product; much faster than np.add.at
        scatter = sparse.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))),
                                    shape=(n, flat.size))
        g2 = g.reshape(flat.size, -1)
        return (np.asarray(scatter @ g2).reshape((n,) + a.shape[1:]),)

    return custom_op(out, (a,), backward)


def permute(a: Tensor, perm: np.ndarray, axis: int = 0) -> Tensor:
    """Gather by a bijection along ``axis``; gradients travel back via the inverse."""
    perm = np.asarray(perm, dtype=np.intp)
    if perm.ndim != 1 or not np.array_equal(np.sort(perm), np.arange(a.shape[axis])):
        raise ValueError("permute needs a bijection on the axis")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return custom_op(np.take(a.data, perm, axis=axis), (a,),
                     lambda g: (np.take(g, inv, axis=axis),))


def flip(a: Tensor, axis: int) -> Tensor:
    return custom_op(np.flip(a.data, axis=axis).copy(), (a,), lambda g: (np.flip(g, axis=axis),))
