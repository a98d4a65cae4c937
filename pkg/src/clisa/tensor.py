"""Minimal dense tensor with tape-based reverse-mode differentiation.

Everything downstream (convolutions, attention, losses, the Lipschitz
probes) runs on this one value type. Data lives in a numpy array with
explicit row-major layout; gradients are accumulated by walking the
recorded operation tape in reverse topological order.

Float64 is the default dtype so that finite-difference checks and the
theorem verification hold tight tolerances; training code passes
float32 explicitly.
"""

from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError
from . import flops

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))  # python floats keep float32 inputs float32
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / FD probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def enable_grad():
    """Force tape recording inside the block (attacks under no_grad)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = True
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """Dense N-d array, optionally participating in gradient recording.

    `data` is always a numpy array; `grad` is filled in (same shape,
    same dtype) by `backward()` for every tensor with requires_grad.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # ---- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # ---- autodiff ------------------------------------------------------------

    def backward(self):
        """Reverse-mode pass from a scalar loss down to all grad leaves.

        Accumulates into `.grad` (callers zero grads between steps).
        Returns the Tape that was walked, for introspection in tests.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.shape}")
        tape = build_tape(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: this is where user-visible gradients land
                if node.requires_grad:
                    _accumulate(node, g)
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
        return tape

    def zero_grad(self):
        self.grad = None

    # ---- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if np.isscalar(other):
            return mul(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def min(self, axis=None, keepdims=False):
        return reduce_min(self, axis, keepdims)


class Tape:
    """Topologically ordered record of the operations reaching a loss.

    nodes[i]'s parents always appear before index i; the backward pass
    walks the list once, in reverse.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)


def build_tape(root):
    """Iterative post-order DFS producing a topologically sorted Tape."""
    nodes = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            nodes.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return Tape(nodes)


# ---- helpers ----------------------------------------------------------------


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _accumulate(node, g):
    if node.grad is None:
        node.grad = np.array(g, copy=True)
    else:
        node.grad = node.grad + g


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _make(data, parents, backward_fn):
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ---- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    data = a.data + b.data
    flops.count(data.size)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), bw)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    data = a.data * b.data
    flops.count(data.size)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), bw)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    data = a.data / b.data
    flops.count(data.size)

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(data, (a, b), bw)


def power(a, p):
    a = _as_tensor(a)
    p = float(p)
    data = a.data ** p
    flops.count(data.size)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(data, (a,), bw)


def exp(a):
    a = _as_tensor(a)
    data = np.exp(a.data)
    flops.count(data.size)

    def bw(g):
        return (g * data,)

    return _make(data, (a,), bw)


def log(a):
    a = _as_tensor(a)
    data = np.log(a.data)
    flops.count(data.size)

    def bw(g):
        return (g / a.data,)

    return _make(data, (a,), bw)


def relu(a):
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)
    flops.count(data.size)

    def bw(g):
        return (g * (a.data > 0),)

    return _make(data, (a,), bw)


def leaky_relu(a, slope=0.2):
    a = _as_tensor(a)
    data = np.where(a.data > 0, a.data, slope * a.data)
    flops.count(data.size)

    def bw(g):
        return (g * np.where(a.data > 0, 1.0, slope),)

    return _make(data, (a,), bw)


def sigmoid(a):
    a = _as_tensor(a)
    # stable both directions
    data = np.empty_like(a.data)
    pos = a.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    data[~pos] = ex / (1.0 + ex)
    flops.count(4 * data.size)

    def bw(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), bw)


def gelu(a):
    """Exact (erf-based) GeLU."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    data = a.data * cdf
    flops.count(6 * data.size)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return _make(data, (a,), bw)


def softplus(a):
    """log(1 + exp(x)) without overflow; derivative is sigmoid."""
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    flops.count(4 * data.size)

    def bw(g):
        s = np.empty_like(a.data)
        pos = a.data >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
        ex = np.exp(a.data[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _make(data, (a,), bw)


def clip(a, lo, hi):
    """Clamp with straight-through-zero gradient outside [lo, hi]."""
    a = _as_tensor(a)
    data = np.clip(a.data, lo, hi)
    flops.count(data.size)

    def bw(g):
        mask = (a.data >= lo) & (a.data <= hi)
        return (g * mask,)

    return _make(data, (a,), bw)


# ---- structural -------------------------------------------------------------


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(int(s) for s in (shape if hasattr(shape, "__len__") else (shape,)))
    if np.prod(shape, dtype=np.int64) != a.size and -1 not in shape:
        raise DimensionError(
            f"cannot reshape {a.shape} ({a.size} elements) to {shape}"
        )
    data = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(data, (a,), bw)


def transpose(a, axes=None):
    a = _as_tensor(a)
    data = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(data, (a,), bw)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make(data, tuple(tensors), bw)


def getitem(a, idx):
    a = _as_tensor(a)
    data = a.data[idx]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data, dtype=a.dtype)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(data, (a,), bw)


# ---- reductions -------------------------------------------------------------


def reduce_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    data = np.asarray(data, dtype=a.dtype)
    flops.count(a.size)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _make(data, (a,), bw)


def reduce_mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis, keepdims), 1.0 / n)


def _reduce_extreme(a, axis, keepdims, fn):
    a = _as_tensor(a)
    data = np.asarray(fn(a.data, axis=axis, keepdims=keepdims), dtype=a.dtype)
    flops.count(a.size)

    def bw(g):
        g = np.asarray(g)
        full = np.asarray(fn(a.data, axis=axis, keepdims=True))
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        mask = (a.data == full).astype(a.dtype)
        counts = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
        return (np.broadcast_to(g, a.shape) * mask / counts,)

    return _make(data, (a,), bw)


def reduce_max(a, axis=None, keepdims=False):
    return _reduce_extreme(a, axis, keepdims, np.max)


def reduce_min(a, axis=None, keepdims=False):
    return _reduce_extreme(a, axis, keepdims, np.min)


# ---- linear algebra ---------------------------------------------------------


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    flops.count(2 * a.shape[0] * a.shape[1] * b.shape[1])

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, (a, b), bw)


def softmax(a, axis=-1):
    """Max-subtracted stable softmax along `axis`."""
    a = _as_tensor(a)
    if a.ndim == 0 or (axis >= a.ndim if axis >= 0 else -axis > a.ndim):
        raise DimensionError(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    flops.count(4 * data.size)

    def bw(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _make(data, (a,), bw)


# ---- non-differentiable conveniences ---------------------------------------


def constant(x, dtype=None):
    return _as_tensor(x, dtype)


def zeros(shape, dtype=np.float64):
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float64):
    return Tensor(np.ones(shape, dtype=dtype))
