"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every primitive below records its
inputs and a backward closure when any input requires a gradient, so calling
:func:`backward` on a scalar result populates ``.grad`` on the leaves.

Shapes are explicit: apart from adding a bias vector over the last axis and
applying a 2-D mask to every leading slice in :func:`softmax_masked`, operands
must match exactly.
"""
import contextlib
import math

import numpy as np

from .backend import kernels

_state = {"dtype": np.float32, "grad": True}


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def grad_enabled():
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=_state["dtype"])
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = []
    visited = set()
    stack = [(loss, False)]
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

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg


# ----------------------------------------------------------------------------
# primitives

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _node(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        d = b.shape[0]
        return _node(a.data + b.data, (a, b), lambda g: (g, g.reshape(-1, d).sum(axis=0)))
    raise ShapeError("add", a.shape, b.shape)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c):
    c = float(c)
    dt = a.data.dtype.type
    return _node(a.data * dt(c), (a,), lambda g: (g * dt(c),))


def matmul(a, b):
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2 and ad.shape[1] == bd.shape[0]:
        return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))
    if (ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] == bd.shape[0]
            and ad.shape[2] == bd.shape[1]):
        return _node(ad @ bd, (a, b),
                     lambda g: (g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g))
    raise ShapeError("matmul", a.shape, b.shape)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", *[x.shape for x in tensors])
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def slice_(a, key):
    shape = a.shape
    dt = a.data.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dt)
        out[key] = g
        return (out,)

    return _node(a.data[key], (a,), bw)


def transpose(a, axes=None):
    if axes is None:
        if a.ndim != 2:
            raise ShapeError("transpose", a.shape)
        axes = (1, 0)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def reshape(a, shape):
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _node(data, (a,), lambda g: (g.reshape(old),))


def embedding_lookup(table, ids):
    """Gather rows ``table[ids]``; ``ids`` is an integer array."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding_lookup", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range for table {table.shape}")
    shape = table.shape
    dt = table.data.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dt)
        np.add.at(out, ids, g)
        return (out,)

    return _node(table.data[ids], (table,), bw)


def softmax_masked(logits, mask=None, axis=-1):
    """Softmax over the last axis of ``logits + mask``.

    ``mask`` is additive with shape equal to the last two dimensions of
    ``logits`` and is applied to every leading slice.
    """
    if axis not in (-1, logits.ndim - 1):
        raise ValueError("softmax_masked only supports the last axis")
    shape = logits.shape
    x = logits.data
    if x.ndim == 1:
        x3 = x.reshape(1, 1, -1)
    else:
        x3 = x.reshape(-1, shape[-2], shape[-1])
    if mask is None:
        m = np.zeros(x3.shape[1:], dtype=x.dtype)
    else:
        m = np.asarray(mask, dtype=x.dtype)
        if m.ndim == 1:
            m = m.reshape(1, -1)
        if m.shape != x3.shape[1:]:
            raise ShapeError("softmax_masked", shape, m.shape)
    y3 = kernels.softmax_masked_fwd(np.ascontiguousarray(x3), np.ascontiguousarray(m))

    def bw(g):
        return (kernels.softmax_masked_bwd(y3, np.ascontiguousarray(g.reshape(y3.shape))).reshape(shape),)

    return _node(y3.reshape(shape), (logits,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    shape = x.shape
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y, xhat, rstd = kernels.layer_norm_fwd(x2, gain.data, bias.data, eps)
    gd = gain.data

    def bw(g):
        gx, gg, gb = kernels.layer_norm_bwd(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gd)
        return gx.reshape(shape), gg, gb

    return _node(y.reshape(shape), (x, gain, bias), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    dt = x.dtype.type
    inner = dt(_GELU_C) * (x + dt(0.044715) * x ** 3)
    t = np.tanh(inner)
    y = dt(0.5) * x * (1 + t)

    def bw(g):
        dinner = dt(_GELU_C) * (1 + dt(3 * 0.044715) * x * x)
        return (g * (dt(0.5) * (1 + t) + dt(0.5) * x * (1 - t * t) * dinner),)

    return _node(y, (a,), bw)


def tanh(a):
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1 - y * y),))


def sigmoid(a):
    x = a.data
    with np.errstate(over="ignore"):
        y = (1 / (1 + np.exp(-x))).astype(x.dtype, copy=False)
    return _node(y, (a,), lambda g: (g * y * (1 - y),))


def sum_(a):
    shape = a.shape
    dt = a.data.dtype
    return _node(np.asarray(a.data.sum(), dtype=dt), (a,),
                 lambda g: (np.full(shape, g, dtype=dt),))


def mean(a):
    n = a.data.size
    return scale(sum_(a), 1.0 / n)


def dropout(a, p, rng):
    """Inverted dropout; identity when ``p == 0`` or no generator is given."""
    if p <= 0 or rng is None:
        return a
    dt = a.data.dtype.type
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) * dt(1.0 / (1.0 - p))
    return mul(a, Tensor(keep))


def log_softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_masked(logits, labels, position_mask=None):
    """Mean negative log-likelihood of ``labels`` over rows selected by ``position_mask``."""
    x = logits.data
    if x.ndim != 2:
        raise ShapeError("cross_entropy_masked", x.shape)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise ShapeError("cross_entropy_masked", x.shape, labels.shape)
    if position_mask is None:
        w = np.ones(x.shape[0], dtype=x.dtype)
    else:
        w = np.asarray(position_mask, dtype=x.dtype)
        if w.shape != labels.shape:
            raise ShapeError("cross_entropy_masked", x.shape, w.shape)
    count = float(w.sum())
    if count <= 0:
        raise ValueError("cross_entropy_masked: no positions selected")
    logp = log_softmax_np(x)
    rows = np.arange(x.shape[0])
    nll = -logp[rows, labels]
    loss = np.asarray((nll * w).sum() / count, dtype=x.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (w / count)[:, None] * g,)

    return _node(loss, (logits,), bw)
