"""Minimal reverse-mode autodiff over numpy arrays.

Operations executed while a :class:`Tape` is active are appended to it in
execution order, so the tape is already topologically sorted and
:func:`backward` simply walks it in reverse.  Outside a tape every op is a
plain numpy computation (inference mode).

Only the ops the transformer needs are provided.  Slicing is treated as a
gather whose backward pass scatter-adds into a zero array shaped like the
source, which is what routes sub-network gradients into the shared prefix of
the super-network weights.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ContractError, DimensionError, GradCheckError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _stack(name):
    s = getattr(_local, name, None)
    if s is None:
        s = []
        setattr(_local, name, s)
    return s


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: "Tensor"
    backward: Callable


class Tape:
    """Computation record.  Use as a context manager around the forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _stack("tapes").append(self)
        return self

    def __exit__(self, *exc):
        _stack("tapes").pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def kinds(self):
        return [n.kind for n in self.nodes]


def _active_tape():
    s = _stack("tapes")
    return s[-1] if s else None


@dataclass
class FlopCounter:
    mult_adds: int = 0
    by_kind: dict = field(default_factory=dict)


@contextlib.contextmanager
def count_flops():
    """Count multiply-adds executed by :func:`matmul` inside the block."""
    counter = FlopCounter()
    _stack("counters").append(counter)
    try:
        yield counter
    finally:
        _stack("counters").pop()


@contextlib.contextmanager
def deterministic():
    """Pin BLAS to one thread so repeated runs are bitwise reproducible."""
    with threadpool_limits(limits=1):
        yield


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")
    __array_ufunc__ = None   # ndarray (op) Tensor defers to the Tensor operators

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad=False, dtype=None, name=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(kind, data, inputs, backward):
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    out.is_leaf = False
    if track:
        tape.nodes.append(Node(kind, tuple(inputs), out, backward))
    return out


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise -------------------------------------------------------------


def add(a, b):
    a, b = (_as_tensor(a, b if isinstance(b, Tensor) else None),
            _as_tensor(b, a if isinstance(a, Tensor) else None))
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = (_as_tensor(a, b if isinstance(b, Tensor) else None),
            _as_tensor(b, a if isinstance(a, Tensor) else None))
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = (_as_tensor(a, b if isinstance(b, Tensor) else None),
            _as_tensor(b, a if isinstance(a, Tensor) else None))

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = (_as_tensor(a, b if isinstance(b, Tensor) else None),
            _as_tensor(b, a if isinstance(a, Tensor) else None))
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), bw)


def _sigmoid(a):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-a))


def exp(x):
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x):
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x):
    s = _sigmoid(x.data)
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def silu(x):
    s = _sigmoid(x.data)
    return _make("silu", x.data * s, (x,),
                 lambda g: (g * s * (1 + x.data * (1 - s)),))


def astype(x, dtype):
    src = x.dtype
    return _make("astype", x.data.astype(dtype), (x,), lambda g: (g.astype(src),))


# reductions / shape ------------------------------------------------------


def sum_(x, axis=None, keepdims=False):
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


def l2norm(x, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``; the subgradient at zero is taken as 0."""
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1)
        return (np.where(n > 0, g * x.data / safe, 0).astype(x.dtype),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _make("l2norm", out, (x,), bw)


def reshape(x, shape):
    src = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None):
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x, idx):
    """Slice/gather.  Backward scatter-adds into zeros shaped like ``x``."""
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make("getitem", x.data[idx], (x,), bw)


def take(x, indices, axis=0):
    """Gather along ``axis`` (embedding lookup when axis=0)."""
    indices = np.asarray(indices)
    axis = axis % x.ndim
    if axis != 0 and indices.ndim != 1:
        raise DimensionError("take along a non-leading axis needs a 1-D index array")

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        if axis == 0:
            np.add.at(full, indices, g)
        else:
            np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _make("take", np.take(x.data, indices, axis=axis), (x,), bw)


def concat(tensors: Sequence[Tensor], axis=-1):
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


# linear algebra ----------------------------------------------------------


def matmul(a, b):
    """``a @ b`` with numpy broadcasting over leading (batch) axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc
    for c in _stack("counters"):
        c.mult_adds += int(np.prod(out.shape[:-1])) * a.shape[-1] * out.shape[-1]

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", y, (x,),
                 lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def softmax_rows(x):
    """Row-wise softmax of a matrix (max-subtracted for stability)."""
    return softmax(x, axis=-1)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", y, (x,), bw)


def rms_norm(x, gamma, eps=1e-5):
    """``x / sqrt(mean(x**2) + eps) * gamma`` over the last axis."""
    if x.shape[-1] != gamma.shape[-1]:
        raise DimensionError(f"rms_norm width mismatch: {x.shape} vs gamma {gamma.shape}")
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xh = x.data * r
    out = xh * gamma.data

    def bw(g):
        gx = gg = None
        if gamma.requires_grad:
            gg = (g * xh).reshape(-1, gamma.shape[-1]).sum(axis=0)
        if x.requires_grad:
            dxh = g * gamma.data
            gx = r * (dxh - xh * np.mean(dxh * xh, axis=-1, keepdims=True))
        return gx, gg

    return _make("rms_norm", out, (x, gamma), bw)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under ``logits``."""
    targets = np.asarray(targets)
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    n = t.size
    nll = lse - z[np.arange(n), t]
    loss = np.asarray(nll.mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), t] -= 1.0
        return ((p * (g / n)).reshape(logits.shape).astype(logits.dtype),)

    return _make("cross_entropy", loss, (logits,), bw)


# reverse pass ------------------------------------------------------------


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] = ()):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients add onto any existing ``.grad`` (so several backward passes sum).
    Tensors in ``params`` that the loss does not reach get a zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.is_leaf or not loss.requires_grad:
        raise ContractError("loss is not reachable from any recorded op")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            k = id(inp)
            grads[k] = grads[k] + gi if k in grads else gi
            if inp.is_leaf:
                leaves[k] = inp
    for k, leaf in leaves.items():
        g = grads[k].astype(leaf.dtype, copy=False)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def grad_check(f, point, h=1e-4, max_entries=None, rng=None):
    """Compare analytic gradients of scalar ``f`` to central differences.

    ``point`` is a list of arrays, passed to ``f`` as tensors.  Returns the
    maximum over checked entries of ``|analytic - fd| / (|fd| + 1e-12)``.
    With ``max_entries`` only a random subset of each array is probed.
    Raises :class:`GradCheckError` carrying ``(array, flat_index)`` if ``f``
    evaluates to a non-finite value.
    """
    point = [np.array(p, dtype=np.float64) for p in point]
    leaves = [Tensor(p.copy(), requires_grad=True) for p in point]
    with Tape() as tape:
        out = f(*leaves)
    backward(tape, out, leaves)

    def evaluate(arrays, where):
        val = float(f(*[Tensor(a) for a in arrays]).data)
        if not np.isfinite(val):
            raise GradCheckError(f"non-finite evaluation at {where}", index=where)
        return val

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for i, p in enumerate(point):
        idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            idx = rng.choice(p.size, size=max_entries, replace=False)
        analytic = leaves[i].grad.reshape(-1)
        for j in idx:
            arrays = [q.copy() for q in point]
            flat = arrays[i].reshape(-1)
            flat[j] = p.reshape(-1)[j] + h
            fp = evaluate(arrays, (i, int(j)))
            flat[j] = p.reshape(-1)[j] - h
            fm = evaluate(arrays, (i, int(j)))
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(analytic[j] - fd) / (abs(fd) + 1e-12))
    return worst
