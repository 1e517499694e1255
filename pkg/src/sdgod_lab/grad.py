"""Dense float64 tensors with a reverse-mode gradient tape.

Every op records itself when any input requires grad.  ``backward`` replays the
recorded ops reachable from a scalar loss in exact reverse execution order.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

_SEQ = itertools.count()
_STATE = threading.local()


class ShapeError(ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in self.shapes)}")


class GradError(RuntimeError):
    pass


def is_grad_enabled():
    return getattr(_STATE, "enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


class _Node:
    __slots__ = ("seq", "op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.seq = next(_SEQ)
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def op(self):
        return self._node.op if self._node is not None else None

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op, data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out.requires_grad = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(op, parents, backward)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --------------------------------------------------------------------------- ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c):
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def tag(a, name):
    """Identity op that names a node on the tape (``op == "tag:<name>"``)."""
    return _make(f"tag:{name}", a.data, (a,), lambda g: (g,))


def relu(a):
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def sum(a, axis=None):
    data = a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(data, dtype=np.float64), (a,), backward)


def mean(a, axis=None):
    data = a.data.mean(axis=axis)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make("mean", np.asarray(data, dtype=np.float64), (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat")
    ref = tensors[0].shape
    ax = axis % len(ref) if ref else 0
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def take_rows(a, index):
    """Rows ``a[index]`` along axis 0; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make("take_rows", a.data[index], (a,), backward)


def gather_flat(a, index):
    """Gather from the flattened tensor; index -1 yields 0 (used for padding)."""
    index = np.asarray(index, dtype=np.intp)
    # a trailing zero makes index -1 read 0 without masking
    padded = np.append(a.data.reshape(-1), 0.0)
    data = padded[index]

    def backward(g):
        out = np.bincount((index % padded.size).reshape(-1), weights=g.reshape(-1), minlength=padded.size)
        return (out[:-1].reshape(a.shape),)

    return _make("gather_flat", data, (a,), backward)


def l2_normalize(a, eps=0.0):
    """Unit-normalize along the last axis.  Exact zero vectors stay zero with zero gradient."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    safe = np.where(norm > eps, norm, 1.0)
    zero = norm <= eps
    y = np.where(zero, 0.0, a.data / safe)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(zero, 0.0, (g - y * dot) / safe),)

    return _make("l2_normalize", y, (a,), backward)


def log_softmax(a):
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", y, (a,), backward)


def _reduce(x, reduction, op):
    if reduction == "none":
        return x
    if reduction == "sum":
        return sum(x)
    if reduction == "mean":
        return mean(x)
    raise ValueError(f"{op}: unknown reduction {reduction!r}")


def smooth_l1(pred, target, beta=1.0, reduction="sum"):
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("smooth_l1", pred.shape, target.shape)
    d = pred.data - target.data
    ad = np.abs(d)
    quad = ad < beta
    data = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)

    def backward(g):
        gd = g * np.where(quad, d / beta, np.sign(d))
        return gd, -gd

    return _reduce(_make("smooth_l1", data, (pred, target), backward), reduction, "smooth_l1")


def bce_with_logits(logits, targets, reduction="mean"):
    logits, targets = as_tensor(logits), as_tensor(targets)
    if logits.shape != targets.shape:
        raise ShapeError("bce_with_logits", logits.shape, targets.shape)
    x, t = logits.data, targets.data
    data = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    sig = 1.0 / (1.0 + np.exp(-x))

    def backward(g):
        return g * (sig - t), -g * x

    return _reduce(_make("bce_with_logits", data, (logits, targets), backward), reduction, "bce_with_logits")


def cross_entropy(log_probs, labels, reduction="mean"):
    """Negative log-likelihood of integer ``labels`` under row-wise ``log_probs``."""
    labels = np.asarray(labels, dtype=np.intp)
    if log_probs.data.ndim != 2 or labels.shape != (log_probs.shape[0],):
        raise ShapeError("cross_entropy", log_probs.shape, labels.shape)
    rows = np.arange(labels.size)
    data = -log_probs.data[rows, labels]

    def backward(g):
        out = np.zeros_like(log_probs.data)
        out[rows, labels] = -g
        return (out,)

    return _reduce(_make("cross_entropy", data, (log_probs,), backward), reduction, "cross_entropy")


def cosine_similarity_matrix(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("cosine_similarity_matrix", a.shape, b.shape)
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


# ---------------------------------------------------------------------- backward


class Tape:
    """Recorded ops reachable from a root tensor, in execution order."""

    def __init__(self, tensors):
        self.tensors = tensors

    @classmethod
    def collect(cls, root):
        seen = set()
        found = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t._node.parents)
        found.sort(key=lambda t: t._node.seq)
        return cls(found)

    def __len__(self):
        return len(self.tensors)

    def ops(self):
        return [t._node.op for t in self.tensors]


def backward(loss):
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    tape = Tape.collect(loss)
    flow = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for t in reversed(tape.tensors):
        g = flow.pop(id(t), None)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
        for p, pg in zip(t._node.parents, t._node.backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._node is None:
                prev = leaves.get(id(p))
                leaves[id(p)] = (p, pg if prev is None else prev[1] + pg)
            else:
                prev = flow.get(id(p))
                flow[id(p)] = pg if prev is None else prev + pg
    for p, g in leaves.values():
        p.grad = g.copy() if p.grad is None else p.grad + g


# --------------------------------------------------------------------- optimizer


def sgd_step(params, lr, momentum=0.0, weight_decay=0.0, state=None):
    """SGD with momentum; weight decay enters as L2 added to the gradient.

    ``state`` maps ``id(param)`` to its velocity buffer and is updated in place.
    """
    if state is None:
        state = {}
    for p in params:
        if p.grad is None:
            raise GradError(f"parameter of shape {p.shape} has no gradient")
    for p in params:
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        if momentum:
            v = state.get(id(p))
            v = g.copy() if v is None else momentum * v + g
            state[id(p)] = v
            g = v
        p.data -= lr * g
        p.grad = np.zeros_like(p.data)
    return state


class SGD:
    def __init__(self, params, lr, momentum=0.9, weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state = {}

    def step(self, lr=None):
        sgd_step(self.params, self.lr if lr is None else lr, self.momentum, self.weight_decay, self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
