"""Dense float64 tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor` holding a closure that pushes the
upstream gradient into its inputs.  :meth:`Tensor.backward` orders the
recorded graph topologically and runs those closures once each, in reverse.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_FLOOR = 1e-12
LN_EPS = 1e-5

# per thread, so a client's teacher pass cannot switch off another client's graph
_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


class DimensionError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (teacher / frozen paths)."""
    prev = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mul(tsum(self), 1.0 / self.data.size)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self) -> None:
        """Populate ``grad`` on every ``requires_grad`` leaf reachable from this scalar."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward already ran on this graph; rebuild the forward pass first")
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _tracks(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._consumed = True
                node._backward = None
                node._parents = ()
        self._consumed = True


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that carry gradient, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and _tracks(p):
                stack.append((p, False))
    return order


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(_tracks(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)), "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def log(x: Tensor, floor: float = PROB_FLOOR) -> Tensor:
    """Natural log with the input clamped below at ``floor`` (no gradient through the clamp)."""
    clamped = x.data < floor
    safe = np.where(clamped, floor, x.data)
    return _make(np.log(safe), (x,), lambda g: (np.where(clamped, 0.0, g / safe),), "log")


# ---------------------------------------------------------------- shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = gb = None
        if _tracks(a):
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), sa)
        if _tracks(b):
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, sa[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, sb)
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.data.ndim - 2)) + (x.data.ndim - 1, x.data.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    ax = axis % tensors[0].data.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors,
                 lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)].ravel()[0]
        raise IndexError(f"token id {int(bad)} outside vocabulary of size {vocab}")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), backward, "embedding")


# ---------------------------------------------------------------- normalizers

def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.  ``mask`` (broadcastable, True = keep) zeroes excluded entries."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: last dim {n} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gx = None
        if _tracks(x):
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------- losses

def cross_entropy(q: Tensor, targets) -> Tensor:
    """Per-row ``-ln q[target]`` with q floored at 1e-12.

    ``q`` holds normalized distributions ``[..., V]``; returns shape ``q.shape[:-1]``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    V = q.shape[-1]
    if targets.shape != q.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {targets.shape} vs q {q.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id outside vocabulary of size {V}")
    picked = np.take_along_axis(q.data, targets[..., None], axis=-1)[..., 0]
    clamped = picked < PROB_FLOOR
    safe = np.where(clamped, PROB_FLOOR, picked)

    def backward(g):
        gq = np.zeros_like(q.data)
        np.put_along_axis(gq, targets[..., None], np.where(clamped, 0.0, -g / safe)[..., None], axis=-1)
        return (gq,)

    out = _make(-np.log(safe), (q,), backward, "cross_entropy")
    return out


def clamped_count(q: np.ndarray, targets) -> int:
    """How many target probabilities fall under the floor (diagnostic for cross_entropy)."""
    picked = np.take_along_axis(q, np.asarray(targets)[..., None], axis=-1)
    return int((picked < PROB_FLOOR).sum())


def kl_divergence(target, student: Tensor) -> Tensor:
    """Row-wise ``sum target * ln(target / student)``; the target side never receives gradient."""
    p = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if p.shape != student.shape:
        raise DimensionError(f"kl_divergence: {p.shape} vs {student.shape}")
    s = student.data
    clamped = s < PROB_FLOOR
    safe = np.where(clamped, PROB_FLOOR, s)
    pos = p > 0
    logp = np.log(np.where(pos, p, 1.0))
    terms = np.where(pos, p * (logp - np.log(safe)), 0.0)

    def backward(g):
        return (np.where(clamped, 0.0, -g[..., None] * p / safe),)

    return _make(terms.sum(axis=-1), (student,), backward, "kl")


def entropy(q: np.ndarray) -> np.ndarray:
    """Row-wise entropy in nats, ``0 ln 0 = 0``."""
    q = np.asarray(q, dtype=np.float64)
    pos = q > 0
    return -np.where(pos, q * np.log(np.where(pos, q, 1.0)), 0.0).sum(axis=-1)


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Run ``loss.backward()``; any listed parameter the loss never touched gets a zero grad."""
    loss.backward()
    for p in params:
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros_like(p.data)
