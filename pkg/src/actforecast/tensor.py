"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every op builds a fresh node carrying its parents and a closure that maps the
output gradient to parent gradients. ``backward`` walks the graph once in
reverse topological order. Leading batch axes pass through every op, so the
same code serves a single ``T x d`` sample and a ``B x T x d`` batch.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class EmptySequenceError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op
        self.grad = np.zeros_like(self.data) if (requires_grad and not _parents) else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad():
    """Compute values only; ops inside record no graph (per thread)."""
    prev = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


def _node(data: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, fn, op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), fn, "mul")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def fn(g):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), fn, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def fn(g):
        return (g * (1.0 - out * out),)

    return _node(out, (x,), fn, "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def fn(g):
        return (g * mask,)

    return _node(out, (x,), fn, "relu")


# --- linear algebra and shape ops ----------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` over the last two axes; leading axes broadcast as in numpy.

    ``a`` may be a plain vector (a single row); ``b`` must be a matrix.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.outer(a.data, g)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(out, (a, b), fn, "matmul")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    out = np.swapaxes(x.data, -1, -2)

    def fn(g):
        return (np.swapaxes(g, -1, -2),)

    return _node(out, (x,), fn, "transpose")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def fn(g):
        full = np.zeros_like(x.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _node(np.array(out, dtype=DTYPE), (x,), fn, "getitem")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; every other extent must agree."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(out, tuple(tensors), fn, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def fn(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(out, tuple(tensors), fn, "stack")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def fn(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), fn, "reshape")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum())

    def fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), fn, "sum")


# --- normalisation, pooling, losses --------------------------------------------


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    z = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (m,), fn, "softmax")


def layer_norm(v: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """gain * (v - mean) / sqrt(var + eps) + bias over the last axis."""
    v, gain, bias = as_tensor(v), as_tensor(gain), as_tensor(bias)
    k = v.shape[-1]
    if gain.shape != (k,) or bias.shape != (k,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis {k}")
    mu = v.data.mean(axis=-1, keepdims=True)
    xc = v.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data

    def fn(g):
        gx = g * gain.data
        gv = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return gv, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _node(out, (v, gain, bias), fn, "layer_norm")


def max_over_time(c: Tensor) -> Tensor:
    """Column-wise max over axis -2. Gradient goes to the first argmax row."""
    if c.ndim < 2 or c.shape[-2] == 0:
        raise EmptySequenceError(f"max_over_time: need at least one row, got shape {c.shape}")
    idx = np.argmax(c.data, axis=-2)
    out = np.take_along_axis(c.data, idx[..., None, :], axis=-2)[..., 0, :]

    def fn(g):
        full = np.zeros_like(c.data)
        np.put_along_axis(full, idx[..., None, :], g[..., None, :], axis=-2)
        return (full,)

    return _node(out, (c,), fn, "max_over_time")


def cross_entropy(scores: Tensor, labels, weights=None) -> Tensor:
    """Summed ``-log softmax(scores)[label]`` over every row of ``scores``.

    ``labels`` has the shape of ``scores`` minus its last axis. Optional
    ``weights`` (same shape as ``labels``) scale each row's term.
    """
    labels = np.asarray(labels)
    n = scores.shape[-1]
    if labels.shape != scores.shape[:-1]:
        raise ShapeError(f"cross_entropy: labels {labels.shape} do not match scores {scores.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"cross_entropy: label out of range [0, {n}): {labels.min()}..{labels.max()}")
    z = scores.data - scores.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    labels = labels.astype(np.intp)
    picked = np.take_along_axis(z, labels[..., None], axis=-1)[..., 0]
    per_row = lse - picked
    w = np.ones_like(per_row) if weights is None else np.broadcast_to(np.asarray(weights, dtype=DTYPE), per_row.shape)
    out = np.asarray((per_row * w).sum())

    def fn(g):
        p = np.exp(z - lse[..., None])
        p -= np.eye(n)[labels]
        return (g * w[..., None] * p,)

    return _node(out, (scores,), fn, "cross_entropy")


def embed(table: Tensor, index) -> Tensor:
    """Row lookup ``table[index]``; gradient scatter-adds into the used rows."""
    index = np.asarray(index, dtype=np.intp)
    rows = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= rows):
        raise IndexError(f"embed: index out of range [0, {rows}): {index.min()}..{index.max()}")
    out = table.data[index]

    def fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(out, (table,), fn, "embed")


# --- backward -----------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Calling twice without ``zero_grad`` adds the gradients again.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not on the tape (no input requires grad)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# --- finite differences ---------------------------------------------------------


def numerical_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every element of ``x`` (in place)."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return g


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(floor, np.abs(numeric))))


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor] | dict[str, Tensor], eps: float = 1e-5) -> dict[str, float]:
    """Compare backprop against central differences; returns max rel. error per tensor."""
    named = params if isinstance(params, dict) else {str(i): p for i, p in enumerate(params)}
    zero_grads(named.values())
    backward(f())
    analytic = {k: p.grad.copy() for k, p in named.items()}
    return {k: max_relative_error(analytic[k], numerical_grad(f, p, eps)) for k, p in named.items()}
