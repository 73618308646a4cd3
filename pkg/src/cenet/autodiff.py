"""Small dense reverse-mode autodiff engine on top of numpy.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. Calling
:func:`backward` on a scalar walks that graph once in reverse topological
order. The graph is thrown away after each step; nothing is persistent.

All arrays are float64.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backward_fn=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar for the few ops that read naturally that way
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
        return scale(self, -1.0)


class Parameter(Tensor):
    """A trainable leaf. ``grad`` always has the value's shape."""

    __slots__ = ("name", "grad", "frozen")

    def __init__(self, data, name: str, frozen: bool = False):
        super().__init__(np.array(data, dtype=DTYPE, copy=True), requires_grad=not frozen)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.frozen = frozen

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad[...] = 0.0

    def unfreeze(self) -> None:
        self.frozen = False
        self.requires_grad = True

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording (inference, frozen feature extraction)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _result(data, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def tanh_op(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def log_op(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; no gradient where the floor is active."""
    clipped = np.maximum(x.data, floor) if floor > 0 else x.data
    active = x.data >= floor

    def backward(g):
        return (np.where(active, g / clipped, 0.0),)

    return _result(np.log(clipped), (x,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """``a @ b`` (or ``a @ b.T``) for 2-D operands."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    bd = b.data.T if transpose_b else b.data
    if a.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape} (transpose_b={transpose_b})")
    out = a.data @ bd

    def backward(g):
        ga = g @ bd.T
        gb = a.data.T @ g
        return ga, (gb.T if transpose_b else gb)

    return _result(out, (a, b), backward)


def linear(W: Tensor, b: Tensor, x: Tensor) -> Tensor:
    """Affine map ``x @ W.T + b`` over a batch of row vectors.

    ``W`` is ``[out, in]``, ``b`` is ``[out]`` and ``x`` is ``[batch, in]``.
    """
    if W.ndim != 2 or x.ndim != 2 or W.shape[1] != x.shape[1]:
        raise ShapeError(f"linear: weight {W.shape} incompatible with input {x.shape}")
    if b.shape != (W.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} incompatible with weight {W.shape}")
    out = x.data @ W.data.T + b.data

    def backward(g):
        return g.T @ x.data, g.sum(axis=0), g @ W.data

    return _result(out, (W, b, x), backward)


# ---------------------------------------------------------------- shape ops


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Horizontal concatenation of ``[batch, d_i]`` tensors."""
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    if len(xs) == 1:
        return xs[0]
    batch = xs[0].shape[0]
    for x in xs:
        if x.ndim != 2 or x.shape[0] != batch:
            raise ShapeError(f"concat: batch dimension mismatch {[t.shape for t in xs]}")
    widths = [x.shape[1] for x in xs]
    cuts = np.cumsum(widths)[:-1]
    out = np.concatenate([x.data for x in xs], axis=1)
    return _result(out, xs, lambda g: tuple(np.split(g, cuts, axis=1)))


def split(x: Tensor, widths: Sequence[int]) -> list[Tensor]:
    """Inverse of :func:`concat` along the column axis."""
    if sum(widths) != x.shape[1]:
        raise ShapeError(f"split widths {list(widths)} do not cover {x.shape}")
    parts = []
    start = 0
    for w in widths:
        parts.append(_column_slice(x, start, start + w))
        start += w
    return parts


def _column_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        return (full,)

    return _result(x.data[:, lo:hi].copy(), (x,), backward)


def take_rows(table: Tensor, idx) -> Tensor:
    """Embedding lookup: ``table[idx]`` with scatter-add backward."""
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range for table with {n} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(table.data[idx], (table,), backward)


def pick(x: Tensor, idx) -> Tensor:
    """Per-row element selection ``x[i, idx[i]]`` -> ``[batch]``."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def backward(g):
        full = np.zeros_like(x.data)
        full[rows, idx] = g
        return (full,)

    return _result(x.data[rows, idx], (x,), backward)


# ---------------------------------------------------------------- reductions


def sum_op(x: Tensor, weights=None) -> Tensor:
    """Scalar ``sum(weights * x)``; ``weights`` is a constant array."""
    if weights is None:
        return _result(np.array(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),))
    w = np.broadcast_to(np.asarray(weights, dtype=DTYPE), x.shape)
    return _result(np.array((w * x.data).sum()), (x,), lambda g: (g * w,))


def mean_op(x: Tensor) -> Tensor:
    return scale(sum_op(x), 1.0 / max(x.data.size, 1))


def softmax_row(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if x.data.size == 0 or x.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward)


def logsumexp_rows(x: Tensor, mask=None) -> Tensor:
    """Row-wise log-sum-exp of a 2-D tensor over entries where ``mask`` is true.

    Rows with no admissible entry return 0 and receive no gradient.
    """
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    masked = np.where(mask, x.data, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    empty = ~np.isfinite(m)
    m = np.where(empty, 0.0, m)
    e = np.where(mask, np.exp(masked - m), 0.0)
    s = e.sum(axis=1, keepdims=True)
    out = np.where(empty, 0.0, np.log(np.where(empty, 1.0, s)) + m)[:, 0]
    w = e / np.where(s > 0, s, 1.0)

    return _result(out, (x,), lambda g: (g[:, None] * w,))


def l2_normalize(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Row-wise ``x / (||x|| + eps)``. The eps keeps near-zero rows finite."""
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    denom = norm + eps
    y = x.data / denom

    def backward(g):
        # d/dx [x / (|x| + eps)] = g/denom - x (x.g) / (|x| denom^2)
        dot = (g * x.data).sum(axis=1, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        return (g / denom - x.data * dot / (safe * denom * denom),)

    return _result(y, (x,), backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Summed binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets."""
    t = np.asarray(targets, dtype=DTYPE).reshape(logits.shape)
    z = logits.data
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return _result(np.array(loss.sum()), (logits,), lambda g: (g * (sig - t),))


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``grad`` of every reachable trainable Parameter."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            if not node.frozen:
                node.grad += g
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction. Frozen parameters are skipped entirely."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p in self.params:
            if p.frozen:
                p.grad[...] = 0.0
                continue
            g = p.grad
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad[...] = 0.0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.m:
            self.m[name][...] = arrays[f"adam.m.{name}"]
            self.v[name][...] = arrays[f"adam.v.{name}"]
        self.step_count = step_count
