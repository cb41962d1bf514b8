"""Dense float64 tensors with a dynamic reverse-mode differentiation record.

Every op returns a new :class:`Tensor`. When any input requires a gradient and
recording is enabled, the output keeps references to its parents plus a
closure that pushes the upstream gradient back to them. :func:`backward` walks
the record in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""

    def __init__(self, op: str, a: tuple, b: tuple | None = None):
        if b is None:
            msg = f"{op}: invalid shape {a}"
        else:
            msg = f"{op}: shape mismatch {a} vs {b}"
        super().__init__(msg)
        self.op = op
        self.shapes = (a, b)


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "trainable", "requires_grad", "_parents", "_backward")

    def __init__(self, data, trainable: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError("tensor", arr.shape)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.trainable = trainable
        self.requires_grad = trainable
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # ---- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, trainable={self.trainable})"

    # ---- operators --------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite result")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.trainable = False
    need = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = need
    if need:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.data.shape)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or not sa or not sb:
        return
    # only trailing-aligned broadcasting (bias rows, column scalars)
    for x, y in zip(reversed(sa), reversed(sb)):
        if x != y and x != 1 and y != 1:
            raise ShapeError(op, sa, sb)


# ---- elementwise binary ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            if b.ndim == 1:
                ga = np.multiply.outer(g, b.data) if a.ndim == 2 else g * b.data
            else:
                ga = g @ b.data.T
            _accum(a, ga)
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.multiply.outer(a.data, g) if b.ndim == 2 else a.data * g
            else:
                gb = a.data.T @ g if b.ndim == 2 else a.data.T @ g
            _accum(b, gb)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ---- elementwise unary ----------------------------------------------------
def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form is overflow-free for any input
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), bw, "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), bw, "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)

    def bw(g):
        _accum(a, g * mask)

    return _make(out, (a,), bw, "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)

    return _make(out, (a,), bw, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bw(g):
        _accum(a, g / a.data)

    return _make(out, (a,), bw, "log")


def softplus(a) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        _accum(a, g * s)

    return _make(out, (a,), bw, "softplus")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(a.data, p)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(a.data, p - 1.0)
        _accum(a, g * d)

    return _make(out, (a,), bw, "power")


# ---- reductions over the last axis ---------------------------------------
def softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accum(a, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (a,), bw, "softmax")


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        _accum(a, g - p * g.sum(axis=-1, keepdims=True))

    return _make(out, (a,), bw, "log_softmax")


def logsumexp(a) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    s = np.exp(a.data - m).sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    p = np.exp(a.data - m) / s

    def bw(g):
        _accum(a, np.asarray(g)[..., None] * p)

    return _make(out, (a,), bw, "logsumexp")


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis), dtype=np.float64)

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


# ---- structural -----------------------------------------------------------
def concat(parts: Iterable, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat", ())
    nd = parts[0].ndim
    ax = axis % nd if nd else 0
    for p in parts[1:]:
        if p.ndim != nd or p.shape[:ax] + p.shape[ax + 1:] != parts[0].shape[:ax] + parts[0].shape[ax + 1:]:
            raise ShapeError("concat", parts[0].shape, p.shape)
    out = np.concatenate([p.data for p in parts], axis=ax)
    sizes = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def bw(g):
        for p, gp in zip(parts, np.split(g, sizes, axis=ax)):
            _accum(p, gp)

    return _make(out, parts, bw, "concat")


def stack(parts: Iterable) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    return concat([reshape(p, (1,) + p.shape) for p in parts], axis=0)


def index(a, idx) -> Tensor:
    """Basic slicing or integer-array gather (``a[idx]``)."""
    a = as_tensor(a)
    try:
        out = np.array(a.data[idx], dtype=np.float64)
    except IndexError as exc:
        raise ShapeError("index", a.shape) from exc
    fancy = isinstance(idx, (list, np.ndarray)) or (
        isinstance(idx, tuple) and any(isinstance(i, (list, np.ndarray)) for i in idx)
    )

    def bw(g):
        full = np.zeros_like(a.data)
        if fancy and isinstance(idx, np.ndarray) and idx.ndim == 1 and idx.dtype.kind == "i":
            full = _scatter_rows(np.where(idx < 0, idx + a.shape[0], idx), g, a.shape[0])
        elif fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        _accum(a, full)

    return _make(out, (a,), bw, "index")


def _scatter_rows(ids: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """out[i] = sum of values[e] with ids[e] == i (a fast np.add.at for row scatter)."""
    if values.ndim == 1:
        return np.bincount(ids, weights=values, minlength=n).astype(np.float64)
    flat = values.reshape(values.shape[0], -1)
    c = flat.shape[1]
    keys = (ids[:, None] * c + np.arange(c)).ravel()
    out = np.bincount(keys, weights=flat.ravel(), minlength=n * c)
    return out.reshape((n,) + values.shape[1:])


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """out[s] = sum of rows a[e] with segment_ids[e] == s."""
    a = as_tensor(a)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape[0] != a.shape[0]:
        raise ShapeError("segment_sum", a.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise ShapeError("segment_sum (segment id out of range)", a.shape, ids.shape)
    out = _scatter_rows(ids, a.data, num_segments)

    def bw(g):
        _accum(a, g[ids])

    return _make(out, (a,), bw, "segment_sum")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", a.shape, tuple(shape)) from exc

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _make(out, (a,), bw, "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accum(a, g.T)

    return _make(a.data.T, (a,), bw, "transpose")


# ---- differentiation ------------------------------------------------------
def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable trainable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            continue  # leaf: already accumulated by its consumer
        # route parent gradients into the temporary table rather than .grad
        for p in node._parents:
            if p.requires_grad and not p.trainable:
                p.grad = grads.get(id(p))
        node._backward(g)
        for p in node._parents:
            if p.requires_grad and not p.trainable:
                if p.grad is not None:
                    grads[id(p)] = p.grad
                p.grad = None
