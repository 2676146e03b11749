"""Dense rank-2 tensors with a reverse-mode tape and plain SGD.

Every value is a float64 ``(rows, cols)`` array. Operations that touch a
tensor with ``requires_grad=True`` append their output to the active
:class:`Tape`; :func:`backward` walks that tape in reverse creation order,
which is a valid topological order because a node can only be created after
its inputs.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim > 2:
            raise ValueError(f"tensors are rank <= 2, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return ewise_mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)


class Parameter(Tensor):
    """Trainable leaf. ``frozen`` parameters are skipped by :func:`sgd_step`."""

    __slots__ = ("frozen",)

    def __init__(self, data, name: str | None = None, frozen: bool = False):
        super().__init__(data, requires_grad=True, name=name)
        self.frozen = frozen

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape}, frozen={self.frozen})"


class Tape:
    """Creation-ordered record of differentiable nodes."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_default_tape = Tape()
_tape_stack: list[Tape] = [_default_tape]
_grad_enabled = True


def get_tape() -> Tape:
    return _tape_stack[-1]


@contextlib.contextmanager
def use_tape(tape: Tape):
    _tape_stack.append(tape)
    try:
        yield tape
    finally:
        _tape_stack.pop()


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    # backward_fn maps the upstream gradient to one gradient (or None) per parent
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
        get_tape().record(out)
    return out


def _same_shape(op: str, a: Tensor, c: Tensor) -> None:
    if a.shape != c.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {c.shape}")


# ---------------------------------------------------------------- arithmetic

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _node(ad @ bd, (a, b), bw)


def add(a: Tensor, c: Tensor) -> Tensor:
    _same_shape("add", a, c)
    return _node(a.data + c.data, (a, c), lambda g: (g, g))


def sub(a: Tensor, c: Tensor) -> Tensor:
    _same_shape("sub", a, c)
    return _node(a.data - c.data, (a, c), lambda g: (g, -g))


def add_row(a: Tensor, v: Tensor) -> Tensor:
    """``a + v`` with the 1×n row ``v`` repeated over the rows of ``a``."""
    if v.shape[0] != 1 or v.shape[1] != a.shape[1]:
        raise ValueError(f"add_row: cannot broadcast {v.shape} over {a.shape}")
    return _node(a.data + v.data, (a, v), lambda g: (g, g.sum(axis=0, keepdims=True)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _node(a.data * s, (a,), lambda g: (g * s,))


def broadcast_mul(a: Tensor, v: Tensor) -> Tensor:
    if v.shape[0] != 1 or v.shape[1] != a.shape[1]:
        raise ValueError(f"broadcast_mul: cannot broadcast {v.shape} over {a.shape}")
    ad, vd = a.data, v.data

    def bw(g):
        return g * vd, (g * ad).sum(axis=0, keepdims=True)

    return _node(ad * vd, (a, v), bw)


def ewise_mul(a: Tensor, c: Tensor) -> Tensor:
    _same_shape("ewise_mul", a, c)
    ad, cd = a.data, c.data
    return _node(ad * cd, (a, c), lambda g: (g * cd, g * ad))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add_row(matmul(x, w), b)


# ------------------------------------------------------------ nonlinearities

def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_rows(a: Tensor) -> Tensor:
    if a.shape[1] < 1:
        raise ValueError("softmax_rows: need at least one column")
    p = softmax_np(a.data)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _node(p, (a,), bw)


# ---------------------------------------------------------------- reshaping

def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_cols: empty list")
    rows = parts[0].shape[0]
    for p in parts[1:]:
        if p.shape[0] != rows:
            raise ValueError(
                f"concat_cols: row mismatch {parts[0].shape} vs {p.shape}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([p.shape[1] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=1))

    return _node(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_rows: empty list")
    cols = parts[0].shape[1]
    for p in parts[1:]:
        if p.shape[1] != cols:
            raise ValueError(
                f"concat_rows: column mismatch {parts[0].shape} vs {p.shape}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([p.shape[0] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=0))

    return _node(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw)


def take_rows(a: Tensor, start: int, stop: int) -> Tensor:
    n, m = a.shape
    if not 0 <= start <= stop <= n:
        raise ValueError(f"take_rows: [{start}, {stop}) outside {n} rows")

    def bw(g):
        full = np.zeros((n, m))
        full[start:stop] = g
        return (full,)

    return _node(a.data[start:stop], (a,), bw)


def take_cols(a: Tensor, start: int, stop: int) -> Tensor:
    n, m = a.shape
    if not 0 <= start <= stop <= m:
        raise ValueError(f"take_cols: [{start}, {stop}) outside {m} columns")

    def bw(g):
        full = np.zeros((n, m))
        full[:, start:stop] = g
        return (full,)

    return _node(a.data[:, start:stop], (a,), bw)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data.copy())


# ---------------------------------------------------------------- reductions

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _node(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Batch-mean of ``-log softmax(logits)[target]``."""
    b, n = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != b:
        raise ValueError(f"cross_entropy: {t.shape[0]} targets for {b} rows")
    if t.size and (t.min() < 0 or t.max() >= n):
        bad = t[(t < 0) | (t >= n)][0]
        raise IndexError(f"cross_entropy: target {bad} outside [0, {n})")
    logp = log_softmax_np(logits.data)
    rows = np.arange(b)
    loss = -logp[rows, t].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, t] -= 1.0
        return (grad * (g[0, 0] / b),)

    return _node(np.array([[loss]]), (logits,), bw)


def l1_row_distance(a: Tensor, c: Tensor) -> Tensor:
    """Mean over rows of ``sum_j |a_ij - c_ij|``; subgradient 0 at ties."""
    _same_shape("l1_row_distance", a, c)
    diff = a.data - c.data
    b = a.shape[0]
    sign = np.sign(diff)

    def bw(g):
        s = sign * (g[0, 0] / b)
        return s, -s

    return _node(np.array([[np.abs(diff).sum() / b]]), (a, c), bw)


def squared_row_distance(a: Tensor, c: Tensor) -> Tensor:
    """Mean over rows of the squared Euclidean row distance."""
    _same_shape("squared_row_distance", a, c)
    diff = a.data - c.data
    b = a.shape[0]

    def bw(g):
        s = diff * (2.0 * g[0, 0] / b)
        return s, -s

    return _node(np.array([[np.square(diff).sum() / b]]), (a, c), bw)


# ------------------------------------------------------------------ autodiff

def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.shape != (1, 1):
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss is not connected to any trainable tensor")
    if loss.is_leaf:
        _accumulate(loss, np.ones((1, 1)))
        return
    tape = tape or get_tape()
    pending: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                _accumulate(parent, pg)
            else:
                key = id(parent)
                prev = pending.get(key)
                pending[key] = pg if prev is None else prev + pg


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    if not lr > 0:
        raise ValueError(f"sgd_step: learning rate must be positive, got {lr}")
    for p in params:
        if p.grad is not None and not p.frozen:
            p.data = p.data - lr * p.grad
        p.grad = None
    get_tape().clear()
