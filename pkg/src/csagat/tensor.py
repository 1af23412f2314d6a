"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op executed while an input requires a gradient is
appended to the active :class:`Tape`.  :func:`backward` walks that tape in
exact reverse execution order and accumulates (``+=``) into ``.grad`` of
leaf tensors, so several loss terms may be back-propagated one after the
other before the optimizer step.  Call :meth:`Tensor.zero_grad` (or the
optimizer's ``zero_grad``) to reset.

Only the handful of ops needed by GAT/GCN/MLP training are provided.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full_like(like.data, float(x)))


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------


class _Node:
    __slots__ = ("tape", "index", "out", "parents", "backward")

    def __init__(self, tape: "Tape", index: int, out: Tensor, parents, backward: BackwardFn):
        self.tape = tape
        self.index = index
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of executed operations."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: BackwardFn) -> _Node:
        node = _Node(self, len(self.nodes), out, parents, backward)
        self.nodes.append(node)
        return node

    def clear(self) -> None:
        self.nodes.clear()


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.grad_enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tape


@contextlib.contextmanager
def new_tape() -> Iterator[Tape]:
    """Run the enclosed forward pass on a fresh, empty tape."""
    previous = _state.tape
    _state.tape = Tape()
    try:
        yield _state.tape
    finally:
        _state.tape = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    out = Tensor(data)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _state.tape.record(out, parents, backward)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients accumulate across calls; nothing is reset here.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        _accumulate_leaf(loss, seed)
        return
    tape = loss._node.tape
    if tape is not _state.tape:
        raise RuntimeError("loss was not produced on the current tape")

    pending: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(tape.nodes[: loss._node.index + 1]):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                _accumulate_leaf(parent, pg)
                continue
            if parent._node.tape is not tape:
                raise RuntimeError("computation spans more than one tape")
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad += g.reshape(t.shape)


# --------------------------------------------------------------------------
# elementwise and linear algebra
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """``a + b``; ``b`` may also be a row vector added to every row of ``a``."""
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if a.ndim == 2 and b.shape == (a.shape[1],):
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape),))


def mean_of(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of same-shaped tensors."""
    out = tensors[0]
    for t in tensors[1:]:
        out = add(out, t)
    return scale(out, 1.0 / len(tensors)) if len(tensors) > 1 else out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if slope < 0:
        raise ValueError("leaky_relu slope must be >= 0")
    factor = np.where(x.data > 0, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    pos = x.data > 0
    neg = alpha * np.expm1(np.minimum(x.data, 0.0))
    out = np.where(pos, x.data, neg)
    deriv = np.where(pos, 1.0, neg + alpha)
    return _make(out, (x,), lambda g: (g * deriv,))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.ndim != 2 for p in parts):
        raise ShapeError(f"concat_cols: row mismatch in {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), back)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(x.data[index], (x,), back)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout: kept entries are scaled by ``1/(1-p)`` at train time."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# segment (per destination node) ops
# --------------------------------------------------------------------------


def segment_softmax(scores: Tensor, segments: np.ndarray, num_segments: int | None = None) -> Tensor:
    """Softmax of ``scores`` within groups sharing the same ``segments`` id."""
    segments = np.asarray(segments, dtype=np.int64)
    if scores.ndim != 1 or segments.shape != scores.shape:
        raise ShapeError(f"segment_softmax: scores {scores.shape} vs segments {segments.shape}")
    if scores.size == 0:
        raise ValueError("segment_softmax: empty segment set")
    if np.isnan(scores.data).any():
        raise ValueError("segment_softmax: NaN score")
    if segments.min() < 0:
        raise ValueError("segment_softmax: negative segment id")
    n = int(segments.max()) + 1 if num_segments is None else int(num_segments)

    seg_max = np.full(n, -np.inf)
    np.maximum.at(seg_max, segments, scores.data)
    ex = np.exp(scores.data - seg_max[segments])
    denom = np.zeros(n)
    np.add.at(denom, segments, ex)
    y = ex / denom[segments]

    def back(g):
        dot = np.zeros(n)
        np.add.at(dot, segments, g * y)
        return (y * (g - dot[segments]),)

    return _make(y, (scores,), back)


def segment_weighted_sum(
    values: Tensor, weights: Tensor, segments: np.ndarray, num_segments: int
) -> Tensor:
    """``out[s] = sum_{e : segments[e] == s} weights[e] * values[e]``."""
    segments = np.asarray(segments, dtype=np.int64)
    if values.ndim != 2 or weights.shape != (values.shape[0],) or segments.shape != weights.shape:
        raise ShapeError(
            f"segment_weighted_sum: values {values.shape}, weights {weights.shape}, "
            f"segments {segments.shape}"
        )
    out = np.zeros((num_segments, values.shape[1]))
    np.add.at(out, segments, weights.data[:, None] * values.data)

    def back(g):
        g_edge = g[segments]
        return (weights.data[:, None] * g_edge, np.einsum("ef,ef->e", values.data, g_edge))

    return _make(out, (values, weights), back)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def log_softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over the rows selected by ``mask``.

    ``mask`` is either a boolean vector over rows or an array of row ids.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n, c] logits, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    rows = _mask_rows(mask, n)
    if rows.size == 0:
        raise ValueError("cross_entropy: empty mask")
    y = labels[rows]
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"cross_entropy: labels must lie in [0, {c})")

    logp = log_softmax_rows(logits.data[rows])
    value = -logp[np.arange(rows.size), y].mean()

    def back(g):
        d = np.exp(logp)
        d[np.arange(rows.size), y] -= 1.0
        full = np.zeros_like(logits.data)
        np.add.at(full, rows, d * (float(g) / rows.size))
        return (full,)

    return _make(np.asarray(value), (logits,), back)


def _mask_rows(mask: np.ndarray, n: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (n,):
            raise ShapeError(f"boolean mask of shape {mask.shape} for {n} rows")
        return np.flatnonzero(mask)
    return mask.astype(np.int64).reshape(-1)
