"""Dense float64 tensors with reverse-mode differentiation.

The engine is deliberately small: a :class:`Tensor` wraps a float64 numpy
array, and a :class:`Tape` records one node per operation while it is active.
``Tape.backward`` replays the nodes in exact reverse recording order,
accumulating gradients into every tensor that requires them. Recording order
is execution order, so the reverse walk is a valid topological order.

Every operation checks its result for NaN/Inf and raises
:class:`NumericalError` instead of letting poison propagate.

Tapes are single-threaded; independent tapes on separate threads do not share
state (the active-tape stack is thread-local).
"""

from __future__ import annotations

import threading

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericalError(ArithmeticError):
    """An operation produced NaN or Inf."""


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations, replayed in reverse by ``backward``."""

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: "Tensor", backward_fn) -> None:
        self._nodes.append((out, backward_fn))

    def backward(self, loss: "Tensor") -> None:
        """Seed d(loss)/d(loss)=1 and propagate through all recorded nodes."""
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, backward_fn in reversed(self._nodes):
            if out.grad is not None:
                backward_fn(out.grad)


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")


def _make(data: np.ndarray, inputs, backward_fn, op: str) -> Tensor:
    """Wrap an op result; record it when a tape is active and grads are needed."""
    _check_finite(data, op)
    tape = _current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast when producing it."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# core operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape} do not agree")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(data, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.T)

    return _make(a.data.T, (a,), backward, "transpose")


def add(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add shapes {a.shape} + {b.shape}: {exc}") from None

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward, "add")


def mul(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul shapes {a.shape} * {b.shape}: {exc}") from None

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _make(a.data * c, (a,), backward, "scale")


def recip(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore"):
        data = 1.0 / a.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(-g * data * data)

    return _make(data, (a,), backward, "recip")


def gelu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = kernels.gelu_fwd(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(kernels.gelu_bwd(a.data, g))

    return _make(data, (a,), backward, "gelu")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0.0))

    return _make(data, (a,), backward, "relu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * data).sum(axis=axis, keepdims=True)
            a.accumulate_grad((g - inner) * data)

    return _make(data, (a,), backward, "softmax")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits`` rows."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise DimensionError(
            f"cross_entropy shapes logits {logits.shape}, targets {targets.shape}"
        )
    n, n_classes = logits.shape
    bad = (targets < 0) | (targets >= n_classes)
    if bad.any():
        raise ValueError(
            f"target index {targets[bad][0]} out of range for {n_classes} classes"
        )
    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=1)) + m[:, 0]
    rows = np.arange(n)
    data = np.asarray((lse - logits.data[rows, targets]).mean())

    def backward(g):
        if logits.requires_grad:
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            p[rows, targets] -= 1.0
            logits.accumulate_grad(p * (float(g) / n))

    return _make(data, (logits,), backward, "cross_entropy")


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.sum())

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g)))

    return _make(data, (a,), backward, "sum_all")


def mean_rows(a: Tensor) -> Tensor:
    """Column means of a matrix: [T, N] -> [N]."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"mean_rows expects a matrix, got shape {a.shape}")
    n_rows = a.shape[0]

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g / n_rows, a.shape))

    return _make(a.data.mean(axis=0), (a,), backward, "mean_rows")


def row_sums(a: Tensor) -> Tensor:
    """Row sums of a matrix with kept dims: [T, N] -> [T, 1]."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"row_sums expects a matrix, got shape {a.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=1, keepdims=True), (a,), backward, "row_sums")


# ---------------------------------------------------------------------------
# indexing / reshaping


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows of a matrix; duplicate indices are allowed."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2:
        raise DimensionError(f"gather_rows expects a matrix, got shape {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ValueError(f"row index out of range for {a.shape[0]} rows")
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            kernels.scatter_rows_add(a.grad, idx, g)

    return _make(data, (a,), backward, "gather_rows")


def scatter_add_rows(rows: Tensor, idx, n_rows: int) -> Tensor:
    """Place ``rows`` into an [n_rows, D] zero matrix, accumulating duplicates."""
    rows = as_tensor(rows)
    idx = np.asarray(idx, dtype=np.int64)
    if rows.ndim != 2 or idx.shape[0] != rows.shape[0]:
        raise DimensionError(
            f"scatter_add_rows shapes rows {rows.shape}, idx {idx.shape}"
        )
    data = np.zeros((n_rows, rows.shape[1]))
    kernels.scatter_rows_add(data, idx, rows.data)

    def backward(g):
        if rows.requires_grad:
            rows.accumulate_grad(g[idx])

    return _make(data, (rows,), backward, "scatter_add_rows")


def take_pairs(a: Tensor, rows, cols) -> Tensor:
    """Pick a[rows[i], cols[i]] as a column vector [n, 1]."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    data = a.data[rows, cols][:, None]

    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, (rows, cols), g[:, 0])

    return _make(data, (a,), backward, "take_pairs")


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[start:stop] += g

    return _make(a.data[start:stop], (a,), backward, "slice_rows")


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"slice_cols expects a matrix, got shape {a.shape}")

    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[:, start:stop] += g

    return _make(a.data[:, start:stop], (a,), backward, "slice_cols")


def _concat(parts, axis: int, op: str) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                piece = g[lo:hi] if axis == 0 else g[:, lo:hi]
                p.accumulate_grad(piece)

    return _make(data, tuple(parts), backward, op)


def concat_rows(parts) -> Tensor:
    return _concat(parts, 0, "concat_rows")


def concat_cols(parts) -> Tensor:
    return _concat(parts, 1, "concat_cols")


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-8) -> Tensor:
    """Root-mean-square normalization over the last axis with a learned gain."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.shape != (x.shape[1],):
        raise DimensionError(f"rms_norm shapes x {x.shape}, weight {weight.shape}")
    d = x.shape[1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=1, keepdims=True) + eps)
    data = x.data * inv * weight.data

    def backward(g):
        gw = g * weight.data
        if x.requires_grad:
            inner = (gw * x.data).sum(axis=1, keepdims=True)
            x.accumulate_grad(gw * inv - x.data * (inv**3) * inner / d)
        if weight.requires_grad:
            weight.accumulate_grad((g * x.data * inv).sum(axis=0))

    return _make(data, (x, weight), backward, "rms_norm")


# ---------------------------------------------------------------------------
# non-differentiable selection


def topk_indices(x, k: int) -> np.ndarray:
    """Indices of the k largest entries of a vector, descending, ties to the
    lowest index. Selection carries no gradient."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim != 1:
        raise DimensionError(f"topk_indices expects a vector, got shape {data.shape}")
    if not 1 <= k <= data.shape[0]:
        raise ValueError(f"k={k} out of range for a length-{data.shape[0]} vector")
    return kernels.topk_rows(data[None, :], k)[0]
