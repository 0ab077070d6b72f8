"""Dense float64 arrays with tape-recorded reverse-mode differentiation.

Small op set sufficient for recurrent networks and lattice losses: matmul,
broadcasting elementwise arithmetic, tanh/sigmoid/exp/log, concatenation,
slicing, embedding lookup, reductions, log-sum-exp and temperature softmax.
A ``Tape`` and the arrays recorded on it form a single-owner unit; running
``backward`` a second time on the same tape is an error.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class ParameterError(ValueError):
    """An operation parameter is outside its valid range."""


class ContractError(ValueError):
    """An API contract was violated (wrong tape, non-scalar loss, ...)."""


class Array:
    """A dense float64 array, optionally attached to a tape.

    ``data`` is row-major float64. Arrays with ``tape=None`` are constants or
    inference-mode values; operations on them are not recorded.
    """

    __slots__ = ("data", "tape")

    def __init__(self, data, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_array(other, self.tape), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Array(shape={self.shape}, taped={self.tape is not None})"


class Tape:
    """Ordered record of operations plus gradient accumulators.

    Gradients are keyed by array identity; the tape keeps references to all
    recorded arrays so identities stay unique for its lifetime.
    """

    def __init__(self):
        self._ops: list = []
        self._grads: dict[int, np.ndarray] = {}
        self._refs: dict[int, Array] = {}
        self._spent = False

    def _record(self, out: Array, inputs: Sequence[Array], backward) -> None:
        self._refs[id(out)] = out
        for arr in inputs:
            self._refs[id(arr)] = arr
        self._ops.append((out, backward))

    def _accumulate(self, arr: Array, grad: np.ndarray) -> None:
        key = id(arr)
        buf = self._grads.get(key)
        if buf is None:
            self._grads[key] = np.array(grad, dtype=np.float64)
        else:
            buf += grad

    def grad(self, arr: Array) -> np.ndarray:
        """Accumulated gradient for ``arr``; zeros if nothing flowed into it."""
        g = self._grads.get(id(arr))
        if g is None:
            return np.zeros_like(arr.data)
        return g


class Gradients:
    """Read-only view of a tape's gradient accumulators after backward."""

    def __init__(self, tape: Tape):
        self._tape = tape

    def __getitem__(self, arr: Array) -> np.ndarray:
        return self._tape.grad(arr)


def backward(loss: Array, tape: Tape) -> Gradients:
    """Run reverse-mode accumulation from a scalar loss.

    Visits recorded operations in reverse order; afterwards the tape holds
    d(loss)/d(array) for every array that participated. A tape can only be
    walked once.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    if tape._spent:
        raise ContractError("tape already walked; build a new tape instead")
    tape._spent = True
    tape._grads[id(loss)] = np.ones_like(loss.data)
    for out, bwd in reversed(tape._ops):
        g = tape._grads.get(id(out))
        if g is not None:
            bwd(g)
    return Gradients(tape)


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------


def _as_array(value, tape: Tape | None) -> Array:
    if isinstance(value, Array):
        return value
    return Array(np.asarray(value, dtype=np.float64), None)


def _joint_tape(*arrays: Array) -> Tape | None:
    tape = None
    for a in arrays:
        if a.tape is None:
            continue
        if tape is None:
            tape = a.tape
        elif tape is not a.tape:
            raise ContractError("operands belong to different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _make(data: np.ndarray, tape: Tape | None, inputs: Sequence[Array], backward_fn) -> Array:
    out = Array(data, tape)
    if tape is not None:
        tape._record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# core ops
# ---------------------------------------------------------------------------


def matmul(a: Array, b: Array) -> Array:
    """Matrix product of two 2-D arrays."""
    b = _as_array(b, a.tape)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    tape = _joint_tape(a, b)
    data = a.data @ b.data

    def bwd(g):
        if a.tape is not None:
            tape._accumulate(a, g @ b.data.T)
        if b.tape is not None:
            tape._accumulate(b, a.data.T @ g)

    return _make(data, tape, (a, b), bwd)


def add(a: Array, b) -> Array:
    b = _as_array(b, a.tape)
    tape = _joint_tape(a, b)
    data = a.data + b.data

    def bwd(g):
        if a.tape is not None:
            tape._accumulate(a, _unbroadcast(g, a.shape))
        if b.tape is not None:
            tape._accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, tape, (a, b), bwd)


def sub(a: Array, b) -> Array:
    b = _as_array(b, a.tape)
    tape = _joint_tape(a, b)
    data = a.data - b.data

    def bwd(g):
        if a.tape is not None:
            tape._accumulate(a, _unbroadcast(g, a.shape))
        if b.tape is not None:
            tape._accumulate(b, _unbroadcast(-g, b.shape))

    return _make(data, tape, (a, b), bwd)


def mul(a: Array, b) -> Array:
    b = _as_array(b, a.tape)
    tape = _joint_tape(a, b)
    data = a.data * b.data

    def bwd(g):
        if a.tape is not None:
            tape._accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.tape is not None:
            tape._accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, tape, (a, b), bwd)


def tanh(a: Array) -> Array:
    tape = a.tape
    data = np.tanh(a.data)

    def bwd(g):
        if tape is not None:
            tape._accumulate(a, g * (1.0 - data * data))

    return _make(data, tape, (a,), bwd)


def sigmoid(a: Array) -> Array:
    tape = a.tape
    # stable in both tails
    data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                    np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def bwd(g):
        if tape is not None:
            tape._accumulate(a, g * data * (1.0 - data))

    return _make(data, tape, (a,), bwd)


def exp(a: Array) -> Array:
    tape = a.tape
    data = np.exp(a.data)

    def bwd(g):
        if tape is not None:
            tape._accumulate(a, g * data)

    return _make(data, tape, (a,), bwd)


def log(a: Array) -> Array:
    if np.any(a.data <= 0):
        raise ContractError("log requires strictly positive input")
    tape = a.tape
    data = np.log(a.data)

    def bwd(g):
        if tape is not None:
            tape._accumulate(a, g / a.data)

    return _make(data, tape, (a,), bwd)


def concat(arrays: Sequence[Array], axis: int = 0) -> Array:
    arrays = list(arrays)
    tape = _joint_tape(*arrays)
    data = np.concatenate([a.data for a in arrays], axis=axis)
    sizes = [a.shape[axis] for a in arrays]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for a, lo, hi in zip(arrays, offsets[:-1], offsets[1:]):
            if a.tape is not None:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                tape._accumulate(a, g[tuple(idx)])

    return _make(data, tape, arrays, bwd)


def stack(arrays: Sequence[Array]) -> Array:
    """Stack equal-shape arrays along a new leading axis."""
    arrays = list(arrays)
    tape = _joint_tape(*arrays)
    data = np.stack([a.data for a in arrays], axis=0)

    def bwd(g):
        for i, a in enumerate(arrays):
            if a.tape is not None:
                tape._accumulate(a, g[i])

    return _make(data, tape, arrays, bwd)


def getitem(a: Array, key) -> Array:
    """Basic (slice/int) indexing with gradient scatter."""
    tape = a.tape
    data = a.data[key]

    def bwd(g):
        if tape is not None:
            buf = np.zeros_like(a.data)
            buf[key] += g
            tape._accumulate(a, buf)

    return _make(data, tape, (a,), bwd)


def reshape(a: Array, shape) -> Array:
    tape = a.tape
    data = a.data.reshape(shape)

    def bwd(g):
        if tape is not None:
            tape._accumulate(a, g.reshape(a.shape))

    return _make(data, tape, (a,), bwd)


def reduce_sum(a: Array, axis=None, keepdims: bool = False) -> Array:
    tape = a.tape
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if tape is not None:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            tape._accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _make(data, tape, (a,), bwd)


def reduce_mean(a: Array, axis=None, keepdims: bool = False) -> Array:
    tape = a.tape
    data = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.size if axis is None else a.shape[axis]

    def bwd(g):
        if tape is not None:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            tape._accumulate(a, np.broadcast_to(g, a.shape) / denom)

    return _make(data, tape, (a,), bwd)


def logsumexp(a: Array, axis: int = -1) -> Array:
    tape = a.tape
    m = a.data.max(axis=axis, keepdims=True)
    data = np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True)) + m
    soft = np.exp(a.data - data)
    data = np.squeeze(data, axis=axis)

    def bwd(g):
        if tape is not None:
            tape._accumulate(a, np.expand_dims(g, axis) * soft)

    return _make(data, tape, (a,), bwd)


def log_softmax(a: Array, temperature: float = 1.0, axis: int = -1) -> Array:
    """Log of the temperature softmax along ``axis`` (max-subtracted)."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    tape = a.tape
    z = a.data / temperature
    m = z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=axis, keepdims=True)) + m
    data = z - lse
    probs = np.exp(data)

    def bwd(g):
        if tape is not None:
            tape._accumulate(a, (g - probs * g.sum(axis=axis, keepdims=True)) / temperature)

    return _make(data, tape, (a,), bwd)


def softmax_with_temperature(a: Array, temperature: float, axis: int = -1) -> Array:
    """Temperature softmax along ``axis``; each slice sums to 1."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    tape = a.tape
    z = a.data / temperature
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if tape is not None:
            inner = (g * data).sum(axis=axis, keepdims=True)
            tape._accumulate(a, data * (g - inner) / temperature)

    return _make(data, tape, (a,), bwd)


def embedding(table: Array, ids) -> Array:
    """Row lookup ``table[ids]`` with scatter-add gradient into the table."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got shape {ids.shape}")
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding id out of range")
    tape = table.tape
    data = table.data[ids]

    def bwd(g):
        if tape is not None:
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids, g)
            tape._accumulate(table, buf)

    return _make(data, tape, (table,), bwd)


def pick(m: Array, ids) -> Array:
    """``out[u] = m[u, ids[u]]`` for a 2-D array; used for cross-entropy."""
    ids = np.asarray(ids, dtype=np.intp)
    if m.ndim != 2 or ids.ndim != 1 or ids.shape[0] != m.shape[0]:
        raise ShapeError(f"pick expects (U,K) and U ids, got {m.shape} and {ids.shape}")
    rows = np.arange(m.shape[0])
    tape = m.tape
    data = m.data[rows, ids]

    def bwd(g):
        if tape is not None:
            buf = np.zeros_like(m.data)
            buf[rows, ids] = g
            tape._accumulate(m, buf)

    return _make(data, tape, (m,), bwd)


def custom_grad(out_data: np.ndarray, inputs: Sequence[Array], grad_fns) -> Array:
    """Record an externally computed result with hand-written input gradients.

    ``grad_fns[i](g)`` must return the gradient contribution for ``inputs[i]``.
    Used by the lattice losses, whose dynamic programs are not taped.
    """
    inputs = list(inputs)
    tape = _joint_tape(*inputs)

    def bwd(g):
        for a, fn in zip(inputs, grad_fns):
            if a.tape is not None:
                tape._accumulate(a, fn(g))

    return _make(np.asarray(out_data, dtype=np.float64), tape, inputs, bwd)
