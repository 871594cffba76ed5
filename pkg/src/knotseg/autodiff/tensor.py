"""Tensor and tape primitives for the reverse-mode engine.

Every differentiable op records a `_Record` on the active tape of the
calling thread. `backward` walks the tape in exact reverse recording order,
so gradients are deterministic and fan-out accumulates additively.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class Tensor:
    """N-d float array with an optional lazily allocated gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.tape_id: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    # arithmetic sugar; the ops module owns the definitions
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Record:
    __slots__ = ("inputs", "output", "backward_fn", "op")

    def __init__(self, inputs, output, backward_fn, op):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered list of recorded operations."""

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn) -> None:
        output.tape_id = len(self.records)
        self.records.append(_Record(tuple(inputs), output, backward_fn, op))

    def clear(self) -> None:
        for rec in self.records:
            rec.output.tape_id = None
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar seed, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(rec.output) for rec in self.records}
        if id(loss) not in produced:
            _accumulate_leaf(loss, grads[id(loss)])
            return
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward_fn(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in produced:
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                else:
                    _accumulate_leaf(inp, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.data.dtype, copy=False).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


class _State(threading.local):
    def __init__(self) -> None:
        self.tapes: list[Tape] = [Tape()]
        self.enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tapes[-1]


def is_recording() -> bool:
    return _state.enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def tape_scope() -> Iterator[Tape]:
    """Push a fresh tape for the duration of the block."""
    tape = Tape()
    _state.tapes.append(tape)
    try:
        yield tape
    finally:
        _state.tapes.pop()


def needs_record(*inputs: Tensor) -> bool:
    return _state.enabled and any(t.requires_grad for t in inputs)


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Backpropagate from a scalar `loss`; consumes and clears the tape."""
    if tape is None:
        tape = current_tape()
    try:
        tape.backward(loss)
    finally:
        tape.clear()
