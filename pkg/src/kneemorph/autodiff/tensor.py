"""Tensor value type and the reverse-mode tape."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

MAX_AXES = 4


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from finite inputs."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """Float64 array (up to 4 axes) that can take part in reverse-mode differentiation.

    Leaves are created directly; every op output is recorded on the active
    :class:`Tape` whenever one of its inputs requires a gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_AXES:
            raise ValueError(f"tensors have at most {MAX_AXES} axes, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._node: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._tape = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.shift(self, -float(other))

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


class Tape:
    """Ordered op records for one forward pass.

    A tape can be differentiated once; afterwards it is consumed and any
    further ``backward`` call on a tensor recorded on it raises.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack[-1] is not self:
            raise TapeError("tape contexts exited out of order")
        stack.pop()

    def record(self, op: str, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        out._tape = self
        out._node = len(self.records)
        self.records.append(_Record(op, inputs, backward))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss is not recorded on this tape")
        if self.consumed:
            raise TapeError("backward already ran on this tape; start a new one")
        self.consumed = True

        grads: list[np.ndarray | None] = [None] * (loss._node + 1)
        grads[loss._node] = np.ones_like(loss.data)
        leaf_grads: dict[Tensor, np.ndarray] = {}
        for node in range(loss._node, -1, -1):
            g = grads[node]
            if g is None:
                continue
            grads[node] = None
            rec = self.records[node]
            in_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if not np.isfinite(ig).all():
                    raise NonFiniteError(f"non-finite gradient flowing out of {rec.op}")
                if inp._tape is self:
                    prev = grads[inp._node]
                    grads[inp._node] = ig if prev is None else prev + ig
                elif inp.is_leaf:
                    prev = leaf_grads.get(inp)
                    leaf_grads[inp] = ig if prev is None else prev + ig
        for leaf, g in leaf_grads.items():
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.records.clear()
        if _stack()[0] is self:
            _stack()[0] = Tape()
        return leaf_grads


_local = threading.local()


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = [Tape()]
    return stack


def current_tape() -> Tape | None:
    if getattr(_local, "no_grad", 0):
        return None
    return _stack()[-1]


def reset_tape() -> Tape:
    """Drop the thread's default tape and start an empty one."""
    stack = _stack()
    stack[0] = Tape()
    return stack[0]


@contextmanager
def no_grad():
    _local.no_grad = getattr(_local, "no_grad", 0) + 1
    try:
        yield
    finally:
        _local.no_grad -= 1


def make_op(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``out`` as a tensor and record it if any input needs a gradient.

    ``backward`` maps the output cotangent to one cotangent (or None) per input.
    """
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    inputs = tuple(inputs)
    needs = any(t.requires_grad for t in inputs)
    tape = current_tape() if needs else None
    res = Tensor._wrap(out, tape is not None)
    if tape is not None:
        tape.record(op, res, inputs, backward)
    return res


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Differentiate a scalar loss; returns a map from leaf to its gradient.

    Leaves listed in ``wrt`` that the loss does not reach map to zeros.
    """
    if loss._tape is None:
        raise TapeError("loss is detached: no input required a gradient or the tape was discarded")
    grads = loss._tape.backward(loss)
    if wrt is not None:
        for t in wrt:
            if t not in grads:
                grads[t] = np.zeros_like(t.data)
    return grads


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
