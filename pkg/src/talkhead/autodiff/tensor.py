"""Dense float64 tensors with a reverse-mode tape.

Every op applied to a tensor that participates in gradient tracking appends an
entry to the current thread's :class:`Tape`.  :func:`backward` replays the tape
in reverse, accumulates ``dLoss/dLeaf`` into ``leaf.grad`` and clears the tape.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import NonFiniteError, ShapeError, TalkheadError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tracked", "name", "__weakref__")

    # numpy must defer to our reflected operators (array + Tensor).
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"Tensor{'(' + name + ')' if name else ''}: non-finite input values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._tracked = self.requires_grad
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, tracked: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._tracked = tracked
        t.name = None
        return t

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
    def tracked(self) -> bool:
        return self._tracked

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # Operator sugar; implementations live in ops.py.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from . import ops
        return ops.matmul(other, self)

    def __getitem__(self, idx):
        from . import ops
        return ops.index(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


@dataclass
class TapeEntry:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    op: str


class Tape:
    """Ordered record of ops.  Single owner: one forward/backward at a time."""

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn) -> None:
        self.entries.append(TapeEntry(inputs, output, backward, op))

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make_result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    tracked = grad_enabled() and any(t._tracked for t in inputs)
    out = Tensor._result(data, tracked)
    if tracked:
        get_tape().record(op, inputs, out, backward)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into every tracked leaf, then clear the tape."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = get_tape()
    if not tape.entries:
        raise TalkheadError("backward: tape is empty (backward called twice without a new forward?)")
    if not loss._tracked or loss.requires_grad:
        raise TalkheadError("backward: loss was not produced by a recorded op")
    if not any(e.output is loss for e in reversed(tape.entries)):
        raise TalkheadError("backward: loss is not on the current tape (backward already run?)")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    try:
        for entry in reversed(tape.entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            in_grads = entry.backward(g)
            for inp, gi in zip(entry.inputs, in_grads):
                if gi is None or not inp._tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp.requires_grad:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"backward: non-finite gradient for leaf {leaf.name or key}")
            leaf.grad = leaf.grad + g
    finally:
        tape.clear()
