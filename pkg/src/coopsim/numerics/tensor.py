"""Tensor and tape: the reverse-mode differentiation core.

Every differentiable op builds its output through :func:`record`, which
appends a node to the thread-local :class:`Tape` whenever one of the inputs
requires a gradient. :func:`backward` walks the tape in reverse creation
order, so each node is visited exactly once and inputs always precede the
ops that consume them.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import NumericsError, UsageError

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Dense float array with an optional gradient buffer.

    Data defaults to float32. Pass ``dtype=np.float64`` only for
    finite-difference oracles; every op preserves the dtype of its inputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    # basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar; implementations live in ops.py ------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    """Wrap constants; they never require gradients."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(value, dtype=dtype)


@dataclass(eq=False)
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn
    op: str = ""


@dataclass(eq=False)
class Tape:
    """Ordered record of differentiable ops in creation (topological) order."""

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self.consumed = False

    def clear(self) -> None:
        self.nodes.clear()
        self.consumed = True

    def __len__(self) -> int:
        return len(self.nodes)


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tape


def grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (inference, oracles)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def fresh_tape() -> Iterator[Tape]:
    """Swap in an empty tape for the duration of the block."""
    prev = _state.tape
    _state.tape = Tape()
    try:
        yield _state.tape
    finally:
        _state.tape = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericsError(f"non-finite values produced by {op}")


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap an op result and attach its backward rule to the tape if needed."""
    _check_finite(out_data, op)
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        _state.tape.record(Node(out, tuple(inputs), backward, op))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every tensor on the tape.

    Leaf gradients add onto whatever is already stored, so callers zero
    parameter gradients between optimizer steps. The tape is cleared.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else _state.tape
    if not loss.requires_grad:
        tape.clear()
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        key = id(node.out)
        g = grads.pop(key, None)
        if g is None:
            continue
        owners.pop(key, None)
        _accumulate(node.out, g)
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            k = id(inp)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = gi
                owners[k] = inp
    for k, g in grads.items():
        _accumulate(owners[k], g)
    tape.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    # grads are never mutated in place, so sharing the array is safe
    t.grad = g if t.grad is None else t.grad + g
