"""Tensors, parameters and the computation tape.

Operations record themselves onto the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape nothing is recorded, which
is how inference and evaluation run.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class TapeError(RuntimeError):
    """Raised when backward is misused (no live tape, consumed tape, non-scalar loss)."""


class Tensor:
    """Dense array plus a lazily allocated gradient buffer."""

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        if isinstance(values, Tensor):
            values = values.data
        arr = np.asarray(values, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

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

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, wrt_input: bool = False) -> None:
        backward(self, wrt_input=wrt_input)

    # A small arithmetic surface; the model only needs the functions in ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def sum(self):
        from . import ops

        return ops.sum(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class Parameter(Tensor):
    """A named model weight. ``trainable`` controls whether backward fills its grad."""

    def __init__(self, values, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(values, requires_grad=trainable, dtype=dtype)
        self.name = name

    @property
    def tensor(self) -> Tensor:
        return self

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: tuple
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside it are recorded.
    A tape can be replayed exactly once.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        out._tape = self
        self.nodes.append(_Node(op, out, tuple(inputs), backward_fn))

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, wrt_input: bool = False) -> None:
    """Reverse-accumulate gradients from a scalar ``loss``.

    Trainable parameters always receive gradients. Other leaf tensors that
    require grad (attack inputs) receive one only when ``wrt_input`` is set.
    The tape is consumed and its cached activations are released.
    """
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced by a live tape")
    if tape.consumed:
        raise TapeError("backward called twice on the same tape")
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is tape:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
            elif isinstance(inp, Parameter) or wrt_input:
                inp.accumulate_grad(gi)
    tape.consumed = True
    tape.nodes.clear()
