"""Dense tensors with a define-by-run tape for reverse-mode differentiation."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_PRECISIONS = {"test": np.float64, "run": np.float32}
_dtype = np.float32


def set_precision(mode: str) -> None:
    """Switch the default scalar type: ``"test"`` is 64-bit, ``"run"`` is 32-bit."""
    global _dtype
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision mode {mode!r}")
    _dtype = _PRECISIONS[mode]


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(mode: str):
    global _dtype
    prev = _dtype
    set_precision(mode)
    try:
        yield
    finally:
        _dtype = prev


class ShapeError(ValueError):
    """Incompatible operand shapes for a primitive."""

    def __init__(self, primitive: str, *shapes, detail: str = ""):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{primitive}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.primitive = primitive
        self.shapes = shapes


class StaleTapeError(RuntimeError):
    pass


class DiffTensor:
    """A dense array that can take part in gradient computation.

    ``grad`` is allocated lazily by :func:`backward` for leaves created with
    ``requires_grad=True``.
    """

    __slots__ = ("values", "grad", "requires_grad", "name", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(values, dtype=dtype or _dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.values = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Optional[Node] = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._node is not None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.values, dtype=self.values.dtype)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return len(self.values)

    # operator sugar; implementations live in ops
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

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.slice(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)


@dataclass(eq=False)
class Node:
    """One recorded primitive application."""

    op: str
    inputs: tuple
    outputs: tuple
    vjp: Callable[..., Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives evaluated inside record themselves
    when any input is tracked. Nodes are appended in execution order, so the
    list is topologically sorted by construction.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False

    _stack = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    @classmethod
    def current(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None

    def record(self, node: Node) -> None:
        if self.consumed:
            raise StaleTapeError("cannot record onto a tape that was already differentiated")
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def __len__(self):
        return len(self.nodes)


def as_tensor(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(x)


def record(op: str, inputs: Sequence[DiffTensor], outputs, vjp) -> None:
    """Attach ``outputs`` to the active tape if any input carries gradient."""
    tape = Tape.current()
    if tape is None or not any(t.tracked for t in inputs):
        return
    outs = tuple(outputs) if isinstance(outputs, (tuple, list)) else (outputs,)
    node = Node(op, tuple(inputs), outs, vjp)
    tape.record(node)
    for o in outs:
        o._node = node


def backward(tape: Tape, loss: DiffTensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers so that several
    tapes (one per scene) can contribute to the same parameters.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    if tape.consumed:
        raise StaleTapeError("backward already ran on this tape; call reset() first")
    if loss._node is None or not any(loss._node is n for n in tape.nodes):
        raise ValueError("loss was not produced on this tape")

    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        out_grads = [grads.pop(id(o), None) for o in node.outputs]
        if all(g is None for g in out_grads):
            continue
        out_grads = [np.zeros(o.shape, o.dtype) if g is None else g
                     for o, g in zip(node.outputs, out_grads)]
        in_grads = node.vjp(*out_grads)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.tracked:
                continue
            if t._node is None:
                if t.grad is None:
                    t.grad = np.array(g, dtype=t.dtype, copy=True).reshape(t.shape)
                else:
                    t.grad += g
            else:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
    tape.consumed = True
