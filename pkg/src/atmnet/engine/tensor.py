"""Array container and the gradient tape.

Arrays are thin wrappers around numpy buffers. Operations executed while a
:class:`Tape` is active (and with at least one input requiring gradients)
append a node to that tape; :meth:`Tape.backward` walks the nodes in exact
reverse order of execution.
"""
from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np

from ..errors import TapeStateError

DEBUG = os.environ.get("ATMNET_DEBUG", "") not in ("", "0")

_ACTIVE: list["Tape"] = []


class Array:
    """n-dimensional float buffer with optional gradient participation.

    Python sequences and scalars become float32. numpy arrays keep their
    dtype, so float64 buffers stay float64 (used for gradient checks).
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Array):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray):
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def astype(self, dtype) -> "Array":
        return Array(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Array(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; imported lazily to avoid a cycle with ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive ops, replayed backwards once.

    Usage::

        with Tape() as tape:
            loss = model_loss(...)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.in_recording = False
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeStateError("tape already consumed by backward; create a new one")
        _ACTIVE.append(self)
        self.in_recording = True
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)
        self.in_recording = False

    def record(self, out: Array, inputs: Sequence[Array], backward_fn: Callable) -> None:
        out._tape = self
        self.nodes.append(_Node(out, tuple(inputs), backward_fn))

    def backward(self, loss: Array) -> None:
        if self._consumed:
            raise TapeStateError("backward already ran on this tape")
        if loss._tape is not self:
            raise TapeStateError("loss was not produced on this tape")
        if loss.size != 1:
            raise TapeStateError(f"loss must be a single element, got shape {loss.shape}")
        self._consumed = True
        if self in _ACTIVE:
            _ACTIVE.remove(self)
            self.in_recording = False

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is self:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                else:
                    gi = np.asarray(gi, dtype=inp.dtype)
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
        self.nodes.clear()


def current_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def backward(loss: Array) -> None:
    """Populate ``.grad`` of every leaf that contributed to ``loss``."""
    if loss._tape is None:
        raise TapeStateError("loss was not recorded on any tape")
    loss._tape.backward(loss)


def make_result(data: np.ndarray, inputs: Sequence[Array], backward_fn: Callable) -> Array:
    """Wrap an op result and record it if any input participates in a tape."""
    if DEBUG and data.dtype.kind == "f" and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(a.data)) for a in inputs if a.data.dtype.kind == "f"):
            raise FloatingPointError("non-finite output from finite inputs")
    out = Array(data)
    tape = current_tape()
    if tape is not None and any(a.requires_grad for a in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def as_array(x, like: Array | None = None) -> Array:
    if isinstance(x, Array):
        return x
    dtype = like.dtype if like is not None else None
    if dtype is None and not isinstance(x, np.ndarray):
        dtype = np.float32
    return Array(np.asarray(x, dtype=dtype))
