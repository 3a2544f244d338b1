"""Tensor, tape and the reverse sweep.

Complex values are numpy ``complex128`` arrays, i.e. interleaved float64
(real, imaginary) pairs.  Gradients use the real-pair convention: for a
real loss L and a complex entry z = a + ib the stored gradient is
dL/da + i dL/db.  For a holomorphic primitive y = f(z) this gives the
chain rule ``grad_z = grad_y * conj(f'(z))``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

_ids = itertools.count(1)
_tape_serials = itertools.count(1)
_active: list = []


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if np.iscomplexobj(arr):
        return arr.astype(np.complex128, copy=False)
    return arr.astype(np.float64, copy=False)


class Tensor:
    """An array plus the bookkeeping needed to take part in a tape."""

    # ``tape`` is the serial of the recording tape, not the tape itself: a
    # reference would close a cycle (tensor -> tape -> record -> tensor) and
    # keep whole forward passes alive until a full garbage collection.
    __slots__ = ("data", "requires_grad", "id", "name", "tape")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_complex(self) -> bool:
        return self.data.dtype == np.complex128

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        kind = "complex" if self.is_complex else "real"
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}({kind}, shape={self.shape}, grad={self.requires_grad})"

    # operator sugar; the primitives live in ops.py
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
        return ops.mul(self, ops.reciprocal(other))

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    op: str
    inputs: tuple  # input tensors (their ids are the node ids)
    output: Tensor
    vjp: Callable  # closes over the saved forward values

    @property
    def input_ids(self):
        return tuple(t.id for t in self.inputs)


class Tape:
    """Ordered log of primitive applications.

    Used as a context manager; primitives evaluated inside the block are
    recorded when at least one input requires a gradient.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.serial = next(_tape_serials)

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.pop()
        return False

    def __len__(self):
        return len(self.records)


def current_tape() -> Tape | None:
    return _active[-1] if _active else None


def record(op: str, data, inputs, vjp) -> Tensor:
    """Wrap ``data`` as the output of primitive ``op`` and log it if needed."""
    out = Tensor(data)
    tape = current_tape()
    if tape is None:
        return out
    tracked = False
    for t in inputs:
        if t.requires_grad:
            if t.tape is not None and t.tape != tape.serial:
                raise RuntimeError(f"{t!r} belongs to a different tape")
            tracked = True
    if tracked:
        out.requires_grad = True
        out.tape = tape.serial
        tape.records.append(Record(op, tuple(inputs), out, vjp))
    return out


def unbroadcast(grad: np.ndarray, shape, is_complex: bool) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undoing numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    if not is_complex and np.iscomplexobj(grad):
        grad = grad.real
    elif is_complex and not np.iscomplexobj(grad):
        grad = grad.astype(np.complex128)
    return grad


class Gradients(dict):
    """Gradient map keyed by node id; ``grads[tensor]`` also works."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            got = self.get(key.id)
            if got is None:
                return np.zeros(key.shape, dtype=key.data.dtype)
            return got
        return super().__getitem__(key)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse sweep over ``tape`` seeded at the real scalar ``loss``.

    Returns gradients for every node reached.  Leaves that the loss does
    not depend on read as zeros through ``Gradients.__getitem__``.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.is_complex:
        raise ValueError("loss must be real; take re() first")
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads = Gradients()
    grads[loss.id] = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = grads.get(rec.output.id)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = unbroadcast(np.asarray(gi), inp.shape, inp.is_complex)
            prev = grads.get(inp.id)
            grads[inp.id] = gi if prev is None else prev + gi
    return grads
