"""Dense f64 tensors with reverse-mode gradients over a recorded tape.

A ``DualTensor`` pairs a value array with a same-shaped gradient
accumulator.  Operations (see ``ops``) compute values eagerly and push a
backward closure onto a ``Tape``; ``Tape.backward`` replays the closures
in reverse, accumulating into each operand's ``grad``.  One tape holds
one training step; tensors may be shared across tapes only as read-only
leaves.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DualTensor:
    """A float64 array plus its zero-initialized gradient accumulator.

    Tensors flagged ``needs_grad=False`` (constants) carry no gradient
    buffer and are skipped by every backward closure.
    """

    __slots__ = ("values", "grad", "needs_grad")

    def __init__(self, values, grad: np.ndarray | None = None, needs_grad: bool = True):
        v = np.asarray(values, dtype=np.float64)
        if not v.flags.c_contiguous:
            v = np.ascontiguousarray(v)
        self.values = v
        self.needs_grad = needs_grad
        if not needs_grad:
            self.grad = None
            if grad is not None:
                raise ShapeError("constant tensors carry no gradient buffer")
            return
        self.grad = np.zeros(v.shape) if grad is None else grad
        if self.grad.shape != v.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != values shape {v.shape}")

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"DualTensor(shape={self.values.shape})"


class Tape:
    """Recorded computation list; replayed in reverse for gradients."""

    __slots__ = ("_steps",)

    def __init__(self):
        self._steps: list[Callable[[], None]] = []

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._steps.append(backward_fn)

    def __len__(self) -> int:
        return len(self._steps)

    def backward(self, root: DualTensor) -> None:
        """Seed d(root)/d(root) = 1 and accumulate gradients for every
        recorded operand.  ``root`` must hold a single element."""
        if root.values.size != 1:
            raise ShapeError(f"backward root must be scalar-sized, got shape {root.shape}")
        if not root.needs_grad:
            raise ShapeError("backward root does not depend on any gradient-carrying tensor")
        root.grad[...] = 1.0
        for fn in reversed(self._steps):
            fn()
