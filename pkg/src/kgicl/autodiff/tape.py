"""Tape-based reverse-mode differentiation over dense numpy arrays."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense array that may be recorded on a tape.

    Leaves created with ``Tape.param`` carry a name and receive gradients;
    constants never do.
    """

    __slots__ = ("data", "tape", "name", "requires_grad")

    def __init__(self, data: np.ndarray, tape: Optional["Tape"] = None,
                 name: Optional[str] = None, requires_grad: bool = False):
        self.data = data
        self.tape = tape
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "op")

    def __init__(self, out, parents, backward_fn, op):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Records operations in execution order.

    ``dtype`` controls the precision of every array created on this tape;
    use ``np.float64`` for shadow evaluation in gradient checks.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[_Node] = []
        self.params: dict[str, Tensor] = {}

    def param(self, name: str, array) -> Tensor:
        if name in self.params:
            return self.params[name]
        t = Tensor(np.array(array, dtype=self.dtype), self, name=name, requires_grad=True)
        self.params[name] = t
        return t

    def constant(self, array) -> Tensor:
        return Tensor(np.asarray(array, dtype=self.dtype), self)

    def record(self, op: str, out_data: np.ndarray, parents: Sequence[Tensor],
               backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
        needs = any(p.requires_grad for p in parents)
        out = Tensor(out_data.astype(self.dtype, copy=False), self, requires_grad=needs)
        if needs:
            self.nodes.append(_Node(out, tuple(parents), backward_fn, op))
        return out

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        if loss.data.size != 1 or loss.data.ndim > 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=self.dtype).reshape(p.data.shape)
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = {}
        for name, t in self.params.items():
            g = grads.get(id(t))
            out[name] = g if g is not None else np.zeros_like(t.data)
        return out
