"""Tensors and the dynamic tape used for reverse-mode differentiation.

Every op in :mod:`crl_mmnar.kernel.ops` evaluates eagerly with numpy and, when
a :class:`Tape` is active and at least one input requires a gradient, appends a
node holding the output and a vector-Jacobian closure.  Nodes are appended in
evaluation order, so ids are topological by construction and the backward pass
is a single reverse sweep.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives shape-incompatible inputs."""


class Tensor:
    """Dense float64 array with an optional gradient requirement.

    Tensors are treated as immutable: ops never write into ``data``.  Parameters
    are updated by rebinding ``data`` to a fresh array.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item(): tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported; use ops.scale")
        return ops.scale(self, 1.0 / float(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["Tape"] = []


class Tape:
    """Append-only record of differentiable ops.

    Use as a context manager; a fresh tape is built for every minibatch::

        with Tape() as tape:
            loss = model.loss(batch)
        grads = tape.backward(loss, params)
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def record(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, vjp) -> None:
        self.nodes.append(Node(len(self.nodes), op, inputs, out, vjp))
        self._produced.add(id(out))

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` with respect to leaf tensors.

        With ``params`` given, every listed parameter gets an entry (zeros when
        the loss does not depend on it); otherwise only reached leaves appear.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward(): loss must be a scalar, got shape {loss.shape}")
        if id(loss) not in self._produced and not loss.requires_grad:
            # a constant or a value computed after the tape closed: all gradients would silently be zero
            raise ValueError("backward(): loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            if id(node.out) != id(loss):
                del grads[id(node.out)]
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key not in self._produced:
                    leaves[key] = inp
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        if id(loss) not in self._produced and loss.requires_grad:
            leaves[id(loss)] = loss
        out: dict[Tensor, np.ndarray] = {}
        if params is None:
            for key, leaf in leaves.items():
                out[leaf] = grads[key]
        else:
            for p in params:
                g = grads.get(id(p))
                out[p] = np.zeros_like(p.data) if g is None else g
        return out


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, vjp) -> Tensor:
    """Wrap ``out_data`` and record the op on the active tape if needed."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, vjp)
    return out
