"""Parameter containers and the small set of layers the model is built from."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .tape import Tensor


class Module:
    """Ordered container of named parameters and child modules."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._children: OrderedDict[str, Module] = OrderedDict()

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        p = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = p
        return p

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, zero: bool = False):
        super().__init__()
        self.fan_in, self.fan_out = fan_in, fan_out
        w = np.zeros((fan_in, fan_out)) if zero else glorot_uniform(rng, fan_in, fan_out)
        self.weight = self.add_param("weight", w)
        self.bias = self.add_param("bias", np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.fan_in:
            raise ops.ShapeError(f"Linear: input shape {x.shape} does not end in {self.fan_in}")
        return ops.add(ops.matmul(x, self.weight), self.bias)


class MLP(Module):
    """Two affine layers with a ReLU (and optional dropout) in between."""

    def __init__(self, fan_in: int, hidden: int, fan_out: int, rng: np.random.Generator,
                 dropout: float = 0.0, zero_last: bool = False):
        super().__init__()
        self.fc1 = self.add_child("fc1", Linear(fan_in, hidden, rng))
        self.fc2 = self.add_child("fc2", Linear(hidden, fan_out, rng, zero=zero_last))
        self.dropout = dropout

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None,
                 training: bool = False) -> Tensor:
        hid = ops.relu(self.fc1(x))
        hid = ops.dropout(hid, self.dropout, rng, training)
        return self.fc2(hid)
