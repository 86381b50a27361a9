"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tape import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamW:
    learning_rate: float = 2e-4
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    second_moment: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        """Apply one update to every parameter present in ``grads``.

        Decay multiplies the parameter (``p *= 1 - lr*wd``) before the adaptive
        step, independently of the gradient.
        """
        for p, g in grads.items():
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter "
                                 f"{p.name or '?'} of shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for parameter {p.name or '?'}")
        self.step_count += 1
        t = self.step_count
        lr, b1, b2 = self.learning_rate, self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        step_size = lr / bc1
        decay = 1.0 - lr * self.weight_decay
        for p, g in grads.items():
            key = id(p)
            m = self.first_moment.get(key)
            if m is None:
                m = self.first_moment[key] = np.zeros_like(p.data)
                v = self.second_moment[key] = np.zeros_like(p.data)
            else:
                v = self.second_moment[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            denom = np.sqrt(v / bc2)
            denom += self.epsilon
            # rebind rather than mutate: callers may hold references to old values
            p.data = p.data * decay - step_size * m / denom
