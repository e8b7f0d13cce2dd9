"""Momentum SGD over a named parameter collection."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import Tensor


class MissingGradientError(RuntimeError):
    pass


class SGD:
    """w <- w - lr * v with v <- momentum * v + grad; grads cleared after."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self._velocity: dict[str, np.ndarray] = {}

    def step(self) -> None:
        for name, t in self.params.items():
            if not t.requires_grad:
                continue
            if t.grad is None:
                raise MissingGradientError(f"no gradient for parameter {name!r}")
            v = self._velocity.get(name)
            if v is None:
                v = np.zeros_like(t.data)
                self._velocity[name] = v
            v *= self.momentum
            v += t.grad
            t.data -= self.lr * v
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def sgd_step(params: Mapping[str, Tensor], lr: float, momentum: float = 0.0,
             velocity: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """One-shot functional step; returns the velocity state for chaining."""
    opt = SGD(params, lr, momentum)
    if velocity is not None:
        opt._velocity = velocity
    opt.step()
    return opt._velocity
