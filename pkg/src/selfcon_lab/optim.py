"""Parameters, SGD with momentum, Adam (critic training) and LR schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Tensor

__all__ = ["Parameter", "MissingGradError", "sgd_step", "LrSchedule", "Adam"]


class MissingGradError(RuntimeError):
    def __init__(self, name: str):
        super().__init__(f"parameter {name!r} has no gradient")
        self.name = name


@dataclass(eq=False)
class Parameter:
    name: str
    tensor: Tensor
    momentum_buffer: np.ndarray = field(init=False)

    def __post_init__(self):
        self.tensor.requires_grad = True
        self.momentum_buffer = np.zeros_like(self.tensor.data)

    @classmethod
    def from_array(cls, name: str, value) -> "Parameter":
        return cls(name, Tensor(value, requires_grad=True))

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    def zero_grad(self) -> None:
        self.tensor.grad = None


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9,
             weight_decay: float = 1e-4) -> None:
    """One SGD update (no Nesterov); grads are cleared afterwards.

    buf <- momentum * buf + (grad + weight_decay * value)
    value <- value - lr * buf
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise MissingGradError(p.name)
    for p in params:
        d = p.grad + weight_decay * p.value if weight_decay else p.grad
        p.momentum_buffer *= momentum
        p.momentum_buffer += d
        p.tensor.data -= lr * p.momentum_buffer
        p.zero_grad()


class Adam:
    """Adam for the MI critics; same grad contract as :func:`sgd_step`."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise MissingGradError(p.name)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.tensor.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    total_epochs: int
    kind: str = "cosine"

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be a positive integer")
        if self.kind not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def lr(self, epoch: float) -> float:
        if self.kind == "constant":
            return self.base_lr
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / self.total_epochs))
