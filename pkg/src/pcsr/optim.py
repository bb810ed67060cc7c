"""Parameter updates: plain SGD for online adaptation, Adam for source training."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor


@dataclass
class ParamGroup:
    name: str
    lr: float
    params: list[Tensor]

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"learning rate for group {self.name!r} must be >= 0, got {self.lr}")


@dataclass
class SgdState:
    """Plain SGD with one learning rate per parameter group."""

    groups: list[ParamGroup]

    def step(self):
        sgd_step(self)

    def zero_grad(self):
        for group in self.groups:
            for p in group.params:
                p.grad = None


def sgd_step(state: SgdState):
    """Apply p <- p - lr * p.grad per group, then clear all grads.

    Every parameter must carry a gradient (run backward first). Parameters
    shared between entries are updated once.
    """
    for group in state.groups:
        for p in group.params:
            if p.grad is None:
                raise ContractError(
                    f"sgd_step: parameter in group {group.name!r} has no gradient"
                )
    done: set[int] = set()
    for group in state.groups:
        if group.lr == 0.0:
            continue
        for p in group.params:
            if id(p) in done:
                continue
            done.add(id(p))
            p.data -= group.lr * p.grad
    state.zero_grad()


class Adam:
    """Adam over a flat parameter list (source-training plumbing)."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ConfigError(f"Adam lr must be >= 0, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise ContractError("Adam step: parameter has no gradient")
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.data -= (self.lr / b1t) * m / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
