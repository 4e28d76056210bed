"""SGD with momentum and weight decay, cosine/step schedules, and the
adaptive local learning rate used for adder filters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    if total < 1:
        raise ValueError("total steps must be >= 1")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / total))


def step_lr(step: int, milestones, lr_max: float, gamma: float = 0.1) -> float:
    return lr_max * gamma ** sum(step >= m for m in milestones)


@dataclass
class OptimConfig:
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    total_steps: int = 100
    schedule: str = "cosine"
    milestones: tuple = ()
    lr_min: float = 0.0
    adaptive_local_lr: bool = True
    eta: float = 0.1

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.schedule not in ("cosine", "step"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, step: int) -> float:
        if self.schedule == "cosine":
            return cosine_lr(min(step, self.total_steps), self.total_steps, self.base_lr, self.lr_min)
        return step_lr(step, self.milestones, self.base_lr)


def adaptive_rescale(grad: np.ndarray, eta: float) -> np.ndarray | None:
    """Rescale ``grad`` to L2 norm ``eta * sqrt(grad.size)``; None when the norm is zero."""
    norm = np.sqrt(np.sum(np.square(grad, dtype=np.float64)))
    if norm == 0:
        return None
    return (grad * (eta * np.sqrt(grad.size) / norm)).astype(grad.dtype)


def sgd_step(params: dict, grads: dict, state: dict, cfg: OptimConfig, lr: float, adder: set = frozenset()):
    """One in-place SGD update over named arrays.

    ``v <- momentum * v + (g + weight_decay * p)``; ``p <- p - lr * v``.
    For names in ``adder`` (with ``cfg.adaptive_local_lr``) the raw gradient
    is first rescaled to norm ``eta * sqrt(k)``; a zero gradient skips the
    layer entirely.
    """
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        if cfg.adaptive_local_lr and name in adder:
            g = adaptive_rescale(g, cfg.eta)
            if g is None:
                continue
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p)
        v *= cfg.momentum
        v += g + cfg.weight_decay * p
        p -= lr * v
    return params


class SGD:
    """Binds :func:`sgd_step` to a module's :class:`~adderkit.nn.Param` list."""

    def __init__(self, named_params, cfg: OptimConfig):
        self.named = list(named_params)
        self.cfg = cfg
        self.state: dict = {}
        self.step_count = 0

    def zero_grad(self):
        for _, p in self.named:
            p.zero_grad()

    def step(self) -> float:
        lr = self.cfg.lr_at(self.step_count)
        params = {n: p.value for n, p in self.named}
        grads = {n: p.grad for n, p in self.named}
        adder = {n for n, p in self.named if p.adder}
        sgd_step(params, grads, self.state, self.cfg, lr, adder)
        self.step_count += 1
        return lr
