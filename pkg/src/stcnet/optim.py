"""Optimizers (Adam, SGD with momentum) and the warmup + cosine LR schedule.

Both optimizers apply weight decay decoupled from the gradient (the decay term
multiplies the parameter directly rather than entering the moments). Adam
folds its epsilon inside the square root, denom = sqrt(vhat + eps); with g=1
everywhere the first step is therefore -lr/sqrt(1 + 1e-8).

A non-finite gradient aborts the whole step, naming the parameter, before any
parameter has been touched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

__all__ = ["OptimizerState", "ScheduleConfig", "lr_at", "optimizer_step"]


@dataclass
class ScheduleConfig:
    """Linear warmup from 0 to lr_init, then cosine decay to lr_final."""

    lr_init: float = 1e-3
    lr_final: float = 1e-5
    warmup_epochs: int = 10
    total_epochs: int = 100

    def __post_init__(self):
        if self.lr_final > self.lr_init:
            raise ValueError("lr_final must not exceed lr_init")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")


def lr_at(schedule: ScheduleConfig, epoch: float) -> float:
    """Learning rate at a (possibly fractional) epoch in [0, total]."""
    if epoch < 0 or epoch > schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    if epoch <= schedule.warmup_epochs:
        if schedule.warmup_epochs == 0:
            return schedule.lr_init
        return schedule.lr_init * (epoch / schedule.warmup_epochs)
    progress = (epoch - schedule.warmup_epochs) / (schedule.total_epochs - schedule.warmup_epochs)
    return schedule.lr_final + 0.5 * (schedule.lr_init - schedule.lr_final) * (
        1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """Hyperparameters plus per-parameter moment buffers, keyed by name."""

    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    buf: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def optimizer_step(opt: OptimizerState, params: dict[str, Tensor],
                   grads: dict[str, np.ndarray | None]) -> None:
    """Apply one update in place; a missing gradient counts as zero."""
    resolved: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        resolved[name] = g

    opt.step_count += 1
    t = opt.step_count
    for name, p in params.items():
        g = resolved[name]
        theta = p.data
        if opt.weight_decay:
            theta = theta - opt.lr * opt.weight_decay * theta
        if opt.kind == "adam":
            m = opt.m.get(name)
            v = opt.v.get(name)
            if m is None:
                m = np.zeros_like(theta)
                v = np.zeros_like(theta)
            m = opt.beta1 * m + (1.0 - opt.beta1) * g
            v = opt.beta2 * v + (1.0 - opt.beta2) * np.square(g)
            opt.m[name], opt.v[name] = m, v
            m_hat = m / (1.0 - opt.beta1 ** t)
            v_hat = v / (1.0 - opt.beta2 ** t)
            theta = theta - opt.lr * m_hat / np.sqrt(v_hat + opt.eps)
        else:
            buf = opt.buf.get(name)
            buf = g if buf is None else opt.momentum * buf + g
            opt.buf[name] = buf
            theta = theta - opt.lr * buf
        p.data = theta.astype(p.data.dtype, copy=False)
