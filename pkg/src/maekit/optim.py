"""AdamW with decoupled weight decay, warmup/cosine schedule, epoch loop."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .tensor import Tensor

ADAM_EPS = 1e-8


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 1e-3
    batch_size: int = 8
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    epochs: int = 1
    warmup_epochs: float = 0.0
    schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.warmup_epochs > self.epochs:
            raise ConfigError(
                f"warmup_epochs {self.warmup_epochs} exceeds epochs {self.epochs}"
            )
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")


@dataclass(frozen=True)
class Schedule:
    """Per-step learning-rate plan resolved from an OptimConfig."""

    base_lr: float
    warmup_steps: int
    total_steps: int
    kind: str = "cosine"


def schedule_for(config: OptimConfig, steps_per_epoch: int) -> Schedule:
    total = config.epochs * steps_per_epoch
    warmup = int(config.warmup_epochs * steps_per_epoch)
    return Schedule(config.base_lr, warmup, total, config.schedule)


def lr_at(step: int, sched: Schedule) -> float:
    """Linear warmup from 0, then cosine decay hitting 0 at the final step
    (or a constant plateau)."""
    if step < 0:
        raise ContractError(f"step must be non-negative, got {step}")
    if sched.warmup_steps > 0 and step < sched.warmup_steps:
        return sched.base_lr * step / sched.warmup_steps
    if sched.kind == "constant":
        return sched.base_lr
    span = sched.total_steps - 1 - sched.warmup_steps
    if span <= 0:
        return sched.base_lr
    t = min((step - sched.warmup_steps) / span, 1.0)
    return sched.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: dict[str, Tensor],
                 betas: tuple[float, float] = (0.9, 0.95),
                 weight_decay: float = 0.0):
        self.betas = betas
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: AdamState, lr: float) -> None:
    """One decoupled-weight-decay adaptive-moment update with bias correction."""
    beta1, beta2 = state.betas
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if g.shape != p.data.shape or state.m[name].shape != p.data.shape:
            raise ContractError(
                f"adamw_step: gradient/state shape mismatch for {name}:"
                f" {g.shape} vs {p.data.shape}"
            )
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        if state.weight_decay and p.data.ndim >= 2:
            # decay only matrix/kernel weights, never biases or norm gains
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def train_epoch(params: dict[str, Tensor], state: AdamState, n_samples: int,
                loss_fn: Callable[[np.ndarray], Tensor], sched: Schedule,
                batch_size: int, rng: np.random.Generator,
                log_lines: list[str], start_step: int) -> tuple[float, int]:
    """One pass over the data in a seeded shuffle order, fixed-size batches
    with the last partial batch kept. Returns (mean batch loss, next step)."""
    if n_samples <= 0:
        raise ConfigError("train_epoch needs a non-empty dataset")
    order = rng.permutation(n_samples)
    step = start_step
    losses = []
    for offset in range(0, n_samples, batch_size):
        batch = order[offset:offset + batch_size]
        for p in params.values():
            p.zero_grad()
        loss = loss_fn(batch)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}")
        loss.backward()
        grads = {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()
        }
        lr = lr_at(step, sched)
        adamw_step(params, grads, state, lr)
        log_lines.append(f"{step}\t{lr:.8e}\t{value:.8e}")
        losses.append(value)
        step += 1
    return float(np.mean(losses)), step
