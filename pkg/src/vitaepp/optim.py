"""AdamW with decoupled weight decay, and the lr and lambda1 schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("eps must be positive and weight_decay non-negative")


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05

    @classmethod
    def zeros(cls, params: dict[str, Tensor], **hyper) -> "AdamWState":
        m = {k: np.zeros_like(p.data) for k, p in params.items()}
        v = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(m, v, 0, **hyper)

    def hyper(self) -> dict:
        return dict(beta1=self.beta1, beta2=self.beta2, eps=self.eps, weight_decay=self.weight_decay)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamWState, lr: float) -> AdamWState:
    """One in-place AdamW update of every parameter in ``params``.

    p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p, with the decay
    term using the pre-update p. Parameters without a gradient are treated
    as having a zero gradient (the decay still applies).
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ShapeError(f"optimizer state for {name} has shape {m.shape}, parameter has {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step - (lr * state.weight_decay) * p.data).astype(p.data.dtype, copy=False)
    return state


class AdamW:
    """Thin stateful wrapper: ``opt.step(lr)`` reads ``p.grad`` from each parameter."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.05):
        self.params = params
        self.state = AdamWState.zeros(params, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)

    def step(self, lr: float) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adamw_step(self.params, grads, self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainSchedule:
    base_lr: float = 1e-3
    warmup_epochs: int = 40
    total_epochs: int = 1000
    lambda1_init: float = 0.01
    lambda1_final: float = 0.0
    granularity: str = "epoch"  # or "step"

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError(f"need 0 <= warmup < total, got {self.warmup_epochs}/{self.total_epochs}")
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        if self.granularity not in ("epoch", "step"):
            raise ValueError(f"granularity must be 'epoch' or 'step', got {self.granularity!r}")

    @classmethod
    def desk(cls, **kw) -> "TrainSchedule":
        base = dict(warmup_epochs=10, total_epochs=100)
        base.update(kw)
        return cls(**base)


def _warmup_cosine(t: float, warmup: float, total: float, base: float) -> float:
    if t < warmup:
        # capped at base so the rate is continuous at the boundary for fractional t
        return base * min(1.0, (t + 1) / warmup)
    return base * 0.5 * (1.0 + math.cos(math.pi * (t - warmup) / (total - warmup)))


def lr_at(epoch: float, sched: TrainSchedule) -> float:
    """Linear warmup base*(epoch+1)/warmup, then cosine decay to 0 at ``total_epochs``."""
    if not 0 <= epoch <= sched.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {sched.total_epochs}]")
    return _warmup_cosine(epoch, sched.warmup_epochs, sched.total_epochs, sched.base_lr)


def lr_at_step(step: int, steps_per_epoch: int, sched: TrainSchedule) -> float:
    """Learning rate for a global optimizer step.

    With epoch granularity the rate is constant within an epoch; with step
    granularity the same warmup/cosine shape is laid over step indices.
    """
    if sched.granularity == "epoch":
        return lr_at(step // steps_per_epoch, sched)
    total = sched.total_epochs * steps_per_epoch
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return _warmup_cosine(step, sched.warmup_epochs * steps_per_epoch, total, sched.base_lr)


def lambda1_at(epoch: float, sched: TrainSchedule) -> float:
    """lambda1_init * (1 - epoch / total), never below ``lambda1_final``."""
    if not 0 <= epoch <= sched.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {sched.total_epochs}]")
    return max(sched.lambda1_init * (1.0 - epoch / sched.total_epochs), sched.lambda1_final)
