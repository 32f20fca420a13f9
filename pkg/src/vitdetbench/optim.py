"""AdamW with decoupled weight decay and the warmup + half-period cosine
learning-rate schedule.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import InvalidInputError, Tensor


class TrainingError(RuntimeError):
    """Raised when optimization hits a non-finite gradient."""


def lr_at(step: int, total_steps: int, warmup_steps: int, base: float) -> float:
    """Linear warmup to ``base`` then half-period cosine decay to zero.

    Warmup interpolates from base/warmup_steps (not zero) so the first step
    has a non-zero rate; the schedule is continuous at the boundary.
    """
    if not 0 <= step <= total_steps:
        raise InvalidInputError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return base * (step + 1) / warmup_steps
    denom = max(total_steps - warmup_steps, 1)
    return base * 0.5 * (1.0 + math.cos(math.pi * (step - warmup_steps) / denom))


def warmup_steps_for(warmup_epochs: float, steps_per_epoch: int) -> int:
    """Epoch-fraction warmup converted to steps, rounded up."""
    return int(math.ceil(warmup_epochs * steps_per_epoch))


def wants_weight_decay(name: str, param: Tensor) -> bool:
    """Decay only weight matrices/kernels: not biases, norms, or positional
    parameters (common practice)."""
    if param.data.ndim <= 1:
        return False
    lowered = name.lower()
    for token in ("abs_pos", "rel_table", "gamma1", "gamma2"):
        if token in lowered:
            return False
    return True


class AdamW:
    """Decoupled-weight-decay Adam with bias correction.

    Weight decay multiplies the parameter by (1 - lr*wd) before the Adam
    update, and is applied only where ``wants_weight_decay`` says so.
    With wd=0 this is exactly Adam.
    """

    def __init__(self, named_params: dict[str, Tensor], lr: float = 1.6e-4,
                 weight_decay: float = 0.1, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        if lr <= 0:
            raise InvalidInputError("lr must be positive")
        if weight_decay < 0:
            raise InvalidInputError("weight decay must be non-negative")
        self.params = dict(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data, dtype=np.float64) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data, dtype=np.float64) for n, p in self.params.items()}

    def step(self, lr: float | None = None):
        lr_t = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for {name} at step {t}")
            if self.weight_decay and wants_weight_decay(name, p):
                p.data *= 1.0 - lr_t * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (lr_t * update).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
