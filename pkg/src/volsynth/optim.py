"""Learning-rate schedule, decoupled-weight-decay Adam, and EMA shadows.

These operate on named parameter dicts so checkpoints can serialize
optimizer state alongside weights in the shared manifest+blob format.
"""

from __future__ import annotations

import math

import torch


class NonFiniteGradient(RuntimeError):
    """A parameter produced a NaN/Inf gradient; the step was aborted."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


def warmup_cosine_lr(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    """Linear ramp 0 -> base_lr over warmup, then cosine decay to 0 at total_steps."""
    if warmup_steps >= total_steps:
        raise ValueError(f"warmup_steps {warmup_steps} must be < total_steps {total_steps}")
    if step < 0:
        raise ValueError(f"negative step {step}")
    step = min(step, total_steps)
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * math.cos(0.5 * math.pi * progress) ** 2


class AdamW:
    """Bias-corrected Adam with decoupled weight decay over named tensors.

    weight_decay=0 is plain Adam (no coupled L2 term exists). A non-finite
    gradient aborts the whole step and reports the offending parameter.
    """

    def __init__(self, params: dict[str, torch.Tensor], lr=1e-3, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.0):
        if len(set(params)) != len(params):
            raise ValueError("parameter names must be unique")
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.exp_avg = {k: torch.zeros_like(v) for k, v in self.params.items()}
        self.exp_avg_sq = {k: torch.zeros_like(v) for k, v in self.params.items()}

    @torch.no_grad()
    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        for name, p in self.params.items():
            g = p.grad
            if g is not None and not torch.isfinite(g).all():
                raise NonFiniteGradient(name)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.exp_avg[name]
            v = self.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if self.weight_decay != 0.0:
                p.mul_(1.0 - lr * self.weight_decay)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)

    @torch.no_grad()
    def zero_grad(self) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.grad.zero_()

    def state_arrays(self) -> dict[str, torch.Tensor]:
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.exp_avg[name]
            out[f"opt.v.{name}"] = self.exp_avg_sq[name]
        return out

    def load_state_arrays(self, arrays: dict[str, torch.Tensor], step_count: int) -> None:
        for name in self.params:
            self.exp_avg[name].copy_(arrays[f"opt.m.{name}"])
            self.exp_avg_sq[name].copy_(arrays[f"opt.v.{name}"])
        self.step_count = step_count


class EmaShadow:
    """Exponential moving average of named parameters (decay 0.9999 at paper scale)."""

    def __init__(self, params: dict[str, torch.Tensor], decay: float):
        if not 0.0 <= decay <= 1.0:
            raise ValueError(f"decay must be in [0, 1], got {decay}")
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in params.items()}

    @torch.no_grad()
    def update(self, params: dict[str, torch.Tensor]) -> None:
        for name, p in params.items():
            s = self.shadow[name]
            if s.shape != p.shape:
                raise ValueError(f"shadow/param shape mismatch for {name!r}")
            s.mul_(self.decay).add_(p, alpha=1.0 - self.decay)

    @torch.no_grad()
    def copy_to(self, params: dict[str, torch.Tensor]) -> None:
        for name, p in params.items():
            p.copy_(self.shadow[name])


def ema_update(shadow: dict[str, torch.Tensor], params: dict[str, torch.Tensor], decay: float) -> None:
    """shadow <- decay * shadow + (1 - decay) * params, array by array."""
    for name, p in params.items():
        shadow[name].mul_(decay).add_(p, alpha=1.0 - decay)
