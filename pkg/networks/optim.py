# networks/optim.py
"""Adam + OneCycle (linear warmup, cosine decay to max/25) on torch.optim."""

import math

import torch
from torch.optim.lr_scheduler import LambdaLR


def onecycle_lr(i: int, total: int, max_lr: float = 1e-3, warmup_fraction: float = 0.3, div_factor: float = 25.0) -> float:
    floor = max_lr / div_factor
    warmup = max(1, int(round(warmup_fraction * total)))
    i = min(max(i, 0), total)
    if i < warmup:
        return floor + (max_lr - floor) * i / warmup
    decay = max(1, total - warmup)
    progress = min(1.0, (i - warmup) / decay)
    return floor + 0.5 * (max_lr - floor) * (1.0 + math.cos(math.pi * progress))


class OptimState:
    """Adam (0.9, 0.999, 1e-8) with a LambdaLR OneCycle schedule."""

    def __init__(self, params, total_steps: int, max_lr: float = 1e-3, warmup_fraction: float = 0.3):
        self.total_steps = total_steps
        self.max_lr = max_lr
        self.optimizer = torch.optim.Adam(params, lr=max_lr, betas=(0.9, 0.999), eps=1e-8)
        self.scheduler = LambdaLR(
            self.optimizer,
            lambda i: onecycle_lr(i, total_steps, max_lr, warmup_fraction) / max_lr,
        )
        self.step_count = 0

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])


def adam_step(state: OptimState) -> float:
    """Applies one update with the current lr, zeroes grads, advances the schedule."""
    lr = state.lr
    state.optimizer.step()
    state.optimizer.zero_grad()
    state.scheduler.step()
    state.step_count += 1
    return lr
