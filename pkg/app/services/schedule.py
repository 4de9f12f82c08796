import math
from typing import Iterable

import torch
from torch.optim.lr_scheduler import LambdaLR

from app.schemas.predictor import TrainSchedule


class WarmupCosineSchedule:
    """
    Learning-rate curve of a TrainSchedule: linear warmup to the scaled peak,
    then half-cosine decay to min_lr at the last step.
    """

    def __init__(self, schedule: TrainSchedule):
        self.schedule = schedule

    def lr_at(self, step: int) -> float:
        s = self.schedule
        peak = s.peak_lr
        if s.warmup_steps and step < s.warmup_steps:
            return peak * (step + 1) / s.warmup_steps
        decay_steps = max(1, s.total_steps - s.warmup_steps)
        progress = min(1.0, (step - s.warmup_steps) / decay_steps)
        return s.min_lr + (peak - s.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))

    def factor(self, step: int) -> float:
        peak = self.schedule.peak_lr
        return self.lr_at(step) / peak if peak > 0 else 0.0


def build_optimizer(parameters: Iterable[torch.nn.Parameter], schedule: TrainSchedule):
    """AdamW with decoupled weight decay and its warmup/cosine scheduler."""
    params = [p for p in parameters if p.requires_grad]
    if not params:
        raise ValueError("No trainable parameters")
    optimizer = torch.optim.AdamW(
        params,
        lr=schedule.peak_lr,
        betas=tuple(schedule.betas),
        weight_decay=schedule.weight_decay,
    )
    curve = WarmupCosineSchedule(schedule)
    scheduler = LambdaLR(optimizer, lr_lambda=curve.factor)
    return optimizer, scheduler
