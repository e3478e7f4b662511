"""Learning-rate schedules.

``noam``: ``factor * model_dim**-0.5 * min(step**-0.5, step * warmup**-1.5)``.
``linear_warmup``: linear ramp from ``warmup_init_lr`` to ``warmup_end_lr`` over
``warmup_steps`` updates, then inverse square-root decay. Both are floored at
``min_lr``. Steps count optimizer updates, not micro-batches.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from ..errors import ConfigError, ContractError


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "noam"
    warmup_steps: int = 4000
    warmup_init_lr: float = 1e-8
    warmup_end_lr: float = 7e-4
    min_lr: float = 1e-9
    model_dim: int = 300
    factor: float = 1.0

    def __post_init__(self):
        if self.kind not in ("noam", "linear_warmup"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.min_lr <= 0:
            raise ConfigError("min_lr must be strictly positive")

    def __call__(self, step: int) -> float:
        return schedule_lr(self, step)


def schedule_lr(s: LrSchedule, step: int) -> float:
    if step < 1:
        raise ContractError(f"schedule step must be >= 1, got {step}")
    w = s.warmup_steps
    if s.kind == "noam":
        lr = s.factor * s.model_dim ** -0.5 * min(step ** -0.5, step * w ** -1.5)
    elif step < w:
        lr = s.warmup_init_lr + (s.warmup_end_lr - s.warmup_init_lr) * (step / w)
    else:
        lr = s.warmup_end_lr * math.sqrt(w / step)
    return max(lr, s.min_lr)
