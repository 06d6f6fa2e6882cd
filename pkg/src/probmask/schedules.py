"""Per-epoch temperature, remaining-ratio and learning-rate schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass

TAU_HI = 0.97
TAU_LO = 0.03


@dataclass(frozen=True)
class ScheduleParams:
    T: int
    t1: int
    t2: int
    k_f: float
    tau_hi: float = TAU_HI
    tau_lo: float = TAU_LO

    def __post_init__(self):
        if not 0 <= self.t1 < self.t2 <= self.T:
            raise ValueError(f"need 0 <= t1 < t2 <= T, got t1={self.t1} t2={self.t2} T={self.T}")
        if not 0 < self.k_f <= 1:
            raise ValueError(f"k_f must lie in (0, 1], got {self.k_f}")


def temperature(t: float, params: ScheduleParams) -> float:
    if not 0 <= t <= params.T:
        raise ValueError(f"epoch {t} outside [0, {params.T}]")
    return params.tau_hi * (1.0 - t / params.T) + params.tau_lo


def remaining_ratio(t: float, params: ScheduleParams) -> float:
    """Cubic ramp from 1 at ``t1`` down to ``k_f`` at ``t2``."""
    if t < 0:
        raise ValueError(f"negative epoch {t}")
    if t <= params.t1:
        return 1.0
    if t >= params.t2:
        return params.k_f
    frac = 1.0 - (t - params.t1) / (params.t2 - params.t1)
    return params.k_f + (1.0 - params.k_f) * frac ** 3


def budget(k: float, n: int) -> float:
    if not 0 < k <= 1:
        raise ValueError(f"remaining ratio must lie in (0, 1], got {k}")
    if n < 1:
        raise ValueError("n must be positive")
    return k * n


WARMUP_EPOCHS = 5


def weight_lr(epoch: int, base_lr: float, T: int, warmup: bool = False) -> float:
    """Cosine decay over epochs ``1..T``; optional linear warmup over the first 5."""
    lr = base_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / T))
    if warmup and epoch <= WARMUP_EPOCHS:
        lr *= epoch / WARMUP_EPOCHS
    return lr
