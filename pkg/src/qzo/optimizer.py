"""ZO-SGD on integer parameters with learning-rate scaling.

No optimizer state is kept: an update only needs the current integer
tensor, its gradient buffer and a handful of scalars.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from qzo.quant import QTensor, qrange, round_half_away


@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs: int = 1
    batch_size: int = 1
    accum_steps: int = 1
    gns: bool = True
    qas: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.accum_steps < 1:
            raise ValueError(f"accum_steps must be >= 1, got {self.accum_steps}")


def gns_factor(n: int, q: int, d: int) -> float:
    """Gradient-norm scaling ``NQ / (NQ + d - 1)``.

    The squared norm of a randomized estimate is roughly ``(NQ + d - 1) / NQ``
    times that of a first-order stochastic gradient; this undoes it.
    """
    if min(n, q, d) < 1:
        raise ValueError(f"N, Q, d must be >= 1, got {n}, {q}, {d}")
    return n * q / (n * q + d - 1)


def qas_factor(scale: float) -> float:
    """Quantization-aware scaling ``1 / s**2``."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return 1.0 / (scale * scale)


def scaled_step(grad, lr: float, n: int, q: int, d: int, scale: float, gns: bool = True, qas: bool = True):
    factor = lr
    if gns:
        factor *= gns_factor(n, q, d)
    if qas:
        factor *= qas_factor(scale)
    return factor * np.asarray(grad, dtype=np.float64)


def apply_update(theta: QTensor, grad, lr: float, n: int, q: int, d: int, scale: float,
                 gns: bool = True, qas: bool = True) -> QTensor:
    """``clip(round(theta - gns * qas * lr * grad), -Q_N, Q_P)`` as a new tensor."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {theta.shape}")
    lo, hi = qrange(theta.bitwidth, theta.signed)
    step = scaled_step(grad, lr, n, q, d, scale, gns, qas)
    if not np.all(np.isfinite(step)):
        raise ValueError("non-finite update step")
    # pre-clip so huge steps cannot overflow the integer conversion
    target = np.clip(theta.data - step, lo - 1.0, hi + 1.0)
    new = np.clip(round_half_away(target), lo, hi)
    return QTensor(new.astype(np.int32), theta.scale, theta.bitwidth, theta.signed)


def cosine_lr(t: float, total: float, lr0: float) -> float:
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr0 * (1 + math.cos(math.pi * t / total)) / 2
