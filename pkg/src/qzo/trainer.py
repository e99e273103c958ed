"""Epoch loop around ``train_step``: shuffling, accumulation, cosine decay."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from qzo.model import Batch, QModel
from qzo.optimizer import TrainConfig, cosine_lr
from qzo.zo import PerturbConfig, train_step

METRICS_HEADER = "iteration,epoch,loss,lr,forwards,mode,block,wall_ms"


@dataclass
class MetricsRow:
    iteration: int
    epoch: int
    loss: float
    lr: float
    forwards: int
    mode: str
    block: str
    wall_ms: float | None

    def csv_row(self) -> str:
        wall = "" if self.wall_ms is None else f"{self.wall_ms:.3f}"
        return (f"{self.iteration},{self.epoch},{self.loss:.9g},{self.lr:.9g},{self.forwards},"
                f"{self.mode},{self.block},{wall}")


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic sample permutation for one epoch."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def steps_per_epoch(n: int, tconf: TrainConfig) -> int:
    micro = math.ceil(n / tconf.batch_size)
    return math.ceil(micro / tconf.accum_steps)


def epoch_steps(n: int, tconf: TrainConfig, seed: int, epoch: int) -> list[list[np.ndarray]]:
    """Index groups for each optimizer step: a list of micro-batch index arrays."""
    order = epoch_order(n, seed, epoch)
    micro = [order[k:k + tconf.batch_size] for k in range(0, n, tconf.batch_size)]
    return [micro[k:k + tconf.accum_steps] for k in range(0, len(micro), tconf.accum_steps)]


def train(model: QModel, data: Batch, tconf: TrainConfig, pconf: PerturbConfig,
          on_step: Callable[[MetricsRow], None] | None = None, timing: bool = True) -> list[MetricsRow]:
    """Run ``tconf.epochs`` epochs of BP-free training on ``data`` in place.

    The learning rate follows a cosine decay over all steps of the run.
    Shuffling and perturbations derive from ``pconf.base_seed`` only.
    """
    total = tconf.epochs * steps_per_epoch(len(data), tconf)
    block = "all" if model.trainable_block is None else str(model.trainable_block)
    rows = []
    t = 0
    for epoch in range(tconf.epochs):
        for groups in epoch_steps(len(data), tconf, pconf.base_seed, epoch):
            lr = cosine_lr(t, total, tconf.lr)
            micro = [data.subset(idx) for idx in groups]
            rep = train_step(model, micro, pconf, lr, iteration=t, gns=tconf.gns, qas=tconf.qas)
            row = MetricsRow(t, epoch, rep.loss, lr, rep.forwards, rep.mode_string(), block,
                             rep.wall_ms if timing else None)
            rows.append(row)
            if on_step is not None:
                on_step(row)
            t += 1
    return rows
