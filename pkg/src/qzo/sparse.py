"""Choose one trainable block by trial training, then train only that block."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

from qzo.model import Batch, ModelError, QModel, accuracy
from qzo.optimizer import TrainConfig
from qzo.trainer import train
from qzo.zo import PerturbConfig


@dataclass
class SelectionReport:
    acc_before: float
    acc_after: list[float]
    chosen: int
    forwards: int

    @property
    def gains(self) -> list[float]:
        return [a - self.acc_before for a in self.acc_after]

    CSV_HEADER = "block,acc_before,acc_after,gain"

    def csv_rows(self) -> list[str]:
        return [f"{b},{self.acc_before:.6f},{a:.6f},{g:.6f}"
                for b, (a, g) in enumerate(zip(self.acc_after, self.gains))]


def pick_block(gains) -> int:
    """Index of the largest gain; the lowest index wins ties."""
    gains = list(gains)
    if not gains:
        raise ValueError("no gains to choose from")
    best = 0
    for b, g in enumerate(gains):
        if g > gains[best]:
            best = b
    return best


def set_trainable(model: QModel, block: int | None) -> None:
    """Restrict training to ``block``; ``None`` makes every layer trainable."""
    if block is None:
        model.trainable_block = None
        return
    if isinstance(block, bool) or not isinstance(block, (int, np.integer)):
        raise ModelError(f"block id must be an integer, got {block!r}")
    if not 0 <= block < model.n_blocks:
        raise ModelError(f"invalid block id {block}; model has {model.n_blocks} blocks")
    members = [l for l, b in zip(model.layers, model.block_of) if b == block]
    if sum(l.d_w for l in members) == 0:
        raise ModelError(f"block {block} has no trainable parameters")
    model.trainable_block = int(block)


def heldout_split(labels, frac: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Stratified deterministic split into (train_idx, heldout_idx).

    Within each class, samples are ranked by a CRC32 of (label, index) and
    the first ``round(frac * count)`` go to the held-out side.
    """
    if not 0 < frac < 1:
        raise ValueError(f"held-out fraction must be in (0, 1), got {frac}")
    labels = np.asarray(labels, dtype=np.int64)
    held = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        keys = [zlib.crc32(f"{c}:{i}".encode()) for i in idx]
        ranked = idx[np.argsort(keys, kind="stable")]
        held.extend(ranked[:int(round(frac * idx.size))].tolist())
    mask = np.zeros(labels.size, dtype=bool)
    mask[held] = True
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def select_block(model: QModel, train_set: Batch, heldout: Batch, tconf: TrainConfig,
                 pconf: PerturbConfig) -> SelectionReport:
    """One-epoch trial training of each block on a clone; the base model is untouched."""
    if len(train_set) == 0 or len(heldout) == 0:
        raise ValueError("selection needs non-empty train and held-out subsets")
    if model.n_blocks < 1:
        raise ModelError("model is not partitioned into blocks")
    one_epoch = replace(tconf, epochs=1)
    before = accuracy(model, heldout)
    after, forwards = [], 0
    for b in range(model.n_blocks):
        trial = model.clone()
        set_trainable(trial, b)
        rows = train(trial, train_set, one_epoch, pconf, timing=False)
        forwards += sum(r.forwards for r in rows)
        after.append(accuracy(trial, heldout))
    report = SelectionReport(before, after, 0, forwards)
    report.chosen = pick_block(report.gains)
    return report
