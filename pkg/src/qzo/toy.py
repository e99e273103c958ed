"""Small synthetic tasks and models for demos and tests.

``python -m qzo.toy OUT_DIR`` writes a linearly separable dataset (CSV), a
tiny image dataset (QDS1) and matching INT8 checkpoints.
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from qzo.io import checkpoint_save, save_qds
from qzo.model import FPLayer, FPModel, ptq_calibrate, partition_blocks


def separable_task(n: int, dim: int = 16, seed: int = 0, margin: float = 0.0):
    """Gaussian points labelled by the sign of a random hyperplane."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=dim)
    x = rng.normal(size=(n, dim))
    score = x @ w / np.linalg.norm(w)
    if margin:
        x = x + margin * np.sign(score)[:, None] * w / np.linalg.norm(w)
    return x, (score > 0).astype(np.int64)


def mlp(sizes, seed: int = 0, scale: float = 1.0) -> FPModel:
    """Random float MLP with ReLU hidden layers."""
    rng = np.random.default_rng(seed)
    layers = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers.append(FPLayer("fc", scale * rng.normal(size=(b, a)) / np.sqrt(a), np.zeros(b), "relu"))
    layers[-1].activation = "identity"
    return FPModel(layers, (sizes[0],), sizes[-1])


def conv_net(seed: int = 0, channels: int = 2, hw: int = 12, hidden: int = 4, n_classes: int = 2,
             stem_act: str = "relu") -> FPModel:
    """conv -> depthwise conv -> fc -> fc on (1, hw, hw) input.

    The two convolutions have far fewer parameters than outputs and the two
    fully-connected layers the reverse, so the adaptive rule picks WP for
    the first pair and NP for the second. ``stem_act="identity"`` keeps the
    depthwise layer's input zero-centred when the images are; all-positive
    patches share a common direction that favours NP on weight-shared layers.
    """
    rng = np.random.default_rng(seed)
    c = channels
    flat = c * hw * hw
    return FPModel([
        FPLayer("conv2d", rng.normal(size=(c, 1, 3, 3)) / 3, 0.1 * rng.normal(size=c), stem_act, 1, 1),
        FPLayer("dwconv2d", rng.normal(size=(c, 1, 3, 3)) / 3, 0.1 * rng.normal(size=c), "relu", 1, 1),
        FPLayer("fc", rng.normal(size=(hidden, flat)) / np.sqrt(flat), 0.1 * rng.normal(size=hidden), "relu"),
        FPLayer("fc", rng.normal(size=(n_classes, hidden)) / np.sqrt(hidden), np.zeros(n_classes), "identity"),
    ], (1, hw, hw), n_classes)


def image_task(n: int, hw: int = 12, seed: int = 0):
    """Bright-top vs bright-bottom images as uint8 (N, 1, hw, hw)."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    img = rng.integers(0, 96, size=(n, 1, hw, hw))
    half = hw // 2
    for k in range(n):
        rows = slice(0, half) if labels[k] == 0 else slice(half, hw)
        img[k, 0, rows] += 120
    return img.astype(np.uint8), labels.astype(np.int64)


def main(argv=None):
    ap = argparse.ArgumentParser(description="write toy datasets and INT8 checkpoints")
    ap.add_argument("out", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)

    x, y = separable_task(1200, seed=args.seed)
    np.savetxt(args.out / "separable.csv", np.column_stack([y, x]), delimiter=",", fmt="%.6f")
    model = ptq_calibrate(mlp([16, 32, 16, 2], seed=args.seed), x[:200])
    partition_blocks(model, 3)
    checkpoint_save(model, args.out / "mlp.qzot")

    pixels, labels = image_task(600, seed=args.seed)
    save_qds(args.out / "images.qds", pixels, labels)
    cnn = ptq_calibrate(conv_net(seed=args.seed), pixels[:100] / 255.0)
    partition_blocks(cnn, 4)
    checkpoint_save(cnn, args.out / "cnn.qzot")
    print(f"wrote toy data and checkpoints to {args.out}")


if __name__ == "__main__":
    main()
