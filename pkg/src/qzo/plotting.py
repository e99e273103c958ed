"""PNG figures written next to the CSV reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_loss(rows, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([r.iteration for r in rows], [r.loss for r in rows], lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean cross-entropy")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_grad_check(qualities, path) -> None:
    names = ["model WP", "model NP", "layer WP", "layer NP", "adaptive"]
    fields = ["model_wp", "model_np", "layer_wp", "layer_np", "adaptive"]
    x = np.arange(len(qualities))
    width = 0.8 / len(names)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for k, (name, f) in enumerate(zip(names, fields)):
        ax.bar(x + k * width, [getattr(q, f) for q in qualities], width, label=name)
    ax.set_xticks(x + 0.4 - width / 2, [f"layer {q.layer}" for q in qualities])
    ax.set_ylabel("cosine similarity vs backprop")
    ax.axhline(0, color="k", lw=0.5)
    ax.legend(fontsize=7, ncol=3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_profile(reports, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar([r.method for r in reports], [r.bytes for r in reports])
    ax.set_yscale("log")
    ax.set_ylabel("peak memory (bytes)")
    ax.tick_params(axis="x", labelrotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
