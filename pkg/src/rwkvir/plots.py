"""Figure rendering for the CLI report paths.

Every subcommand that writes a CSV also renders a matplotlib figure next to
it: loss curves for training, per-image metric bars for evaluation, log-log
runtime curves for the kernel bench and heatmaps for receptive-field maps.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(rows, path) -> None:
    """rows: (iter, lr, l1, val_psnr or None)."""
    iters = [r[0] for r in rows]
    losses = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(iters, losses, lw=1.0, label="train L1")
    val = [(r[0], r[3]) for r in rows if r[3] is not None]
    if val:
        ax2 = ax.twinx()
        ax2.plot(*zip(*val), "o-", color="tab:orange", ms=3, lw=1.0, label="val PSNR")
        ax2.set_ylabel("val PSNR (dB)")
    ax.set_xlabel("iteration")
    ax.set_ylabel("L1 loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metric_bars(report, path) -> None:
    ids = [row[0] for row in report.per_image]
    vals = [row[1] for row in report.per_image]
    fig, ax = plt.subplots(figsize=(max(4, 0.3 * len(ids) + 2), 3.2))
    ax.bar(range(len(ids)), vals, color="tab:blue")
    agg = report.aggregate()
    ax.axhline(agg["psnr"][0], color="tab:red", lw=1.0, ls="--",
               label=f"mean {agg['psnr'][0]:.2f} dB")
    ax.set_xticks(range(len(ids)))
    ax.set_xticklabels(ids, rotation=90, fontsize=6)
    ax.set_ylabel("PSNR (dB)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bench_plot(rows, path) -> None:
    """rows: dicts with T, C, variant, mean_ns."""
    fig, ax = plt.subplots(figsize=(5, 3.4))
    variants = sorted({r["variant"] for r in rows})
    for variant in variants:
        pts = sorted((r["T"], r["mean_ns"]) for r in rows if r["variant"] == variant)
        ax.plot([p[0] for p in pts], [p[1] / 1e6 for p in pts], "o-", label=variant)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("tokens T")
    ax.set_ylabel("time (ms)")
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_erf_heatmap(values: np.ndarray, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    im = ax.imshow(values, cmap="inferno", vmin=0.0, vmax=1.0)
    ax.set_title(title, fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
