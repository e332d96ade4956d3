"""Figure rendering for the report path: kernel heatmaps and the
critical-difference diagram. Uses the non-interactive Agg backend so the
CLI can run headless; the CSV outputs remain the canonical data."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_kernel_heatmap(matrix, path, title=None, extractor_names=None) -> None:
    """Render an (extractors, snapshots) weight matrix as a heatmap PNG."""
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    k, j = m.shape
    fig, ax = plt.subplots(figsize=(max(4.0, 0.22 * j + 1.5), max(2.5, 0.3 * k + 1.0)))
    im = ax.imshow(m, aspect="auto", cmap="viridis", interpolation="nearest")
    ax.set_xlabel("snapshot")
    ax.set_ylabel("extractor")
    ax.set_yticks(range(k))
    if extractor_names is not None:
        ax.set_yticklabels([str(n) for n in extractor_names])
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, label="weight")
    fig.tight_layout()
    fig.savefig(path, dpi=150, metadata={"Software": None})
    plt.close(fig)


def save_cd_diagram(labels, mean_ranks, cd, path, title=None) -> None:
    """Render a critical-difference diagram PNG.

    Methods sit on a rank axis (best rank left); groups of methods whose
    mean ranks lie within the critical distance are joined by a thick bar.
    """
    labels = list(labels)
    ranks = np.asarray(mean_ranks, dtype=np.float64)
    k = len(labels)
    order = np.argsort(ranks, kind="stable")

    lo = 1.0
    hi = float(k)
    fig, ax = plt.subplots(figsize=(7.0, 1.6 + 0.45 * k))
    ax.set_xlim(lo - 0.1, hi + 0.1)
    ax.set_ylim(-k * 0.6 - 1.8, 1.6)
    ax.axis("off")

    ax.plot([lo, hi], [0, 0], color="black", lw=1.2)
    for tick in range(int(lo), int(hi) + 1):
        ax.plot([tick, tick], [0, 0.12], color="black", lw=1.0)
        ax.text(tick, 0.22, str(tick), ha="center", va="bottom", fontsize=9)

    # CD ruler above the axis.
    ax.plot([lo, lo + cd], [0.9, 0.9], color="black", lw=2.0)
    ax.plot([lo, lo], [0.84, 0.96], color="black", lw=2.0)
    ax.plot([lo + cd, lo + cd], [0.84, 0.96], color="black", lw=2.0)
    ax.text(lo + cd / 2, 1.02, f"CD = {cd:.4f}", ha="center", va="bottom", fontsize=9)

    # Method stems, alternating sides to keep labels readable.
    for row, idx in enumerate(order):
        r = ranks[idx]
        y = -0.55 * (row + 1)
        side = lo - 0.05 if row % 2 == 0 else hi + 0.05
        align = "right" if row % 2 == 0 else "left"
        ax.plot([r, r], [0, y], color="black", lw=0.9)
        ax.plot([r, side], [y, y], color="black", lw=0.9)
        ax.text(
            side,
            y,
            f" {labels[idx]} ({r:.3f}) ",
            ha=align,
            va="center",
            fontsize=9,
        )

    # Clique bars: maximal groups within one critical distance.
    sorted_ranks = ranks[order]
    y = -0.18
    prev_end = -1
    for i in range(k):
        end = i
        while end + 1 < k and sorted_ranks[end + 1] - sorted_ranks[i] <= cd:
            end += 1
        if end > i and end > prev_end:
            ax.plot(
                [sorted_ranks[i] - 0.03, sorted_ranks[end] + 0.03],
                [y, y],
                color="0.3",
                lw=3.5,
                solid_capstyle="round",
            )
            y -= 0.14
            prev_end = end

    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150, metadata={"Software": None})
    plt.close(fig)


def save_accuracy_bars(summary, labels, path, title=None) -> None:
    """Bar chart of per-domain mean accuracy with CI whiskers."""
    domains = list(summary)
    k = len(labels)
    x = np.arange(len(domains), dtype=np.float64)
    width = 0.8 / max(k, 1)
    fig, ax = plt.subplots(figsize=(max(5.0, 1.1 * len(domains) + 2.0), 3.5))
    for m, label in enumerate(labels):
        means = [100 * summary[d][label]["mean"] for d in domains]
        halves = [
            100 * (summary[d][label]["ci95_halfwidth"] or 0.0) for d in domains
        ]
        ax.bar(x + (m - (k - 1) / 2) * width, means, width, yerr=halves, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(domains, rotation=20, ha="right")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150, metadata={"Software": None})
    plt.close(fig)
