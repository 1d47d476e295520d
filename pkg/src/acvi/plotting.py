"""Figures written next to the text reports (non-interactive Agg backend)."""

from __future__ import annotations

from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _moving_average(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(values) < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def plot_loss_curve(trace: Sequence[float], path: str, modes: Sequence[str] = (),
                    evals: Sequence = (), title: str = "training loss") -> str:
    """Per-step loss with a smoothed overlay; shades the Gumbel phase if ``modes`` has one."""
    trace = np.asarray(trace, dtype=float)
    steps = np.arange(1, len(trace) + 1)
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(steps, trace, color="0.75", lw=0.6, label="per step")
    window = max(1, len(trace) // 50)
    smooth = _moving_average(trace, window)
    if len(smooth) != len(trace):
        ax.plot(steps[window - 1:], smooth, color="C0", lw=1.4, label=f"mean of {window}")
    if "gumbel" in modes:
        start = list(modes).index("gumbel") + 1
        ax.axvspan(start, len(trace), color="C1", alpha=0.12, label="Gumbel-Softmax context")
    ax.set_xlabel("step")
    ax.set_ylabel("loss per token")
    ax.set_title(title)
    if len(evals):
        ax2 = ax.twinx()
        es, ev = zip(*evals)
        ax2.plot(es, ev, "o-", color="C2", ms=3, lw=1, label="held-out accuracy")
        ax2.set_ylabel("held-out accuracy")
        ax2.set_ylim(0, 1.02)
    ax.legend(loc="upper right", fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_attention(attention: np.ndarray, source: Sequence[str], output: Sequence[str], path: str,
                   title: str = "attention") -> str:
    """Heatmap of attention weights, rows = output steps, columns = source positions."""
    attention = np.asarray(attention, dtype=float)
    rows, cols = attention.shape
    fig, ax = plt.subplots(figsize=(max(3.0, 0.4 * cols + 1.5), max(2.5, 0.35 * rows + 1.2)))
    im = ax.imshow(attention, cmap="viridis", vmin=0.0, vmax=1.0, aspect="auto")
    ax.set_xticks(range(cols))
    ax.set_xticklabels(list(source)[:cols] + [""] * max(0, cols - len(source)), rotation=90, fontsize=7)
    ax.set_yticks(range(rows))
    ax.set_yticklabels(list(output)[:rows] + [""] * max(0, rows - len(output)), fontsize=7)
    ax.set_xlabel("source")
    ax.set_ylabel("output")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_scores(metrics: Mapping[str, float], path: str, title: Optional[str] = None) -> str:
    """Bar chart of ROUGE precision / recall / F1."""
    kinds = ("rouge1", "rouge2", "rougeL")
    parts = ("p", "r", "f")
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    x = np.arange(len(kinds))
    for k, part in enumerate(parts):
        vals = [metrics.get(f"{kind}_{part}", 0.0) for kind in kinds]
        ax.bar(x + (k - 1) * 0.26, vals, width=0.26, label={"p": "precision", "r": "recall", "f": "F1"}[part])
    ax.set_xticks(x)
    ax.set_xticklabels(["ROUGE-1", "ROUGE-2", "ROUGE-L"])
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8, frameon=False, ncol=3, loc="upper center")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
