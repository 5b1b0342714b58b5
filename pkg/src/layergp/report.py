"""Matplotlib rendering of reliability diagrams and residual-fit plots.

Figures are written next to the delimited tables the CLI emits; the tables
hold the same numbers, so plots are a convenience view, not the record.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import ReliabilityDiagram, ece, mce

_ACC_COLOR = "#3465a4"
_GAP_COLOR = "#cc0000"


def _draw_reliability(ax, diagram: ReliabilityDiagram, title: str | None = None):
    lo = np.array([b.lo for b in diagram.bins])
    hi = np.array([b.hi for b in diagram.bins])
    width = hi - lo
    acc = np.array([b.accuracy for b in diagram.bins])
    conf = np.array([b.mean_confidence for b in diagram.bins])
    filled = np.array([b.count > 0 for b in diagram.bins])

    ax.bar(lo, np.where(filled, acc, 0.0), width=width, align="edge",
           color=_ACC_COLOR, edgecolor="white", linewidth=0.5, label="accuracy")
    gap_base = np.minimum(acc, conf)
    gap = np.abs(conf - acc)
    ax.bar(lo[filled], gap[filled], bottom=gap_base[filled], width=width[filled],
           align="edge", color=_GAP_COLOR, alpha=0.35, hatch="//",
           edgecolor=_GAP_COLOR, linewidth=0.0, label="gap")
    ax.plot([0, 1], [0, 1], ls="--", lw=1.0, color="gray")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    ax.text(0.04, 0.92, f"ECE={ece(diagram):.4f}\nMCE={mce(diagram):.4f}",
            transform=ax.transAxes, fontsize=8, va="top",
            bbox=dict(boxstyle="round", fc="white", ec="0.7", alpha=0.8))
    if title:
        ax.set_title(title, fontsize=10)


def save_reliability_figure(diagram: ReliabilityDiagram, path: str | Path,
                            title: str | None = None) -> None:
    """Two panels: per-bin sample share on top, accuracy vs confidence below."""
    fig, (ax_top, ax_main) = plt.subplots(
        2, 1, figsize=(4.2, 5.2), height_ratios=[1, 3], sharex=True
    )
    lo = np.array([b.lo for b in diagram.bins])
    hi = np.array([b.hi for b in diagram.bins])
    counts = np.array([b.count for b in diagram.bins], dtype=float)
    share = counts / counts.sum() if counts.sum() else counts
    ax_top.bar(lo, share, width=hi - lo, align="edge", color="0.6", edgecolor="white")
    ax_top.axvline(diagram.overall_accuracy, ls=":", color=_ACC_COLOR, label="accuracy")
    ax_top.axvline(diagram.overall_confidence, ls=":", color=_GAP_COLOR, label="confidence")
    ax_top.set_ylabel("share")
    ax_top.legend(fontsize=7, loc="upper left")
    if title:
        ax_top.set_title(title, fontsize=10)

    _draw_reliability(ax_main, diagram)
    ax_main.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_residual_fit_figure(
    residual: np.ndarray,
    predicted_mean: np.ndarray,
    predicted_sd: np.ndarray,
    path: str | Path,
    title: str | None = None,
    sort_by: np.ndarray | None = None,
) -> None:
    """True residuals with the posterior mean and a +/- 2 sigma band.

    Samples are ordered by `sort_by` (raw confidence by default unsupplied ->
    predicted mean) so the band reads as a function.
    """
    order = np.argsort(sort_by if sort_by is not None else predicted_mean, kind="stable")
    x = np.arange(len(order))
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.scatter(x, residual[order], s=6, color="0.3", alpha=0.5, label="true residual")
    ax.plot(x, predicted_mean[order], color=_ACC_COLOR, lw=1.2, label="posterior mean")
    lo = predicted_mean[order] - 2.0 * predicted_sd[order]
    hi = predicted_mean[order] + 2.0 * predicted_sd[order]
    ax.fill_between(x, lo, hi, color=_ACC_COLOR, alpha=0.2, label=r"$\pm 2\sigma$")
    ax.axhline(0.0, color="gray", lw=0.8, ls="--")
    ax.set_xlabel("test sample (sorted)")
    ax.set_ylabel("softmax residual")
    if title:
        ax.set_title(title, fontsize=10)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_comparison_figure(
    diagrams: dict[str, ReliabilityDiagram], path: str | Path
) -> None:
    """Grid of reliability diagrams, one panel per method row."""
    n = len(diagrams)
    cols = min(4, max(1, n))
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 3.0 * rows), squeeze=False)
    flat = axes.ravel()
    for ax, (name, diagram) in zip(flat, diagrams.items()):
        _draw_reliability(ax, diagram, title=name)
    for ax in flat[n:]:
        ax.set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
