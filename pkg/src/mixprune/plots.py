"""Matplotlib figures rendered next to the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

PRECISION_COLORS = {0: "#b0b0b0", 2: "#d62728", 4: "#ff9f40", 8: "#2a76b0"}


def save_pareto_plot(points: list, front: list, path, cost_label: str = "cost") -> None:
    """Accuracy-vs-cost scatter with the Pareto front highlighted."""
    fig, ax = plt.subplots(figsize=(5.4, 3.8))
    ok = [p for p in points if not p.get("failed")]
    if ok:
        ax.scatter([p["cost"] for p in ok], [p["accuracy"] for p in ok],
                   s=28, color="#9ecae1", label="runs", zorder=2)
    if front:
        fs = sorted(front, key=lambda p: p["cost"])
        ax.plot([p["cost"] for p in fs], [p["accuracy"] for p in fs],
                "o-", color="#d62728", ms=6, lw=1.4, label="Pareto front", zorder=3)
        for p in fs:
            ax.annotate(f"$\\lambda$={p['lambda']:g}", (p["cost"], p["accuracy"]),
                        textcoords="offset points", xytext=(4, 4), fontsize=7)
    ax.set_xlabel(cost_label)
    ax.set_ylabel("validation accuracy")
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_precision_histogram(assignment, graph, path) -> None:
    """Per-layer stacked bars of the channel share at each weight precision."""
    layers = [l.name for l in graph.quantizable_layers()]
    all_bits = sorted({int(b) for name in layers for b in np.unique(assignment.weight_bits[name])})
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(layers) + 1.5), 3.4))
    bottom = np.zeros(len(layers))
    for p in all_bits:
        frac = np.array([np.mean(assignment.weight_bits[name] == p) for name in layers])
        label = "pruned" if p == 0 else f"{p}-bit"
        ax.bar(layers, frac, bottom=bottom, label=label,
               color=PRECISION_COLORS.get(p, None), edgecolor="white", linewidth=0.5)
        bottom += frac
    ax.set_ylabel("share of channels")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8, ncol=min(4, len(all_bits)))
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_history_plot(history: list, path) -> None:
    """Loss and validation accuracy across the training phases."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(5.4, 4.6), sharex=True)
    xs = range(len(history))
    ax1.plot(xs, [h["total_loss"] for h in history], lw=1.2, label="total loss")
    ax1.plot(xs, [h["task_loss"] for h in history], lw=1.0, ls="--", label="task loss")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax1.grid(alpha=0.3)
    ax2.plot(xs, [h["val_accuracy"] for h in history], lw=1.2, color="#2a76b0")
    for i in range(1, len(history)):
        if history[i]["phase"] != history[i - 1]["phase"]:
            for ax in (ax1, ax2):
                ax.axvline(i - 0.5, color="gray", lw=0.8, ls=":")
    ax2.set_ylabel("val accuracy")
    ax2.set_xlabel("epoch (all phases)")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
