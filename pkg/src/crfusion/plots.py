"""Figure rendering for the report paths.

Every command that writes a delimited report also renders a matplotlib
figure next to it. Headless backend; fixed dpi so outputs are stable.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 120


def save_loss_curve(path, history):
    steps = [row["step"] for row in history]
    losses = [row["loss"] for row in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_title("set loss over training")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def save_pr_curves(path, pr_data):
    """pr_data: {label: (recall array, precision array)}."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for label, (recall, precision) in pr_data.items():
        ax.plot(recall, precision, lw=1.2, label=label)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title("precision-recall by class and match threshold")
    ax.legend(fontsize=7, ncol=2)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def save_range_breakdown(path, buckets_report):
    """Bar chart of mAP / ATE / AVE per ego-distance bucket."""
    labels = [f"{lo:g}-{hi:g} m" for (lo, hi) in buckets_report]
    maps = [rep.mean_ap for rep in buckets_report.values()]
    ates = [rep.ate if rep.ate is not None else 0.0
            for rep in buckets_report.values()]
    aves = [rep.ave if rep.ave is not None else 0.0
            for rep in buckets_report.values()]
    x = np.arange(len(labels))
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.2))
    for ax, values, name in zip(axes, (maps, ates, aves),
                                ("mAP", "ATE (m)", "AVE (m/s)")):
        ax.bar(x, values, width=0.6)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, fontsize=7)
        ax.set_title(name)
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def save_ablation_chart(path, rows):
    """rows: list of dicts with variant, map, ate, ave."""
    labels = [r["variant"] for r in rows]
    x = np.arange(len(labels))
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.4))
    for ax, key, name in zip(
        axes, ("map", "ate", "ave"), ("mAP", "ATE (m)", "AVE (m/s)")
    ):
        vals = [r[key] if r[key] is not None else 0.0 for r in rows]
        ax.bar(x, vals, width=0.6)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, fontsize=7, rotation=30, ha="right")
        ax.set_title(name)
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def save_gradcheck_chart(path, rows):
    """rows: (name, max relative error) pairs; log-scale bars with the gate."""
    labels = [name for name, _ in rows]
    errors = [max(err, 1e-16) for _, err in rows]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(8, 3.6))
    ax.bar(x, errors, width=0.6)
    ax.axhline(1e-5, color="tab:red", lw=1.0, ls="--", label="gate 1e-5")
    ax.set_yscale("log")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=7, rotation=30, ha="right")
    ax.set_ylabel("max relative error")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
