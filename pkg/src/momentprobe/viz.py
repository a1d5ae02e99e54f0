"""Figure rendering for run reports and ablation tables.

Figures are written next to the delimited output files; the CLI calls
these by default and `--no-figures` turns them off.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_training_curves(report, path) -> Path:
    """Train loss and validation accuracy against epoch, twin axes."""
    epochs = [row[0] for row in report.epochs]
    losses = [row[1] for row in report.epochs]
    accs = [row[2] for row in report.epochs]

    fig, ax_loss = plt.subplots(figsize=(6.0, 3.6))
    ax_loss.plot(epochs, losses, color="tab:red", label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss", color="tab:red")
    ax_loss.tick_params(axis="y", labelcolor="tab:red")

    ax_acc = ax_loss.twinx()
    ax_acc.plot(epochs, accs, color="tab:blue", label="val accuracy")
    ax_acc.set_ylabel("val accuracy", color="tab:blue")
    ax_acc.set_ylim(0.0, 1.05)
    ax_acc.tick_params(axis="y", labelcolor="tab:blue")

    head = report.config.get("head", "?")
    ax_loss.set_title(f"{head}: final val acc {report.final_val_accuracy:.3f}")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ablation(table, path) -> Path:
    """Accuracy bars with the parameter count annotated per row."""
    labels = [row.label for row in table.rows]
    accs = [row.accuracy for row in table.rows]
    params = [row.params for row in table.rows]

    fig, ax = plt.subplots(figsize=(max(5.0, 1.1 * len(labels)), 3.6))
    bars = ax.bar(labels, accs, color="tab:blue")
    for bar, count in zip(bars, params):
        ax.annotate(f"{count:,}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("val accuracy")
    ax.set_ylim(0.0, 1.1)
    ax.set_title(f"{table.suite} suite (bars: accuracy, labels: trainable params)")
    plt.setp(ax.get_xticklabels(), rotation=20, ha="right")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
