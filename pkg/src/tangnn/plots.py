"""Figure rendering for the report paths; PNGs land next to the CSVs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_loss_curves(reports, path) -> None:
    """Training loss and validation metric over epochs."""
    epochs = [r.epoch for r in reports]
    fig, ax1 = plt.subplots(figsize=(7, 4.2))
    ax1.plot(epochs, [r.train_loss for r in reports], color="tab:red", lw=1.5,
             label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:red")
    ax1.tick_params(axis="y", labelcolor="tab:red")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [r.val_metric for r in reports], color="tab:blue", lw=1.5,
             label="validation metric")
    ax2.set_ylabel("validation metric", color="tab:blue")
    ax2.tick_params(axis="y", labelcolor="tab:blue")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep_curve(xs, series: dict, xlabel, path) -> None:
    """Metric-vs-parameter curves, one line per metric name."""
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for name, ys in series.items():
        ax.plot(xs, ys, marker="o", lw=1.5, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("metric value")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bench_curves(results, path) -> None:
    """Log-log wall time vs instance size for each benchmarked builder."""
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for result in results:
        label = "quadratic oracle" if result.quadratic else "rank-window index"
        if result.exponent is not None:
            label += f" (exp {result.exponent:.2f})"
        ax.plot(result.sizes, result.seconds, marker="o", lw=1.5, label=label)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("nodes")
    ax.set_ylabel("seconds per build")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
