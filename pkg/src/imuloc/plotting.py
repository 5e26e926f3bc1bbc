"""Report figures: training curve and per-N classification rates."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 3.6),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    # fixed metadata keeps repeated renders byte-identical
    "svg.hashsalt": "imuloc",
}


def plot_loss(train_report, path):
    """Mean triplet loss per epoch, with the validation rate on a twin axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = np.arange(1, len(train_report.loss_curve) + 1)
        ax.plot(epochs, train_report.loss_curve, "o-", color="C0", label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean triplet loss")
        if train_report.val_curve:
            ax2 = ax.twinx()
            ax2.plot(epochs[: len(train_report.val_curve)], train_report.val_curve, "s--",
                     color="C1", label="val rate")
            ax2.set_ylabel("validation rate")
            ax2.set_ylim(0, 1)
            if train_report.best_epoch >= 0:
                ax.axvline(train_report.best_epoch + 1, color="0.7", lw=0.8)
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return Path(path)


def plot_rates(table, path):
    """Grouped bars of classification rate per method and N."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(6.4, 1.2 * len(table.n_values) + 4), 3.6))
        n_m = len(table.methods)
        width = 0.8 / max(n_m, 1)
        x = np.arange(len(table.n_values))
        for i, m in enumerate(table.methods):
            rates = [table.rate(m, n) for n in table.n_values]
            vals = [r if r is not None else 0.0 for r in rates]
            ax.bar(x + (i - (n_m - 1) / 2) * width, vals, width, label=m)
        ax.set_xticks(x)
        ax.set_xticklabels([f"N={n}" for n in table.n_values])
        ax.set_ylabel("classification rate")
        ax.set_ylim(0, 1)
        if table.title:
            ax.set_title(table.title)
        ax.legend(fontsize=7, loc="center left", bbox_to_anchor=(1.0, 0.5), frameon=False)
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return Path(path)


def save_figures(table, train_report, out_dir, stem="results"):
    out = Path(out_dir)
    arts = {"rates_figure": plot_rates(table, out / f"{stem}.png")}
    if train_report is not None and train_report.loss_curve:
        arts["loss_figure"] = plot_loss(train_report, out / "loss.png")
    return arts
