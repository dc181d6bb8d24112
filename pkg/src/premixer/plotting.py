"""Figures written next to the CSV outputs of each run."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def new(nrows=1, ncols=1, width=6.0, height=3.2):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(nrows, ncols, figsize=(width, height))
    return fig, ax


def save(fig, path):
    with plt.rc_context(RC):
        fig.tight_layout()
        fig.savefig(path)
    plt.close(fig)


def plot_pretrain_losses(rows, path):
    """rows: (epoch, recon, cl, total)."""
    arr = np.asarray(rows, dtype=float)
    fig, (a, b) = new(1, 2, width=8.0)
    a.plot(arr[:, 0], arr[:, 1], marker="o", ms=3)
    a.set_yscale("log")
    a.set_xlabel("epoch")
    a.set_ylabel("reconstruction (sum)")
    b.plot(arr[:, 0], arr[:, 2], marker="o", ms=3, color="C1")
    b.set_xlabel("epoch")
    b.set_ylabel("contrastive")
    save(fig, path)


def plot_training_curves(rows, path):
    """rows: (epoch, train_loss, val_mae, val_rmse, val_mape)."""
    arr = np.asarray(rows, dtype=float)
    fig, (a, b) = new(1, 2, width=8.0)
    a.plot(arr[:, 0], arr[:, 1], marker="o", ms=3)
    a.set_xlabel("epoch")
    a.set_ylabel("train MAE (normalized)")
    b.plot(arr[:, 0], arr[:, 2], marker="o", ms=3, label="MAE")
    b.plot(arr[:, 0], arr[:, 3], marker="s", ms=3, label="RMSE")
    b.set_xlabel("epoch")
    b.set_ylabel("validation error")
    b.legend(frameon=False)
    save(fig, path)


def plot_horizon_report(report, path):
    labels = list(report.rows)
    x = np.arange(len(labels))
    fig, ax = new(width=5.0)
    w = 0.38
    ax.bar(x - w / 2, [report.rows[k].mae for k in labels], w, label="MAE")
    ax.bar(x + w / 2, [report.rows[k].rmse for k in labels], w, label="RMSE")
    ax.set_xticks(x)
    ax.set_xticklabels([f"H{k}" if k.isdigit() else k for k in labels])
    ax2 = ax.twinx()
    ax2.plot(x, [report.rows[k].mape for k in labels], "k^--", ms=4, label="MAPE %")
    ax2.set_ylabel("MAPE (%)")
    ax.set_ylabel("error")
    ax.legend(frameon=False, loc="upper left")
    save(fig, path)
