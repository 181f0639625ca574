"""Figures rendered from experiment CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402


def _cf_column(summary: pd.DataFrame):
    if "cf_true:mean" in summary and summary["cf_true:mean"].notna().all():
        return "cf_true"
    return "cf_gen"


def plot_tradeoff(summary: pd.DataFrame, path):
    """Accuracy and CF against lambda, with one-std error bars."""
    s = summary.sort_values("lambda")
    cf = _cf_column(s)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.errorbar(s["lambda"], s["accuracy:mean"], yerr=s["accuracy:std"].fillna(0), marker="o", capsize=3)
    ax1.set_xlabel(r"$\lambda$")
    ax1.set_ylabel("ACC")
    ax2.errorbar(s["lambda"], s[f"{cf}:mean"], yerr=s[f"{cf}:std"].fillna(0), marker="o", capsize=3, color="C1")
    ax2.set_xlabel(r"$\lambda$")
    ax2.set_ylabel(f"CF ({cf.split('_')[1]})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_utility(summary: pd.DataFrame, path):
    """Mean utility against gamma, one line per lambda."""
    cols = sorted(
        (c for c in summary.columns if c.startswith("utility:") and c.endswith(":mean") and c != "utility:mean:mean"),
        key=lambda c: float(c.split(":")[1]),
    )
    gammas = [float(c.split(":")[1]) for c in cols]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for _, row in summary.sort_values("lambda").iterrows():
        ax.plot(gammas, [row[c] for c in cols], marker="o", label=rf"$\lambda$={row['lambda']:g}")
    ax.set_xlabel(r"$\gamma$")
    ax.set_ylabel(r"$U_\gamma$")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_density(tables: dict, path):
    """Per-group prediction histograms, one panel per label in ``tables``."""
    fig, axes = plt.subplots(1, len(tables), figsize=(3.2 * len(tables), 2.8), squeeze=False, sharey=True)
    for ax, (label, t) in zip(axes[0], tables.items()):
        for g, part in t.groupby("group"):
            ax.stairs(part["density"].to_numpy(), np.append(part["bin_lo"].to_numpy(), part["bin_hi"].iloc[-1]),
                      label=str(g), fill=True, alpha=0.45)
        ax.set_title(label, fontsize=9)
        ax.set_xlabel(r"$\hat{p}$")
    axes[0][0].set_ylabel("density")
    axes[0][-1].legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
