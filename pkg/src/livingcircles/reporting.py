"""Rendering of report figures and their delimited plot data.

Every report path emits the underlying numbers as CSV/JSON next to the
rendered PNG, so downstream tooling never has to scrape a figure.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .data_model import DISEASES  # noqa: E402


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def fig_loss_curves(curves: dict, path):
    """One line per named loss curve."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, values in curves.items():
        if values:
            ax.plot(range(1, len(values) + 1), values, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_eval_metrics(report_dict: dict, path):
    """Grouped bars of the mean MAE/RMSE/R2 per disease."""
    diseases = [d for d in DISEASES if d in report_dict["per_disease"]]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    for ax, key in zip(axes, ("mae", "rmse", "r2")):
        vals = [report_dict["per_disease"][d]["mean"][key] for d in diseases]
        ax.bar(range(len(diseases)), vals, color="tab:blue")
        ax.set_xticks(range(len(diseases)))
        ax.set_xticklabels(diseases, rotation=30, ha="right")
        ax.set_title(key.upper() if key != "r2" else "R^2")
    fig.suptitle(f"ablation: {report_dict.get('ablation', 'full')}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_elbow(pairs, path):
    ks = [k for k, _ in pairs]
    inertias = [v for _, v in pairs]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ks, inertias, marker="o")
    ax.set_xlabel("k")
    ax.set_ylabel("inertia")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_scatter(points, color, path, xlabel="component 1", ylabel="component 2"):
    fig, ax = plt.subplots(figsize=(6, 5))
    if color is None:
        ax.scatter(points[:, 0], points[:, 1], s=18)
    else:
        sc = ax.scatter(points[:, 0], points[:, 1], c=color, cmap="viridis", s=18)
        fig.colorbar(sc, ax=ax)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
