"""Figure rendering for the CLI report paths.

Every plotting function writes a PNG next to the delimited output it
illustrates and returns the path. The Agg backend is forced so the CLI never
needs a display.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .model import Dataset


def plot_dataset(data: Dataset, path, truth=None) -> str:
    n_rows = 2 if data.input_dim else 1
    fig, axes = plt.subplots(n_rows, 1, figsize=(9, 2.8 * n_rows), sharex=True,
                             squeeze=False)
    t = np.arange(data.T) * data.dt
    ax = axes[0, 0]
    for j in range(data.out_dim):
        ax.plot(t, data.y[:, j], lw=0.7, label=f"y{j + 1}")
    if truth is not None:
        for j in range(truth.shape[1]):
            ax.plot(t, truth[:, j], lw=0.9, alpha=0.7, ls="--",
                    label=f"component {j + 1}")
    ax.set_ylabel("output")
    ax.legend(loc="upper right", fontsize=8)
    if data.input_dim:
        ax = axes[1, 0]
        for j in range(data.input_dim):
            ax.plot(t, data.u[:, j], lw=0.7, label=f"u{j + 1}")
        ax.set_ylabel("input")
        ax.legend(loc="upper right", fontsize=8)
    axes[-1, 0].set_xlabel("time")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return str(path)


def plot_training(records, path) -> str:
    fig, ax = plt.subplots(figsize=(8, 3.2))
    vals = np.array([r.elbo for r in records], dtype=float)
    comps = np.array([r.component for r in records])
    steps = np.arange(len(records))
    for l in sorted(set(comps.tolist())):
        mask = comps == l
        ax.plot(steps[mask], vals[mask], lw=0.8, label=f"component {l}")
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("ELBO estimate")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return str(path)


def plot_prediction(t, y, mean, var, path) -> str:
    d_y = y.shape[1]
    fig, axes = plt.subplots(d_y, 1, figsize=(9, 2.8 * d_y), sharex=True,
                             squeeze=False)
    for j in range(d_y):
        ax = axes[j, 0]
        sd = np.sqrt(var[:, j])
        ax.fill_between(t, mean[:, j] - 2 * sd, mean[:, j] + 2 * sd,
                        alpha=0.25, lw=0, label="+/- 2 sd")
        ax.plot(t, y[:, j], lw=0.7, color="k", label="observed")
        ax.plot(t, mean[:, j], lw=0.9, label="predicted mean")
        ax.set_ylabel(f"y{j + 1}")
        ax.legend(loc="upper right", fontsize=8)
    axes[-1, 0].set_xlabel("time")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return str(path)


def plot_grid(rows, path) -> str:
    """rows: list of dicts with keys R, rmse, nll."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    rs = [r["R"] for r in rows]
    for ax, key in zip(axes, ("rmse", "nll")):
        ax.plot(rs, [r[key] for r in rows], marker="o")
        ax.set_xlabel("resolution R")
        ax.set_ylabel(key)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return str(path)
