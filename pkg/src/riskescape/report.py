"""Figures for the command-line reports (PNG files, rendered off-screen)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["figure_style", "plot_exit_times", "plot_oracle", "plot_variational", "plot_game_table",
           "plot_chain", "plot_sweep"]

_STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
}


def figure_style():
    return matplotlib.rc_context(_STYLE)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no software stamp, so repeated renders are byte-stable
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_exit_times(tau, censored, t_max, path, title=""):
    with figure_style():
        fig, ax = plt.subplots()
        done = np.asarray(tau)[~np.asarray(censored)]
        if len(done):
            ax.hist(done, bins=min(60, max(10, len(done) // 50)), color="0.35")
        ax.axvline(t_max, color="C3", ls="--", lw=0.8, label=f"t_max, {np.mean(censored):.1%} censored")
        ax.set_xlabel("exit time")
        ax.set_ylabel("paths")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_oracle(x, u, x0, path):
    with figure_style():
        fig, ax = plt.subplots()
        ax.plot(x, u, color="k")
        ax.axvline(x0, color="0.6", lw=0.8)
        ax.set_xlabel("x")
        ax.set_ylabel(r"$E_x\,\exp(-\theta\tau/\varepsilon)$")
        return _save(fig, path)


def plot_variational(rows, path):
    ks = [r["K"] for r in rows]
    with figure_style():
        fig, ax = plt.subplots()
        ax.errorbar(ks, [r["rhs"] for r in rows], yerr=[3 * r["rhs_se"] for r in rows],
                    marker="o", color="k", capsize=3, label="restricted minimum")
        ax.axhline(rows[0]["lhs"], color="C0", label="risk-sensitive value")
        ax.axhspan(rows[0]["lhs"] - 3 * rows[0]["lhs_se"], rows[0]["lhs"] + 3 * rows[0]["lhs_se"],
                   color="C0", alpha=0.15, lw=0)
        ax.set_xscale("log", base=2)
        ax.set_xticks(ks, [str(k) for k in ks])
        ax.set_xlabel("pieces K")
        ax.set_ylabel("cost")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_game_table(table, path):
    with figure_style():
        fig, ax = plt.subplots()
        im = ax.imshow(np.asarray(table), aspect="auto", origin="lower", cmap="viridis")
        fig.colorbar(im, ax=ax, label="cost")
        ax.set_xlabel("disturbance candidate")
        ax.set_ylabel("control candidate")
        return _save(fig, path)


def plot_chain(rows, path):
    with figure_style():
        fig, ax = plt.subplots()
        ax.plot([r["stage"] for r in rows], [r["bound"] for r in rows], "o-", color="k")
        ax.set_xticks([r["stage"] for r in rows])
        ax.set_xlabel("stage")
        ax.set_ylabel("exit-time lower bound")
        return _save(fig, path)


def plot_sweep(rows, path):
    eps = [r["epsilon"] for r in rows]
    with figure_style():
        fig, ax = plt.subplots()
        ax.axhspan(rows[0]["upper"], rows[0]["lower"], color="0.85", lw=0, label="game band")
        ax.errorbar(eps, [r["value"] for r in rows], yerr=[3 * r["se"] for r in rows],
                    marker="o", color="k", capsize=3, label="estimate")
        ax.set_xscale("log")
        ax.invert_xaxis()
        ax.set_xlabel(r"$\varepsilon$")
        ax.set_ylabel("value")
        ax.legend(frameon=False)
        return _save(fig, path)
