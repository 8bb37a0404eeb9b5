"""PNG renderings of training curves and Wigner grids (matplotlib, headless)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_curve(curve, path, title: str = "") -> None:
    """Mean return per iteration with a ±1 std band."""
    c = np.asarray(curve, float)
    fig, ax = plt.subplots(figsize=(6, 3.6), dpi=110)
    if c.size:
        it, mu, sd = c[:, 0], c[:, 1], c[:, 2]
        ax.fill_between(it, mu - sd, mu + sd, alpha=0.25, lw=0)
        ax.plot(it, mu, lw=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean return")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_wigner(w, xvec, pvec, path, title: str = "") -> None:
    w = np.asarray(w, float)
    lim = max(float(np.max(np.abs(w))), 1e-12)
    fig, ax = plt.subplots(figsize=(4.6, 4), dpi=110)
    im = ax.pcolormesh(xvec, pvec, w, cmap="RdBu_r", vmin=-lim, vmax=lim, shading="auto")
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("x")
    ax.set_ylabel("p")
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
