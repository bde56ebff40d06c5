"""Report figures rendered to files with the Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_convergence(log, path):
    epochs = [r["epoch"] for r in log.records]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("objective", "volume", "boundary", "displacement", "total"):
        vals = np.array([r[key] for r in log.records])
        if np.any(vals):
            ax.plot(epochs, vals, label=key, lw=2 if key == "total" else 1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_hs_ratios(evaluation, path):
    """Thresholded bulk modulus against the HS upper bound per cell."""
    vf = np.array([e.vf_measured for e in evaluation])
    bulk = np.array([e.bulk for e in evaluation])
    hs = np.array([e.hs_bound for e in evaluation])
    fig, ax = plt.subplots(figsize=(5, 4))
    order = np.argsort(vf)
    ax.plot(vf[order], hs[order], "k-", label="HS upper bound")
    ax.scatter(vf, bulk, s=18, label="cells")
    ratio = np.nanmean([e.ratio for e in evaluation])
    ax.set_title(f"mean ratio {ratio:.3f}")
    ax.set_xlabel("volume fraction")
    ax.set_ylabel("bulk modulus")
    ax.legend(frameon=False)
    _save(fig, path)


def plot_density(image, path, title: str | None = None):
    img = np.asarray(image)
    fig, ax = plt.subplots(figsize=(6, 6 * img.shape[0] / img.shape[1]))
    ax.imshow(img, cmap="gray_r", vmin=0.0, vmax=1.0, interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    _save(fig, path)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
