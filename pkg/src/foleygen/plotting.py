"""Static figures: mel comparisons and training curves, written to files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_mels(path, panels, title=None, hop_seconds=None):
    """Stack ``(label, mel)`` panels vertically, mel bins on the y axis."""
    fig, axes = plt.subplots(len(panels), 1, figsize=(8, 2.2 * len(panels)), squeeze=False)
    vmin = min(float(np.min(m)) for _, m in panels)
    vmax = max(float(np.max(m)) for _, m in panels)
    for ax, (label, mel) in zip(axes[:, 0], panels):
        extent = None
        if hop_seconds:
            extent = (0, mel.shape[0] * hop_seconds, 0, mel.shape[1])
        im = ax.imshow(np.asarray(mel).T, origin="lower", aspect="auto", vmin=vmin, vmax=vmax,
                       cmap="magma", extent=extent, interpolation="nearest")
        ax.set_ylabel("mel bin")
        ax.set_title(label, fontsize=9, loc="left")
    axes[-1, 0].set_xlabel("time (s)" if hop_seconds else "frame")
    fig.colorbar(im, ax=axes[:, 0].tolist(), shrink=0.8, label="log magnitude")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_loss_curves(path, rows):
    keys = ("l_mel", "l_adv", "l_dt", "l_dm")
    steps = [r["step"] for r in rows]
    fig, axes = plt.subplots(1, len(keys), figsize=(12, 2.6))
    for ax, key in zip(axes, keys):
        ax.plot(steps, [r[key] for r in rows], lw=0.8)
        ax.set_title(key, fontsize=9)
        ax.set_xlabel("step")
    axes[0].set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
