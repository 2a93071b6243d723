"""Report figures (written to files, never shown)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402


def _moving(x, w):
    x = np.asarray(x, dtype=np.float64)
    if x.size < w:
        return x
    return np.convolve(x, np.ones(w) / w, mode="valid")


def loss_curves(history, path, window: int = 32):
    fig, axes = plt.subplots(1, 4, figsize=(14, 3))
    for ax, key in zip(axes, ("total", "coarse", "fine", "tv")):
        vals = [r[key] for r in history]
        ax.plot(vals, lw=0.5, alpha=0.4, color="tab:blue")
        if vals:
            m = _moving(vals, window)
            ax.plot(np.arange(m.size) + (len(vals) - m.size), m, color="tab:red", lw=1.2)
        ax.set_title(key)
        ax.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def metric_bars(report, path):
    methods = ["stylized"] + [m for m in ("per_frame_2d", "no_coarse") if f"{m}.ref_perceptual" in report.extra]
    names = ("ref_perceptual", "short_range", "long_range")
    fig, axes = plt.subplots(1, 3, figsize=(11, 3))
    for ax, name in zip(axes, names):
        vals = [getattr(report, name) if m == "stylized" else report.extra[f"{m}.{name}"] for m in methods]
        ax.bar(range(len(methods)), vals, color=["tab:red", "tab:gray", "tab:blue"][:len(methods)])
        ax.set_xticks(range(len(methods)), methods, fontsize=8)
        ax.set_title(name)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def frame_sheet(rows, path):
    """One row of frames per label."""
    rows = {k: v for k, v in rows.items() if v}
    n = max(len(v) for v in rows.values())
    fig, axes = plt.subplots(len(rows), n, figsize=(1.4 * n, 1.5 * len(rows)), squeeze=False)
    for r, (label, frames) in enumerate(rows.items()):
        for c in range(n):
            ax = axes[r][c]
            ax.axis("off")
            if c < len(frames):
                f = frames[c]
                ax.imshow(np.clip(f.numpy() if torch.is_tensor(f) else f, 0, 1), interpolation="nearest")
            if c == 0:
                ax.set_title(label, fontsize=8, loc="left")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
