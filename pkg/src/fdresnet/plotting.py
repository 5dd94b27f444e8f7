"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 110,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_convergence(runlogs: dict, path) -> Path:
    """Loss (left) and accuracy (right) per epoch, train solid / test dashed."""
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(8, 3.2))
        for i, (name, rl) in enumerate(runlogs.items()):
            c = f"C{i}"
            ep = rl.column("epoch")
            ax_l.plot(ep, rl.column("train_loss"), color=c, label=f"{name} train")
            ax_l.plot(ep, rl.column("test_loss"), color=c, ls="--", label=f"{name} test")
            ax_a.plot(ep, rl.column("train_acc"), color=c, label=f"{name} train")
            ax_a.plot(ep, rl.column("test_acc"), color=c, ls="--", label=f"{name} test")
        ax_l.set_xlabel("epoch")
        ax_l.set_ylabel("loss")
        ax_a.set_xlabel("epoch")
        ax_a.set_ylabel("accuracy")
        ax_a.legend(frameon=False)
        return _save(fig, path)


def plot_robustness(rows: list[dict], path) -> Path:
    """Grouped bars: accuracy per filtered test set, one colour per model."""
    models = list(dict.fromkeys(r["model"] for r in rows))
    sets = list(dict.fromkeys((r["filter"], r["kernel"]) for r in rows))
    acc = {(r["model"], r["filter"], r["kernel"]): r["accuracy"] for r in rows}
    labels = ["original" if f == "none" else f"{f} k{k}" for f, k in sets]
    width = 0.8 / max(len(models), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7, 3))
        x = np.arange(len(sets))
        for i, m in enumerate(models):
            ax.bar(x + i * width, [acc.get((m, f, k), np.nan) for f, k in sets], width, label=m)
        ax.set_xticks(x + width * (len(models) - 1) / 2, labels, rotation=30)
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_sweep(rows: list[dict], path) -> Path:
    ok = [r for r in rows if r.get("status", "ok") == "ok"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(ok) + 1), 3))
        x = np.arange(len(ok))
        ax.bar(x, [r["mean_acc"] for r in ok], yerr=[r["std_acc"] for r in ok], capsize=3)
        ax.set_xticks(x, [r["cell"] for r in ok], rotation=30)
        ax.set_ylabel("test accuracy")
        return _save(fig, path)


def plot_saliency_grid(images: list[np.ndarray], maps: list[np.ndarray], titles: list[str], path) -> Path:
    """Two rows: input images (top) and Grad-CAM overlays (bottom)."""
    n = len(images)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, n, figsize=(1.4 * n, 3), squeeze=False)
        for i, (img, m) in enumerate(zip(images, maps)):
            rgb = np.clip(img.transpose(1, 2, 0), 0, 1)
            if rgb.shape[2] == 1:
                rgb = rgb[..., 0]
            axes[0, i].imshow(rgb, cmap="gray" if rgb.ndim == 2 else None)
            axes[1, i].imshow(rgb, cmap="gray" if rgb.ndim == 2 else None)
            axes[1, i].imshow(m, cmap="jet", alpha=0.5, vmin=0, vmax=1)
            axes[0, i].set_title(titles[i], fontsize=7)
            for ax in axes[:, i]:
                ax.axis("off")
        return _save(fig, path)


def plot_kernels(kernels: dict, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.6))
        for name, w in kernels.items():
            c = (len(w) - 1) // 2
            ax.plot(np.arange(len(w)) - c, w, marker="o", label=name)
        ax.set_xlabel("offset")
        ax.set_ylabel("weight")
        ax.legend(frameon=False)
        return _save(fig, path)
