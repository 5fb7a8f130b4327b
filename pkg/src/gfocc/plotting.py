"""Report figures written next to the JSON outputs (headless matplotlib)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from .core import CLASS_NAMES  # noqa: E402


def _label_cmap(num_classes: int) -> ListedColormap:
    base = plt.get_cmap("tab20")(np.linspace(0, 1, 20))
    colors = np.vstack([[1.0, 1.0, 1.0, 1.0], base[: num_classes - 1]])
    return ListedColormap(colors)


def top_view(labels: np.ndarray) -> np.ndarray:
    """Label of the highest occupied voxel per (x, y) column, 0 if none; shape (ny, nx)."""
    occ = labels != 0
    nz = labels.shape[2]
    top = nz - 1 - np.argmax(occ[:, :, ::-1], axis=2)
    view = np.take_along_axis(labels, top[..., None], axis=2)[..., 0]
    return np.where(occ.any(axis=2), view, 0).T


def smooth(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, len(v)))
    return np.convolve(v, np.ones(window) / window, mode="valid")


def plot_loss(records, path, window: int = 50, title: str = "training loss") -> None:
    """Raw and moving-average loss per step from JSON-lines style records."""
    steps = np.array([r["step"] for r in records])
    key = "total" if records and "total" in records[0] else "loss"
    loss = np.array([r[key] for r in records])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, loss, lw=0.8, alpha=0.5, label="per step")
    if len(loss) > 1:
        sm = smooth(loss, window)
        ax.plot(steps[len(steps) - len(sm):], sm, lw=1.6, label=f"mean of {min(window, len(loss))}")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_label_views(pred: np.ndarray, gt: np.ndarray, path, num_classes: int = 17,
                     title: str = "") -> None:
    """Side-by-side top views of predicted and ground-truth label grids."""
    cmap = _label_cmap(num_classes)
    fig, axes = plt.subplots(1, 2, figsize=(9, 4.4))
    for ax, lab, name in zip(axes, (pred, gt), ("prediction", "ground truth")):
        ax.imshow(top_view(lab), origin="lower", cmap=cmap, vmin=0, vmax=num_classes - 1,
                  interpolation="nearest")
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
    present = sorted(set(np.unique(gt)) | set(np.unique(pred)) - {0})
    handles = [plt.Rectangle((0, 0), 1, 1, color=cmap(c)) for c in present if c]
    names = [CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c) for c in present if c]
    if handles:
        fig.legend(handles, names, loc="lower center", ncol=min(6, len(handles)), fontsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout(rect=(0, 0.08, 1, 1))
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_bench(report: dict, path) -> None:
    """Median stage timings on a log axis."""
    names = list(report["entries"])
    ms = [report["entries"][n]["median_ms"] for n in names]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.barh(names, ms)
    ax.set_xscale("log")
    ax.set_xlabel("median ms")
    title = f"{report['preset']}: P={report['gaussians']}"
    if "cull_speedup" in report:
        title += f", cull speedup {report['cull_speedup']:.0f}x"
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_per_class(metrics: dict, path) -> None:
    items = [(k, v) for k, v in metrics["per_class"].items() if v is not None]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if items:
        ax.barh([k for k, _ in items], [v for _, v in items])
    ax.set_xlim(0, 1)
    ax.set_xlabel("IoU")
    ax.set_title(f"IoU {metrics['iou']:.3f}  mIoU {metrics['miou']:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


__all__ = ["plot_loss", "plot_label_views", "plot_bench", "plot_per_class", "top_view", "smooth"]
