"""Figures: keypoint overlays on query images and PCK bar charts for reports."""

from __future__ import annotations

import shutil
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

DPI = 100


def keypoint_colors(n: int) -> list[tuple[float, float, float]]:
    cmap = plt.get_cmap("tab10" if n <= 10 else "tab20")
    return [cmap(i % cmap.N)[:3] for i in range(n)]


def render_overlay(image, predictions, ground_truths, out_path: str | Path, marker_size: float = 10.0) -> Path:
    """Crosses at predictions and discs at ground truth, one colour per keypoint index.

    ``image`` is an RGB array or a path; keypoints are pixel ``(x, y)``. The
    output raster has the image's exact size.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    predictions = np.asarray(predictions, float).reshape(-1, 2)
    ground_truths = np.asarray(ground_truths, float).reshape(-1, 2)
    if len(predictions) != len(ground_truths):
        raise ValueError("predictions and ground truths must be aligned")

    if len(predictions) == 0:
        if isinstance(image, (str, Path)):
            shutil.copyfile(image, out_path)
        else:
            Image.fromarray(np.asarray(image, dtype=np.uint8)).save(out_path)
        return out_path

    if isinstance(image, (str, Path)):
        with Image.open(image) as im:
            image = np.asarray(im.convert("RGB"))
    h, w = image.shape[:2]
    fig = plt.figure(figsize=(w / DPI, h / DPI), dpi=DPI)
    ax = fig.add_axes([0, 0, 1, 1])
    ax.imshow(image, extent=(0, w, h, 0), interpolation="nearest")
    for color, (px, py), (gx, gy) in zip(keypoint_colors(len(predictions)), predictions, ground_truths):
        ax.plot(gx, gy, "o", color=color, markersize=marker_size, markeredgewidth=0)
        ax.plot(px, py, "x", color=color, markersize=marker_size, markeredgewidth=2.5)
    ax.set_xlim(0, w)
    ax.set_ylim(h, 0)
    ax.axis("off")
    fig.savefig(out_path, dpi=DPI)
    plt.close(fig)
    return out_path


def plot_reports(reports, out_path: str | Path) -> Path:
    """Grouped bar chart of per-class PCK, one group per class, one bar per protocol."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    classes = sorted({c for r in reports for c in r.per_class}) + ["mean"]
    x = np.arange(len(classes))
    width = 0.8 / max(len(reports), 1)
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(classes)), 4))
    for i, r in enumerate(reports):
        values = [r.per_class.get(c, np.nan) for c in classes[:-1]] + [r.mean]
        ax.bar(x + (i - (len(reports) - 1) / 2) * width, values, width, label=r.protocol)
    ax.set_xticks(x)
    ax.set_xticklabels(classes, rotation=30, ha="right")
    ax.set_ylabel("PCK (%)")
    ax.set_ylim(0, 100)
    ax.legend(frameon=False, fontsize="small")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
