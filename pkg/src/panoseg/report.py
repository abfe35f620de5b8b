"""Figure and table rendering for the CLI report paths.

Every CSV-producing subcommand renders a companion matplotlib figure next
to its delimited output. All rendering is headless (Agg).
"""

from __future__ import annotations

import csv
import json
from importlib import resources

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

IGNORE = 255


def load_palette():
    with resources.files("panoseg").joinpath("palette.json").open("r") as fh:
        raw = json.load(fh)
    return np.array(raw["classes"], dtype=np.uint8), np.array(raw["ignore"], dtype=np.uint8)


def colorize_labels(labels, palette=None):
    """Integer label map -> RGB uint8 via the shipped palette."""
    if palette is None:
        palette, ignore_color = load_palette()
    else:
        palette, ignore_color = palette
    labels = np.asarray(labels)
    if labels.max(initial=0) >= len(palette) and not (labels == IGNORE).all():
        valid = labels[labels != IGNORE]
        if valid.size and valid.max() >= len(palette):
            raise ValueError(f"label {int(valid.max())} exceeds palette size {len(palette)}")
    out = np.zeros(labels.shape + (3,), dtype=np.uint8)
    mask = labels != IGNORE
    out[mask] = palette[labels[mask]]
    out[~mask] = ignore_color
    return out


def write_csv(path, fieldnames, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def save_curve(path, xs, series, xlabel, ylabel, title=None, logx=False):
    """Line plot of one or more named series over xs."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for name, ys in series.items():
        ax.plot(xs, ys, marker="o", markersize=3, label=name)
    if logx:
        ax.set_xscale("symlog", linthresh=1e-5)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_polar_directions(path, scores, title="per-direction mIoU"):
    """Compass-style polar plot; direction 0 (forward) points up."""
    n = len(scores)
    angles = np.linspace(0, 2 * np.pi, n, endpoint=False)
    vals = np.asarray(scores, dtype=np.float64)
    closed_a = np.concatenate([angles, angles[:1]])
    closed_v = np.concatenate([vals, vals[:1]])
    fig = plt.figure(figsize=(4.2, 4.2))
    ax = fig.add_subplot(projection="polar")
    ax.set_theta_zero_location("N")
    ax.set_theta_direction(-1)
    ax.plot(closed_a, closed_v, marker="o", markersize=3)
    ax.fill(closed_a, closed_v, alpha=0.15)
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_training_curves(path, history):
    iters = [row["iter"] for row in history]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.plot(iters, [row["loss"] for row in history], label="loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    evals = [(row["iter"], row["val_miou"]) for row in history if "val_miou" in row]
    if evals:
        ax2 = ax.twinx()
        ax2.plot(*zip(*evals), color="tab:green", marker="o", markersize=3, label="val mIoU")
        ax2.set_ylabel("val mIoU")
        ax2.set_ylim(0, 1)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_label_figure(path, image, labels, pred=None):
    """Side-by-side input / labels (/ prediction) panel."""
    panels = [("input", image), ("labels", colorize_labels(labels))]
    if pred is not None:
        panels.append(("prediction", colorize_labels(pred)))
    fig, axes = plt.subplots(1, len(panels), figsize=(4.2 * len(panels), 2.6))
    axes = np.atleast_1d(axes)
    for ax, (name, img) in zip(axes, panels):
        ax.imshow(img)
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_offset_overlay(path, image, stage_offsets, stage_strides, max_points=9):
    """Sampling-position dots per decoder stage over the input image.

    `stage_offsets[l]` is (taps, H_l, W_l, 2) total displacement per
    location; dots mark where a few patch centers actually sample, scaled
    back to image coordinates by the stage stride.
    """
    n_stages = len(stage_offsets)
    fig, axes = plt.subplots(1, n_stages, figsize=(4.0 * n_stages, 2.4))
    axes = np.atleast_1d(axes)
    for l, (ax, offsets) in enumerate(zip(axes, stage_offsets)):
        ax.imshow(image)
        ax.set_title(f"stage {l + 1}", fontsize=9)
        ax.axis("off")
        taps, hl, wl, _ = offsets.shape
        stride = stage_strides[l]
        ys = np.linspace(hl * 0.2, hl * 0.8, 3).astype(int)
        xs = np.linspace(wl * 0.2, wl * 0.8, 3).astype(int)
        for yy in ys:
            for xx in xs:
                cy, cx = (yy + 0.5) * stride, (xx + 0.5) * stride
                pts = offsets[:, yy, xx] * stride
                ax.scatter(cx + pts[:, 1], cy + pts[:, 0], s=4, c="yellow", alpha=0.8)
                ax.scatter([cx], [cy], s=8, c="red")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
