"""Segmentation metrics and the panoramic evaluation protocols."""

from __future__ import annotations

import numpy as np

IGNORE = 255


class ConfusionMatrix:
    """K x K ground-truth x prediction counts; merges associatively."""

    def __init__(self, num_classes, counts=None, ignored=0):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts
        self.ignored = int(ignored)

    def add(self, pred, gt):
        pred = np.asarray(pred).ravel()
        gt = np.asarray(gt).ravel()
        if pred.shape != gt.shape:
            raise ValueError(f"prediction and label shapes differ: {pred.shape} vs {gt.shape}")
        k = self.num_classes
        valid = gt != IGNORE
        bad = valid & ((gt < 0) | (gt >= k) | (pred < 0) | (pred >= k))
        if bad.any():
            where = int(np.flatnonzero(bad)[0])
            raise ValueError(
                f"label out of range at flat position {where}: gt={int(gt[where])}, pred={int(pred[where])}"
            )
        self.ignored += int((~valid).sum())
        combo = gt[valid].astype(np.int64) * k + pred[valid].astype(np.int64)
        self.counts += np.bincount(combo, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other):
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts,
                               self.ignored + other.ignored)

    def __eq__(self, other):
        return (isinstance(other, ConfusionMatrix)
                and np.array_equal(self.counts, other.counts)
                and self.ignored == other.ignored)

    def pixel_accuracy(self):
        total = self.counts.sum()
        return float(np.diag(self.counts).sum() / total) if total else float("nan")


def accumulate(pred_labels, gt_labels, num_classes):
    return ConfusionMatrix(num_classes).add(pred_labels, gt_labels)


def miou(conf: ConfusionMatrix):
    """Per-class IoU and their mean; empty-union classes excluded from the mean.

    All-empty unions make the mean undefined and it is reported as NaN.
    """
    counts = conf.counts.astype(np.float64)
    inter = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - inter
    ious = np.full(conf.num_classes, np.nan)
    nonempty = union > 0
    ious[nonempty] = inter[nonempty] / union[nonempty]
    mean = float(np.nanmean(ious)) if nonempty.any() else float("nan")
    return ious, mean


def direction_of_column(cols, width, n_dirs):
    """Direction index per column; direction 0 is centered on the image center.

    Bands are equal-width; an indivisible remainder is absorbed by the
    last band.
    """
    band = width // n_dirs
    if band == 0:
        raise ValueError(f"width {width} too small for {n_dirs} directions")
    shift = width // 2 - band // 2
    rolled = np.mod(np.asarray(cols) - shift, width)
    return np.minimum(rolled // band, n_dirs - 1)


def directional_miou(preds, gts, num_classes, n_dirs=8):
    """Per-direction mIoU over equal vertical bands of the panorama.

    Returns (scores, mats): band confusion matrices partition the pixels,
    so summing them reproduces the global matrix exactly.
    """
    mats = [ConfusionMatrix(num_classes) for _ in range(n_dirs)]
    for pred, gt in zip(preds, gts):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        width = pred.shape[-1]
        idx = direction_of_column(np.arange(width), width, n_dirs)
        for d in range(n_dirs):
            sel = idx == d
            mats[d].add(pred[..., sel], gt[..., sel])
    scores = [miou(m)[1] for m in mats]
    return scores, mats


def evaluate_samples(model, images, labels, batch=4):
    """mIoU of a model over an array of images + integer label maps."""
    conf = ConfusionMatrix(model.cfg.num_classes)
    for i in range(0, len(images), batch):
        _, pred = model.segment(images[i : i + batch])
        conf.add(pred, labels[i : i + batch])
    ious, mean = miou(conf)
    return mean, ious, conf


def fov_sweep(model, images, labels, fovs, min_multiple=32):
    """Evaluate at horizontally cropped fields of view.

    Inputs and labels get the same centered crop. Crop widths are floored
    to a multiple of `min_multiple` (the encoder stride) except at 360
    degrees, which evaluates the untouched frames and therefore equals the
    global score exactly. Returns rows of (fov, miou, per-class ious).
    """
    rows = []
    for fov in fovs:
        if fov >= 360:
            imgs, labs = images, labels
        else:
            width = images.shape[-1]
            crop_w = max(min_multiple, int(width * fov / 360.0) // min_multiple * min_multiple)
            start = (width - crop_w) // 2
            imgs = images[..., start : start + crop_w]
            labs = labels[..., start : start + crop_w]
        mean, ious, _ = evaluate_samples(model, imgs, labs)
        rows.append({"fov_deg": float(fov), "miou": mean, "ious": ious})
    return rows
