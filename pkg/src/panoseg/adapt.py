"""Prototypical domain adaptation.

A memory of per-class prototype vectors (running means of fused decoder
features) is built mutually from source ground truth and target pseudo
labels. Each step distills the fused features toward the map obtained by
stacking prototypes according to the labels, alongside source supervision
and pseudo-label self-training:

    total = seg(source) + ssl(target) + alpha * (mpa(source) + mpa(target))

The MPA term is lambda * T^2 * KL(softmax(fhat/T) || softmax(f/T)) plus
(1 - lambda) * CE(labels, softmax(f)), softmax over the channel axis and
both terms averaged over non-ignored pixels. The prototype map fhat is a
constant (statistics, not parameters): the gradient drives f toward it.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .evalkit import evaluate_samples
from .optim import AdamW

IGNORE = 255


@dataclass
class LossWeights:
    temperature: float = 20.0
    lam: float = 0.9
    alpha: float = 0.001

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")


@dataclass
class AdaptConfig:
    """Wire schema for adaptation runs (JSON keys use 'lambda' for lam)."""

    alpha: float = 0.001
    lam: float = 0.9
    temperature: float = 20.0
    momentum: float = 0.999
    warmup_iters: int = 0
    refresh_period: int = 100
    max_iters: int = 500
    seed: int = 0
    pseudo_threshold: float = 0.0  # <= 0 disables thresholding
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 2
    log_every: int = 25
    eval_every: int = 100

    def weights(self):
        return LossWeights(temperature=self.temperature, lam=self.lam, alpha=self.alpha)

    def to_json(self, path):
        raw = asdict(self)
        raw["lambda"] = raw.pop("lam")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(raw, fh, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        if "lambda" in raw:
            raw["lam"] = raw.pop("lambda")
        return cls(**raw)


# -- losses -------------------------------------------------------------------


def _true_class_prob(p, labels, k_axis=1):
    """Per-pixel probability of the labelled class; 1.0 at ignored pixels.

    Built from a one-hot mask so that log() never sees a masked zero.
    """
    k = p.shape[k_axis]
    valid = labels != IGNORE
    safe = np.where(valid, labels, 0)
    onehot = np.zeros(p.shape, dtype=np.float64)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=k_axis)
    onehot *= valid[:, None]
    p_true = ad.tsum(p * onehot, axis=k_axis)
    filler = Tensor((~valid).astype(np.float64))
    return p_true + filler, valid


def seg_loss(p, labels, ignore=IGNORE):
    """-sum(y log p) averaged over non-ignored pixels.

    `p` holds per-pixel class distributions (N, K, ...); `labels` integer
    class ids with `ignore` marking excluded pixels. An all-ignored batch
    yields 0 with a warning.
    """
    p = ad.as_tensor(p)
    labels = np.asarray(labels)
    if labels.shape != p.shape[:1] + p.shape[2:]:
        raise ad.ShapeError(f"labels shape {labels.shape} does not match distributions {p.shape}")
    p_true, valid = _true_class_prob(p, labels)
    n_valid = int(valid.sum())
    if n_valid == 0:
        warnings.warn("seg_loss: every pixel ignored; loss defined as 0", RuntimeWarning)
        return Tensor(0.0)
    return -ad.tsum(ad.log(p_true)) * (1.0 / n_valid)


def ssl_loss(p, pseudo, ignore=IGNORE):
    """Self-training loss: seg_loss against pseudo labels."""
    return seg_loss(p, pseudo, ignore=ignore)


def pseudo_labels(p, threshold=0.0):
    """Argmax class per pixel; ties go to the lowest class index.

    With a positive `threshold`, pixels whose winning probability falls
    below it are marked ignore.
    """
    p = np.asarray(getattr(p, "data", p))
    labels = p.argmax(axis=1).astype(np.int64)
    if threshold > 0:
        best = np.take_along_axis(p, labels[:, None], axis=1)[:, 0]
        labels = np.where(best >= threshold, labels, IGNORE)
    return labels


def ohem_seg_loss(p, labels, keep_fraction=0.25, ignore=IGNORE):
    """seg_loss over the hardest `keep_fraction` of non-ignored pixels.

    Pixel ranking is done on detached values; gradients flow only through
    the kept pixels.
    """
    p = ad.as_tensor(p)
    labels = np.asarray(labels)
    p_true, valid = _true_class_prob(p, labels)
    n_valid = int(valid.sum())
    if n_valid == 0:
        warnings.warn("ohem_seg_loss: every pixel ignored; loss defined as 0", RuntimeWarning)
        return Tensor(0.0)
    per_pixel = -np.log(np.maximum(p_true.data, 1e-300))
    keep = max(1, int(np.ceil(keep_fraction * n_valid)))
    flat = np.where(valid.ravel(), per_pixel.ravel(), -np.inf)
    cutoff = np.partition(flat, -keep)[-keep]
    mask = (flat >= cutoff) & valid.ravel()
    kept = int(mask.sum())
    mask_t = Tensor(mask.reshape(valid.shape).astype(np.float64))
    return -ad.tsum(ad.log(p_true) * mask_t) * (1.0 / kept)


# -- prototype memory ---------------------------------------------------------


class PrototypeMemory:
    """Running class-mean embeddings with momentum updates.

    `vectors[k]` is valid only when `initialized[k]`; uninitialized
    classes are excluded from reconstruction. Single-writer: the
    adaptation loop owns updates, snapshots may be read concurrently.
    """

    def __init__(self, num_classes, dim, momentum=0.999):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        self.num_classes = num_classes
        self.dim = dim
        self.momentum = momentum
        self.vectors = np.zeros((num_classes, dim), dtype=np.float64)
        self.counts = np.zeros(num_classes, dtype=np.int64)
        self.initialized = np.zeros(num_classes, dtype=bool)

    def snapshot(self):
        out = PrototypeMemory(self.num_classes, self.dim, self.momentum)
        out.vectors = self.vectors.copy()
        out.counts = self.counts.copy()
        out.initialized = self.initialized.copy()
        return out


def _class_sums(features, labels, num_classes):
    """Per-class feature sums and pixel counts; ignore pixels excluded.

    `features` is (M, C, H, W), `labels` (M, H, W) on the same grid.
    """
    m, c, h, w = features.shape
    if labels.shape != (m, h, w):
        raise ad.ShapeError(f"labels {labels.shape} do not align with features {features.shape}")
    flat_feat = features.transpose(0, 2, 3, 1).reshape(-1, c)
    flat_lab = labels.reshape(-1)
    valid = flat_lab != IGNORE
    flat_feat = flat_feat[valid]
    flat_lab = flat_lab[valid].astype(np.int64)
    if (flat_lab >= num_classes).any():
        bad = int(flat_lab[flat_lab >= num_classes][0])
        raise ValueError(f"label {bad} out of range for {num_classes} classes")
    sums = np.zeros((num_classes, c), dtype=np.float64)
    np.add.at(sums, flat_lab, flat_feat)
    counts = np.bincount(flat_lab, minlength=num_classes)
    return sums, counts


def prototype_init(feature_label_pairs, num_classes, momentum=0.999):
    """Class-wise mean embeddings over a whole pass of (features, labels).

    The mutual construction: pass source ground-truth pairs and target
    pseudo-label pairs together. Classes absent everywhere stay flagged
    uninitialized.
    """
    dim = None
    total_sums = None
    total_counts = None
    for feats, labels in feature_label_pairs:
        feats = np.asarray(feats)
        if feats.ndim == 3:
            feats = feats[None]
            labels = np.asarray(labels)[None]
        if dim is None:
            dim = feats.shape[1]
            total_sums = np.zeros((num_classes, dim), dtype=np.float64)
            total_counts = np.zeros(num_classes, dtype=np.int64)
        sums, counts = _class_sums(feats, np.asarray(labels), num_classes)
        total_sums += sums
        total_counts += counts
    if dim is None:
        raise ValueError("prototype_init needs a non-empty dataset")
    memory = PrototypeMemory(num_classes, dim, momentum)
    present = total_counts > 0
    memory.vectors[present] = total_sums[present] / total_counts[present, None]
    memory.counts = total_counts
    memory.initialized = present
    return memory


def prototype_update(memory, features, labels):
    """EMA step toward the batch class-means for classes present in the batch.

    P_k <- m * P_k + (1 - m) * mean_k(batch). Classes absent from the
    batch are untouched; classes seen for the first time are initialized
    to their batch mean.
    """
    sums, counts = _class_sums(np.asarray(features), np.asarray(labels), memory.num_classes)
    present = counts > 0
    means = np.zeros_like(sums)
    means[present] = sums[present] / counts[present, None]
    m = memory.momentum
    first = present & ~memory.initialized
    ema = present & memory.initialized
    memory.vectors[ema] = m * memory.vectors[ema] + (1.0 - m) * means[ema]
    memory.vectors[first] = means[first]
    memory.initialized |= present
    memory.counts += counts
    return memory


def reconstruct(label_map, memory, strict=True):
    """Stack prototypes per pixel class: pixel of class k gets P_k.

    Ignore pixels get zeros (they are masked out of downstream losses).
    Referencing an uninitialized class raises, naming the class, unless
    `strict=False`, which maps such pixels to ignore instead (the caller
    then sees them masked).
    """
    label_map = np.asarray(label_map)
    valid = label_map != IGNORE
    classes = np.unique(label_map[valid])
    missing = [int(k) for k in classes if not memory.initialized[int(k)]]
    if missing:
        if strict:
            raise ValueError(f"class {missing[0]} has no initialized prototype")
        label_map = label_map.copy()
        label_map[np.isin(label_map, missing)] = IGNORE
        valid = label_map != IGNORE
    safe = np.where(valid, label_map, 0).astype(np.int64)
    fhat = memory.vectors[safe]  # (..., C)
    fhat = np.moveaxis(fhat, -1, -3) * np.expand_dims(valid, -3)
    return fhat, label_map


def mpa_loss(f, fhat, labels, weights: LossWeights):
    """Distill features toward the prototype map plus a feature-space CE.

    Returns (loss, components) where components holds the detached KL and
    CE terms. Both terms are averaged over non-ignored pixels; the KL term
    is exactly zero when f equals fhat.
    """
    f = ad.as_tensor(f)
    fhat = np.asarray(getattr(fhat, "data", fhat))
    labels = np.asarray(labels)
    if f.shape != fhat.shape:
        raise ad.ShapeError(f"feature shapes differ: {f.shape} vs {fhat.shape}")
    if labels.shape != f.shape[:1] + f.shape[2:]:
        raise ad.ShapeError(f"labels {labels.shape} do not align with features {f.shape}")
    valid = labels != IGNORE
    n_valid = int(valid.sum())
    if n_valid == 0:
        zero = Tensor(0.0)
        return zero, {"kl": 0.0, "ce": 0.0}
    t = weights.temperature
    # same scaling op on both sides so f == fhat gives a bitwise-zero KL
    teacher = ad._softmax_np(fhat * (1.0 / t), axis=1)
    log_student = ad.log(ad.softmax(f * (1.0 / t), axis=1))
    kl_map = ad.kl_div(log_student, Tensor(teacher), axis=1)
    mask = Tensor(valid.astype(np.float64))
    kl_term = ad.tsum(kl_map * mask) * (t * t / n_valid)

    p_true, _ = _true_class_prob(ad.softmax(f, axis=1), labels)
    ce_term = -ad.tsum(ad.log(p_true)) * (1.0 / n_valid)

    loss = kl_term * weights.lam + ce_term * (1.0 - weights.lam)
    return loss, {"kl": kl_term.item(), "ce": ce_term.item()}


def total_loss(source_p, source_labels, target_p, target_pseudo,
               source_mpa=None, target_mpa=None, weights: LossWeights | None = None):
    """seg(source) + ssl(target) + alpha * (mpa_source + mpa_target).

    Each mpa argument is a precomputed (loss, components) pair or None.
    With alpha == 0 (or no MPA terms) the result is exactly the sum of the
    segmentation and self-training terms. A missing target batch reduces
    the total to the source terms only.
    """
    weights = weights or LossWeights()
    components = {}
    loss = seg_loss(source_p, source_labels)
    components["seg"] = loss.item()
    if target_p is not None:
        ssl = ssl_loss(target_p, target_pseudo)
        components["ssl"] = ssl.item()
        loss = loss + ssl
    if weights.alpha > 0 and (source_mpa is not None or target_mpa is not None):
        mpa = None
        for term in (source_mpa, target_mpa):
            if term is None:
                continue
            mpa = term[0] if mpa is None else mpa + term[0]
        components["mpa_source"] = source_mpa[0].item() if source_mpa else 0.0
        components["mpa_target"] = target_mpa[0].item() if target_mpa else 0.0
        loss = loss + mpa * weights.alpha
    return loss, components


# -- loops --------------------------------------------------------------------


def _label_stride4(labels):
    """Nearest label on the stride-4 feature grid (pixel-center aligned)."""
    return np.asarray(labels)[:, 2::4, 2::4]


def _batches(rng, count, batch_size):
    """Endless shuffled index batches; reshuffles each epoch."""
    while True:
        order = rng.permutation(count)
        for start in range(0, count, batch_size):
            chunk = order[start : start + batch_size]
            if len(chunk):
                yield chunk


def _refresh_pseudo(model, images, threshold):
    out = []
    for i in range(0, len(images), 4):
        probs, _ = model.segment(images[i : i + 4])
        out.append(pseudo_labels(probs, threshold))
    return np.concatenate(out, axis=0)


def run_training(model, source_images, source_labels, cfg: AdaptConfig,
                 target_images=None, val_samples=None, use_mpa=True,
                 log=None, loss_mode="ce"):
    """Shared engine behind source-only training and adaptation.

    With `target_images=None` this is plain supervised training; the RNG
    streams are split so adding a target domain does not perturb source
    batch order. Aborts on a non-finite loss.
    """
    params = list(model.named_parameters())
    opt = AdamW(params, base_lr=cfg.lr, weight_decay=cfg.weight_decay,
                max_iter=max(1, cfg.max_iters), power=0.9)
    ss = np.random.SeedSequence(cfg.seed)
    src_rng, tgt_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    src_iter = _batches(src_rng, len(source_images), cfg.batch_size)
    weights = cfg.weights()

    adapting = target_images is not None
    memory = None
    pseudo_cache = None
    tgt_iter = _batches(tgt_rng, len(target_images), cfg.batch_size) if adapting else None

    history = []
    for it in range(cfg.max_iters):
        if adapting and it % cfg.refresh_period == 0:
            pseudo_cache = _refresh_pseudo(model, target_images, cfg.pseudo_threshold)
            if use_mpa and weights.alpha > 0:
                pairs = [(model.fused_features(source_images[i : i + 4]),
                          _label_stride4(source_labels[i : i + 4]))
                         for i in range(0, len(source_images), 4)]
                if it > 0:  # target joins after the first refresh
                    pairs += [(model.fused_features(target_images[i : i + 4]),
                               _label_stride4(pseudo_cache[i : i + 4]))
                              for i in range(0, len(target_images), 4)]
                memory = prototype_init(pairs, model.cfg.num_classes, cfg.momentum)

        sidx = next(src_iter)
        sx, sy = source_images[sidx], source_labels[sidx]
        sp, sf = model.predict_proba(sx)
        if loss_mode == "ohem":
            loss = ohem_seg_loss(sp, sy)
            components = {"seg": loss.item()}
        else:
            loss = seg_loss(sp, sy)
            components = {"seg": loss.item()}

        if adapting:
            tidx = next(tgt_iter)
            tx, ty_pseudo = target_images[tidx], pseudo_cache[tidx]
            tp, tf = model.predict_proba(tx)
            ssl = ssl_loss(tp, ty_pseudo)
            components["ssl"] = ssl.item()
            loss = loss + ssl
            if use_mpa and weights.alpha > 0:
                sy4 = _label_stride4(sy)
                ty4 = _label_stride4(ty_pseudo)
                prototype_update(memory, sf.data, sy4)
                prototype_update(memory, tf.data, ty4)
                fhat_s, sy4m = reconstruct(sy4, memory, strict=False)
                fhat_t, ty4m = reconstruct(ty4, memory, strict=False)
                mpa_s, comp_s = mpa_loss(sf, fhat_s, sy4m, weights)
                mpa_t, comp_t = mpa_loss(tf, fhat_t, ty4m, weights)
                components["mpa_source"] = mpa_s.item()
                components["mpa_target"] = mpa_t.item()
                loss = loss + (mpa_s + mpa_t) * weights.alpha

        if not np.isfinite(loss.data).all():
            raise ad.NumericError(f"training diverged at iteration {it}: loss={loss.data}")

        opt.zero_grad()
        ad.backward(loss, [p for _, p in params])
        opt.step()

        if it % cfg.log_every == 0 or it == cfg.max_iters - 1:
            row = {"iter": it, "loss": float(loss.data), "lr": opt.current_lr()}
            row.update({k: float(v) for k, v in components.items()})
            if val_samples is not None and (it % cfg.eval_every == 0 or it == cfg.max_iters - 1):
                miou, _, _ = evaluate_samples(model, *val_samples)
                row["val_miou"] = float(miou)
            history.append(row)
            if log is not None:
                log(row)
    return history


def adapt_loop(model, source_images, source_labels, target_images, cfg: AdaptConfig,
               val_samples=None, log=None):
    """Mutual prototypical adaptation with pseudo-label self-training.

    Target images are treated as unlabeled: pseudo labels come from the
    model itself, refreshed every `cfg.refresh_period` iterations. An
    optional warm-up phase trains on the source alone first.
    """
    history = []
    if cfg.warmup_iters > 0:
        warm_cfg = AdaptConfig(**{**asdict(cfg), "max_iters": cfg.warmup_iters})
        history += run_training(model, source_images, source_labels, warm_cfg,
                                val_samples=val_samples, log=log)
    history += run_training(model, source_images, source_labels, cfg,
                            target_images=target_images, val_samples=val_samples, log=log)
    return history
