"""Dataset- and class-adaptive segmentation loss for partially labelled batches.

For each global class ``c`` the loss is a sigmoid binary cross-entropy plus a
negative dice computed jointly over every image in the batch. Both terms only
see samples whose dataset annotates ``c`` (the per-sample annotation mask), and
the per-class losses are summed rather than averaged, so each head's signal is
independent of how many other classes the batch carries.

All functions return analytic gradients w.r.t. their inputs; nothing here
touches the tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ndnet.ops import _stable_sigmoid

DICE_EPS = 1e-5

__all__ = [
    "DICE_EPS",
    "LossBatch",
    "LossValue",
    "sigmoid_bce",
    "batch_dice",
    "multi_dataset_loss",
    "baseline_softmax_ce_dice",
    "labelmap_from_multihot",
]


def _check_binary(a, what):
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{what} must be binary (0/1); soft labels are not supported")


@dataclass
class LossBatch:
    logits: np.ndarray            # (B, C, X, Y, Z)
    targets: np.ndarray           # (B, C, X, Y, Z), binary
    annotation_masks: np.ndarray  # (B, C), binary

    def __post_init__(self):
        if self.logits.shape != self.targets.shape:
            raise ValueError(f"logits {self.logits.shape} vs targets {self.targets.shape}")
        if self.annotation_masks.shape != self.logits.shape[:2]:
            raise ValueError(
                f"annotation_masks must have shape {self.logits.shape[:2]}, "
                f"got {self.annotation_masks.shape}")
        _check_binary(self.targets, "targets")
        _check_binary(self.annotation_masks, "annotation_masks")
        unannotated = self.annotation_masks == 0
        if unannotated.any() and self.targets[unannotated].any():
            raise ValueError("targets must be empty for unannotated (sample, class) pairs")


@dataclass
class LossValue:
    total: float
    per_class: np.ndarray        # (C, 2): bce_c, -dice_c (already masked)
    voxel_gradient: np.ndarray   # d total / d logits

    @property
    def bce(self) -> float:
        return float(self.per_class[:, 0].sum())

    @property
    def dice(self) -> float:
        return float(self.per_class[:, 1].sum())


def _expand(m, ndim):
    return m.reshape(m.shape + (1,) * (ndim - m.ndim))


def sigmoid_bce(logits, targets, annotation_masks, normalization="annotated"):
    """Per-class masked BCE on logits and its gradient.

    ``normalization="annotated"`` divides class ``c`` by voxels-per-image times
    the number of samples annotating ``c``; ``"voxels"`` divides by
    voxels-per-image only. Returns ``(bce[C], grad)``.
    """
    _check_binary(targets, "targets")
    if normalization not in ("annotated", "voxels"):
        raise ValueError(f"unknown normalization {normalization!r}")
    B, C = logits.shape[:2]
    voxels = int(np.prod(logits.shape[2:]))
    m = _expand(np.asarray(annotation_masks, dtype=logits.dtype), logits.ndim)
    y = targets.astype(logits.dtype)
    per_voxel = np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
    if normalization == "annotated":
        count = np.asarray(annotation_masks).sum(axis=0).astype(logits.dtype)
        denom = voxels * np.maximum(count, 1)
    else:
        denom = np.full(C, float(voxels), dtype=logits.dtype)
    spatial = tuple(range(2, logits.ndim))
    sums = (per_voxel * m).sum(axis=spatial).sum(axis=0)
    bce = sums / denom
    grad = m * (_stable_sigmoid(logits) - y) / _expand(denom, logits.ndim - 1)[None]
    return bce, grad


def batch_dice(probabilities, targets, annotation_masks, eps=DICE_EPS):
    """Dice per class with sums pooled over the whole batch.

    ``dice_c = 2 sum(m p y) / (sum(m p) + sum(m y) + eps)``. Classes with a zero
    denominator (nothing annotated, or ``eps=0`` with empty target and
    prediction) get dice 0 and zero gradient. Returns ``(dice[C], d dice/d p)``.
    """
    p = probabilities
    if (p < -1e-6).any() or (p > 1 + 1e-6).any():
        raise ValueError("probabilities must lie in [0, 1]")
    _check_binary(targets, "targets")
    m = _expand(np.asarray(annotation_masks, dtype=p.dtype), p.ndim)
    y = targets.astype(p.dtype)
    axes = (0,) + tuple(range(2, p.ndim))
    inter = (m * p * y).sum(axis=axes)
    denom = (m * p).sum(axis=axes) + (m * y).sum(axis=axes) + eps
    ok = denom > 0
    safe = np.where(ok, denom, 1.0)
    dice = np.where(ok, 2 * inter / safe, 0.0)
    shape = (1, -1) + (1,) * (p.ndim - 2)
    num_b = (2 * inter).reshape(shape)
    den_b = safe.reshape(shape)
    grad = m * (2 * y * den_b - num_b) / den_b ** 2
    grad = grad * ok.reshape(shape)
    return dice, grad


def multi_dataset_loss(batch: LossBatch, eps=DICE_EPS, bce_normalization="annotated") -> LossValue:
    """Sum over classes of masked BCE minus masked batch dice, with d/d logits."""
    logits = batch.logits
    m = batch.annotation_masks
    bce, g_bce = sigmoid_bce(logits, batch.targets, m, bce_normalization)
    probs = _stable_sigmoid(logits)
    dice, g_dice_p = batch_dice(probs, batch.targets, m, eps)
    annotated = m.sum(axis=0) > 0
    bce = np.where(annotated, bce, 0.0)
    dice = np.where(annotated, dice, 0.0)
    per_class = np.stack([bce, -dice], axis=1)
    total = 0.0
    for c in range(per_class.shape[0]):
        total += per_class[c, 0] + per_class[c, 1]
    grad = g_bce - g_dice_p * probs * (1 - probs)
    return LossValue(float(total), per_class, grad)


def labelmap_from_multihot(target: np.ndarray) -> np.ndarray:
    """Collapse ``(C, ...)`` multi-hot masks into one label map; later classes win."""
    label = np.zeros(target.shape[1:], dtype=np.int64)
    for c in range(target.shape[0]):
        label[target[c] > 0] = c + 1
    return label


def baseline_softmax_ce_dice(logits, labelmap, eps=DICE_EPS):
    """Softmax cross-entropy plus mean foreground batch dice (single-label baseline).

    ``logits`` is ``(B, C+1, ...)`` with channel 0 as background and ``labelmap``
    holds integers in ``[0, C]``. Returns ``(loss, grad, details)`` where
    ``details`` has ``ce`` and per-class ``dice``.
    """
    labelmap = np.asarray(labelmap)
    K = logits.shape[1]
    if labelmap.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"labelmap shape {labelmap.shape} does not match logits {logits.shape}")
    if labelmap.min() < 0 or labelmap.max() >= K:
        raise ValueError(f"label index out of range [0, {K - 1}]")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    log_probs = z - np.log(e.sum(axis=1, keepdims=True))
    onehot = (labelmap[:, None] == np.arange(K).reshape((1, K) + (1,) * (logits.ndim - 2)))
    onehot = onehot.astype(logits.dtype)
    n = labelmap.size
    ce = float(-(onehot * log_probs).sum() / n)
    g = (probs - onehot) / n

    fg = np.ones((logits.shape[0], K - 1), dtype=logits.dtype)
    dice, g_dice = batch_dice(probs[:, 1:], onehot[:, 1:], fg, eps)
    loss = ce - float(dice.mean())
    # chain the dice gradient (w.r.t. foreground probabilities) through the softmax
    gp = np.zeros_like(probs)
    gp[:, 1:] = -g_dice / (K - 1)
    g += probs * (gp - (gp * probs).sum(axis=1, keepdims=True))
    return loss, g, {"ce": ce, "dice": dice}
