"""Case sampling balanced by dataset size, patch extraction and learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .collection import Case, CollectionManifest, annotation_mask_vector

FG_BIAS = 0.33

__all__ = [
    "SamplerSpec",
    "ScheduleSpec",
    "build_sampler",
    "sample_batch",
    "extract_patch",
    "embed_targets",
    "learning_rate",
]


@dataclass(frozen=True)
class SamplerSpec:
    """Per-case draw probabilities for a list of manifest cases.

    A case from a dataset with ``n`` cases gets weight ``1/sqrt(n)``, so a
    whole dataset is drawn with probability proportional to ``sqrt(n)``.
    """

    case_indices: tuple[int, ...]   # positions in ``manifest.cases``
    dataset_ids: tuple[int, ...]
    probabilities: np.ndarray
    seed: int = 0

    def dataset_probabilities(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for ds, p in zip(self.dataset_ids, self.probabilities):
            out[ds] = out.get(ds, 0.0) + float(p)
        return out


def build_sampler(manifest: CollectionManifest, split: str | None = "train", seed=0) -> SamplerSpec:
    idx = [i for i, c in enumerate(manifest.cases) if split is None or c.split == split]
    if not idx:
        raise ValueError("no cases to sample from")
    ds = [manifest.cases[i].dataset_id for i in idx]
    counts = {d: ds.count(d) for d in set(ds)}
    w = np.array([1.0 / math.sqrt(counts[d]) for d in ds])
    return SamplerSpec(tuple(idx), tuple(ds), w / w.sum(), seed)


def sample_batch(sampler: SamplerSpec, batch_size: int, rng: np.random.Generator) -> list[int]:
    """Draw ``batch_size`` manifest case indices i.i.d. with replacement."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    picks = rng.choice(len(sampler.case_indices), size=batch_size, p=sampler.probabilities)
    return [sampler.case_indices[i] for i in picks]


def embed_targets(case: Case, manifest: CollectionManifest) -> tuple[np.ndarray, np.ndarray]:
    """Place a case's local masks on the global class axis.

    Returns ``(targets[C_global, ...], annotation_vector[C_global])``; channels of
    other datasets are all-zero and unannotated.
    """
    vec = annotation_mask_vector(case.dataset_id, manifest)
    start = manifest.class_offset(case.dataset_id)
    targets = np.zeros((manifest.num_classes,) + case.image.shape, dtype=np.uint8)
    targets[start:start + case.masks.shape[0]] = case.masks
    return targets, vec


def _pad_to(case_image, masks, patch_shape):
    pads = [(0, max(0, p - s)) for p, s in zip(patch_shape, case_image.shape)]
    if not any(hi for _, hi in pads):
        return case_image, masks
    image = np.pad(case_image, pads, mode="edge")
    masks = np.pad(masks, [(0, 0)] + pads, mode="constant")
    return image, masks


def extract_patch(case: Case, manifest: CollectionManifest, patch_shape, rng: np.random.Generator,
                  fg_bias: float = FG_BIAS):
    """Crop a training patch.

    With probability ``fg_bias`` the crop is placed around a foreground voxel:
    a class is drawn uniformly among the case's non-empty classes, then a voxel
    uniformly from that class's mask. Otherwise the crop corner is
    uniform over all valid positions. Cases smaller than the patch are padded
    (image by edge replication, masks with zeros).

    Returns ``(image_patch, target_patch[C_global, ...], annotation_vector)``.
    """
    patch_shape = tuple(int(p) for p in patch_shape)
    image, masks = _pad_to(case.image, case.masks, patch_shape)
    shape = image.shape
    forced = rng.random() < fg_bias
    start = None
    if forced:
        present = [c for c in range(masks.shape[0]) if masks[c].any()]
        if present:
            fg = np.flatnonzero(masks[present[rng.integers(len(present))]])
            voxel = np.unravel_index(fg[rng.integers(fg.size)], shape)
            start = [int(np.clip(v - p // 2, 0, s - p))
                     for v, p, s in zip(voxel, patch_shape, shape)]
    if start is None:
        start = [int(rng.integers(0, s - p + 1)) for p, s in zip(patch_shape, shape)]
    sl = tuple(slice(a, a + p) for a, p in zip(start, patch_shape))
    padded = Case(case.dataset_id, image, masks, case.case_id, case.spacing)
    targets, vec = embed_targets(padded, manifest)
    return image[sl], targets[(slice(None),) + sl], vec


@dataclass(frozen=True)
class ScheduleSpec:
    mode: str = "standard"
    base_lr: float = 0.01
    total_epochs: int = 1000
    head_warmup_epochs: int = 10
    full_warmup_epochs: int = 50
    exponent: float = 0.9

    def __post_init__(self):
        if self.mode not in ("standard", "finetune"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.base_lr < 0 or self.total_epochs < 1:
            raise ValueError("base_lr must be >= 0 and total_epochs >= 1")
        if self.mode == "finetune" and \
                self.head_warmup_epochs + self.full_warmup_epochs >= self.total_epochs:
            raise ValueError("warmup epochs must be fewer than total epochs")


def _poly(base, epoch, total, exponent):
    return base * (1 - epoch / total) ** exponent


def learning_rate(schedule: ScheduleSpec, epoch: int, param_role: str = "backbone") -> float:
    """Learning rate of ``param_role`` ("backbone" or "head") at ``epoch``.

    standard: polynomial decay from ``base_lr`` over all epochs.
    finetune: heads ramp linearly over the head warmup while the backbone is
    frozen (lr 0); then every parameter ramps linearly over the full warmup;
    then polynomial decay over the remaining epochs.
    """
    s = schedule
    if not 0 <= epoch < s.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {s.total_epochs})")
    if param_role not in ("backbone", "head"):
        raise ValueError(f"unknown parameter role {param_role!r}")
    if s.mode == "standard":
        return _poly(s.base_lr, epoch, s.total_epochs, s.exponent)
    hw, fw = s.head_warmup_epochs, s.full_warmup_epochs
    if epoch < hw:
        return s.base_lr * (epoch + 1) / hw if param_role == "head" else 0.0
    if epoch < hw + fw:
        return s.base_lr * min((epoch - hw + 1) / fw, 1.0)
    return _poly(s.base_lr, epoch - hw - fw, s.total_epochs - hw - fw, s.exponent)
