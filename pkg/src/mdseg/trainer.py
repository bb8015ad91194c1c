"""Multi-dataset training, staged fine-tuning and sliding-window inference."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .collection import CollectionManifest, load_case, subset_manifest
from .losses import (LossBatch, baseline_softmax_ce_dice, labelmap_from_multihot,
                     multi_dataset_loss)
from .ndnet import HEAD, NetConfig, Network, Tape, backward, build_unet, forward, head_parameters
from .ndnet.checkpoint import class_list, load_checkpoint, save_checkpoint
from .ndnet.ops import _stable_sigmoid
from .sampling import FG_BIAS, ScheduleSpec, build_sampler, extract_patch, learning_rate, sample_batch

LOSSES = ("multi_dataset", "softmax")
LOG_COLUMNS = ("epoch", "iter", "loss_total", "loss_bce", "loss_dice",
               "lr_backbone", "lr_heads", "gnorm_pre", "gnorm_post", "seconds")
EMA_WEIGHT = 0.9

__all__ = [
    "TrainConfig", "TrainLog", "TrainResult", "NonFiniteLossError", "Predictor",
    "train", "finetune", "predict", "binarize", "clip_gradients", "gaussian_importance",
    "sliding_windows",
]


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message, classes=()):
        super().__init__(message)
        self.classes = tuple(classes)


@dataclass
class TrainConfig:
    batch_size: int = 4
    epochs: int = 50
    iterations_per_epoch: int = 50
    momentum: float = 0.99
    nesterov: bool = True
    base_lr: float = 0.01
    clip_norm: float = 12.0
    seed: int = 0
    net: NetConfig = field(default_factory=lambda: NetConfig(patch_shape=(16, 16, 16)))
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    fg_bias: float = FG_BIAS
    loss: str = "multi_dataset"
    bce_normalization: str = "annotated"
    workers: int = 1
    checkpoint_every_epoch: bool = True

    def __post_init__(self):
        if isinstance(self.net, dict):
            self.net = NetConfig.from_dict(self.net)
        if isinstance(self.schedule, dict):
            self.schedule = ScheduleSpec(**self.schedule)
        if self.batch_size < 1 or self.epochs < 0 or self.iterations_per_epoch < 1:
            raise ValueError("batch_size and iterations_per_epoch must be >= 1, epochs >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.base_lr < 0:
            raise ValueError("base_lr must be >= 0")
        if not (math.isfinite(self.clip_norm) and self.clip_norm > 0):
            raise ValueError("clip_norm must be a finite positive number")
        if not 0 <= self.fg_bias <= 1:
            raise ValueError("fg_bias must lie in [0, 1]")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["net"] = self.net.to_dict()
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def schedule_for(self, mode=None) -> ScheduleSpec:
        """The configured schedule stretched over ``epochs`` with ``base_lr``."""
        return dataclasses.replace(self.schedule, mode=mode or self.schedule.mode,
                                   base_lr=self.base_lr, total_epochs=max(self.epochs, 1))


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    per_class: list[np.ndarray] = field(default_factory=list)

    def append(self, row: dict, per_class=None):
        self.rows.append(row)
        if per_class is not None:
            self.per_class.append(np.asarray(per_class))

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def epoch_means(self, name="loss_total") -> np.ndarray:
        by_epoch: dict[int, list[float]] = {}
        for r in self.rows:
            by_epoch.setdefault(r["epoch"], []).append(r[name])
        return np.array([np.mean(by_epoch[e]) for e in sorted(by_epoch)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"], r["iter"]] + [repr(float(r[c])) for c in LOG_COLUMNS[2:]])
        return buf.getvalue()

    def save(self, path):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_csv())
        os.replace(tmp, path)


@dataclass
class TrainResult:
    network: Network
    log: TrainLog
    checkpoint: Path | None = None
    best_checkpoint: Path | None = None
    activation: str = "sigmoid"


def clip_gradients(grads: list[np.ndarray], clip_norm: float) -> tuple[float, float]:
    """Scale ``grads`` in place to global L2 norm ``<= clip_norm``; return (pre, post)."""
    pre = math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel())) for g in grads))
    if not math.isfinite(pre):
        raise NonFiniteLossError("non-finite gradient norm")
    if pre <= clip_norm:
        return pre, pre
    scale = clip_norm / pre
    for g in grads:
        g *= g.dtype.type(scale)
    post = math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel())) for g in grads))
    return pre, post


class _SGD:
    """SGD with (Nesterov) momentum; parameters at lr 0 are left untouched entirely."""

    def __init__(self, net: Network, momentum: float, nesterov: bool):
        self.momentum = momentum
        self.nesterov = nesterov
        self.buffers = {p.name: np.zeros_like(p.value) for p in net.parameters}

    def step(self, net: Network, lr_of_role: dict[str, float]):
        mu = self.momentum
        for p in net.parameters:
            lr = lr_of_role[p.role]
            if lr == 0:
                continue
            v = self.buffers[p.name]
            v *= mu
            v += p.grad
            update = p.grad + mu * v if self.nesterov else v
            p.value -= p.value.dtype.type(lr) * update


# --- batches ------------------------------------------------------------------

class _CaseCache:
    def __init__(self, manifest: CollectionManifest):
        self.manifest = manifest
        self._cases = {}

    def __call__(self, index):
        if index not in self._cases:
            self._cases[index] = load_case(self.manifest.cases[index])
        return self._cases[index]


def _make_batch(step, config, sampler, cache, manifest, pool):
    """Patches for one iteration; rng streams depend only on (seed, step, slot)."""
    picks = sample_batch(sampler, config.batch_size, np.random.default_rng([config.seed, step]))

    def one(slot):
        rng = np.random.default_rng([config.seed, step, slot + 1])
        return extract_patch(cache(picks[slot]), manifest, config.net.patch_shape, rng,
                             config.fg_bias)

    slots = range(config.batch_size)
    patches = list(pool.map(one, slots)) if pool is not None else [one(s) for s in slots]
    images = np.stack([p[0] for p in patches])[:, None]
    targets = np.stack([p[1] for p in patches])
    masks = np.stack([p[2] for p in patches])
    return images, targets, masks


class _Prefetcher:
    """Bounded look-ahead over deterministic per-step batches."""

    def __init__(self, make, steps, workers):
        self.make = make
        self.steps = iter(steps)
        self.pool = ThreadPoolExecutor(workers) if workers > 1 else None
        self.queue: deque = deque()
        self.depth = 2 * workers if workers > 1 else 0

    def _submit(self):
        step = next(self.steps, None)
        if step is not None:
            self.queue.append(self.pool.submit(self.make, step, None))

    def __iter__(self):
        if self.pool is None:
            for step in self.steps:
                yield self.make(step, None)
            return
        try:
            for _ in range(self.depth):
                self._submit()
            while self.queue:
                batch = self.queue.popleft().result()
                self._submit()
                yield batch
        finally:
            self.pool.shutdown(wait=True, cancel_futures=True)


# --- training loop ----------------------------------------------------------------------

def _loss_and_grad(config: TrainConfig, logits, targets, masks):
    logits64 = logits.astype(np.float64)
    if config.loss == "multi_dataset":
        value = multi_dataset_loss(LossBatch(logits64, targets, masks),
                                   bce_normalization=config.bce_normalization)
        return value.total, value.bce, value.dice, value.per_class, value.voxel_gradient
    labels = np.stack([labelmap_from_multihot(t) for t in targets])
    total, grad, details = baseline_softmax_ce_dice(logits64, labels)
    per_class = np.stack([np.full_like(details["dice"], details["ce"]), -details["dice"]], 1)
    return total, details["ce"], -float(details["dice"].mean()), per_class, grad


def _checkpoint_extra(config: TrainConfig, activation: str, classes_offset=0) -> dict:
    cfg = config.to_dict()
    cfg.pop("workers")   # must not influence checkpoint bytes
    return {"train_config": cfg, "activation": activation}


def _run(net: Network, manifest: CollectionManifest, config: TrainConfig, schedule: ScheduleSpec,
         out_dir, activation: str, classes, progress=None, on_epoch_end=None) -> TrainResult:
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    sampler = build_sampler(manifest, "train", config.seed)
    cache = _CaseCache(manifest)
    opt = _SGD(net, config.momentum, config.nesterov)
    log = TrainLog()
    total_steps = config.epochs * config.iterations_per_epoch
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    result = TrainResult(net, log, activation=activation)
    extra = _checkpoint_extra(config, activation)
    smoothed, best = None, math.inf

    def make(step, _):
        return _make_batch(step, config, sampler, cache, manifest, pool)

    try:
        batches = iter(_Prefetcher(make, range(total_steps), config.workers))
        step = 0
        for epoch in range(config.epochs):
            lrs = {role: learning_rate(schedule, epoch, role) for role in ("backbone", HEAD)}
            epoch_losses = []
            for it in range(config.iterations_per_epoch):
                t0 = time.perf_counter()
                images, targets, masks = next(batches)
                tape = Tape()
                logits = forward(net, images, tape)
                total, bce, dice, per_class, grad = _loss_and_grad(config, logits, targets, masks)
                if not math.isfinite(total):
                    bad = [c for c in range(per_class.shape[0])
                           if not np.isfinite(per_class[c]).all()]
                    raise NonFiniteLossError(
                        f"non-finite loss at epoch {epoch} iteration {it}; classes {bad}", bad)
                net.zero_grad()
                backward(net, tape, grad.astype(net.dtype))
                pre, post = clip_gradients([p.grad for p in net.parameters], config.clip_norm)
                opt.step(net, lrs)
                log.append({"epoch": epoch, "iter": step, "loss_total": total, "loss_bce": bce,
                            "loss_dice": dice, "lr_backbone": lrs["backbone"],
                            "lr_heads": lrs[HEAD], "gnorm_pre": pre, "gnorm_post": post,
                            "seconds": time.perf_counter() - t0}, per_class)
                epoch_losses.append(total)
                step += 1
            mean = float(np.mean(epoch_losses))
            smoothed = mean if smoothed is None else EMA_WEIGHT * smoothed + (1 - EMA_WEIGHT) * mean
            if on_epoch_end is not None:
                on_epoch_end(epoch, net)
            if progress is not None:
                progress(f"epoch {epoch + 1}/{config.epochs} loss {mean:.4f} "
                         f"smoothed {smoothed:.4f} lr {lrs['backbone']:.5f}/{lrs[HEAD]:.5f}")
            if out_dir is not None:
                if smoothed < best:
                    best = smoothed
                    result.best_checkpoint = save_checkpoint(
                        net, out_dir / "best.ckpt", classes, step, extra)
                if config.checkpoint_every_epoch or epoch == config.epochs - 1:
                    result.checkpoint = save_checkpoint(
                        net, out_dir / "latest.ckpt", classes, step, extra)
                log.save(out_dir / "train_log.csv")
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    if out_dir is not None:
        result.checkpoint = save_checkpoint(
            net, out_dir / "latest.ckpt", classes, total_steps, extra)
        log.save(out_dir / "train_log.csv")
    return result


def train(manifest: CollectionManifest, config: TrainConfig, out_dir=None,
          single_dataset: int | None = None, progress=None, on_epoch_end=None) -> TrainResult:
    """Train from scratch on every dataset jointly, or a softmax baseline on one.

    With ``single_dataset=k`` the manifest is restricted to dataset ``k`` and the
    network gets one extra (background) head trained with softmax CE + dice.
    """
    if single_dataset is not None:
        manifest = subset_manifest(manifest, [single_dataset])
        config = dataclasses.replace(config, loss="softmax")
    activation = "softmax" if config.loss == "softmax" else "sigmoid"
    heads = manifest.num_classes + (1 if activation == "softmax" else 0)
    net_cfg = dataclasses.replace(config.net, num_global_classes=heads, seed=config.seed)
    net = build_unet(net_cfg)
    config = dataclasses.replace(config, net=net_cfg)
    return _run(net, manifest, config, config.schedule_for(), out_dir, activation,
                class_list(manifest), progress, on_epoch_end)


_BACKBONE_KEYS = ("stages", "base_channels", "channel_growth", "residual_encoder",
                  "normalization", "kernel_size", "in_channels")


def finetune(checkpoint, new_manifest: CollectionManifest, config: TrainConfig, out_dir=None,
             progress=None, on_epoch_end=None) -> TrainResult:
    """Load a backbone, attach fresh heads for ``new_manifest`` and train with warmup.

    Heads are drawn from ``default_rng([seed, 1])``. The schedule runs in
    finetune mode: heads alone during the head warmup, then everything.
    """
    source, header = load_checkpoint(checkpoint)
    src_cfg = source.config
    for key in _BACKBONE_KEYS:
        if getattr(src_cfg, key) != getattr(config.net, key):
            raise ValueError(f"backbone shape mismatch: checkpoint {key}={getattr(src_cfg, key)}"
                             f" vs config {getattr(config.net, key)}")
    if header.get("extra", {}).get("activation", "sigmoid") != "sigmoid":
        raise ValueError("fine-tuning starts from a sigmoid-head checkpoint")
    net_cfg = dataclasses.replace(config.net, num_global_classes=new_manifest.num_classes,
                                  seed=config.seed)
    params = [p for p in source.parameters if p.role != HEAD]
    rng = np.random.default_rng([config.seed, 1])
    for c in range(new_manifest.num_classes):
        params += head_parameters(rng, c, net_cfg.channels[0], source.dtype)
    net = Network(net_cfg, params)
    config = dataclasses.replace(config, net=net_cfg)
    schedule = config.schedule_for("finetune") if config.epochs else None
    return _run(net, new_manifest, config, schedule, out_dir, "sigmoid",
                class_list(new_manifest), progress, on_epoch_end)


# --- inference ----------------------------------------------------------------------

def gaussian_importance(patch_shape, sigma_scale=1 / 8) -> np.ndarray:
    """Separable Gaussian window, peak 1, sigma = patch * sigma_scale per axis."""
    w = np.ones(patch_shape)
    for axis, p in enumerate(patch_shape):
        x = np.arange(p) - (p - 1) / 2
        g = np.exp(-0.5 * (x / (p * sigma_scale)) ** 2)
        w = w * g.reshape([-1 if a == axis else 1 for a in range(3)])
    return w / w.max()


def sliding_windows(shape, patch_shape, overlap=0.5) -> list[tuple[int, int, int]]:
    """Window corners covering ``shape``; evenly spaced, step <= patch * (1 - overlap)."""
    if not 0 <= overlap < 1:
        raise ValueError("overlap must lie in [0, 1)")
    axes = []
    for s, p in zip(shape, patch_shape):
        if s < p:
            raise ValueError(f"volume {tuple(shape)} smaller than patch {tuple(patch_shape)}")
        step = max(1, int(p * (1 - overlap)))
        n = math.ceil((s - p) / step) + 1
        axes.append([int(round(i * (s - p) / (n - 1))) if n > 1 else 0 for i in range(n)])
    return [(a, b, c) for a in axes[0] for b in axes[1] for c in axes[2]]


def predict(net: Network, volume: np.ndarray, patch_shape=None, overlap=0.5,
            activation="sigmoid", window_order=None, batch_size=4) -> np.ndarray:
    """Per-class probabilities ``(C, X, Y, Z)`` by Gaussian-weighted sliding windows.

    Volumes smaller than the patch are edge-padded and cropped back. Windows may
    be evaluated in any ``window_order``; accumulation always runs in the
    canonical order so the output does not depend on it.
    """
    patch_shape = tuple(patch_shape or net.config.patch_shape)
    volume = np.asarray(volume, dtype=np.float32)
    orig = volume.shape
    pads = [(0, max(0, p - s)) for p, s in zip(patch_shape, orig)]
    if any(hi for _, hi in pads):
        volume = np.pad(volume, pads, mode="edge")
    windows = sliding_windows(volume.shape, patch_shape, overlap)
    order = list(range(len(windows))) if window_order is None else list(window_order)
    if sorted(order) != list(range(len(windows))):
        raise ValueError("window_order must be a permutation of the window indices")
    outputs = {}
    for i in range(0, len(order), batch_size):
        chunk = order[i:i + batch_size]
        batch = np.stack([volume[tuple(slice(a, a + p) for a, p in zip(windows[j], patch_shape))]
                          for j in chunk])[:, None]
        logits = forward(net, batch).astype(np.float64)
        if activation == "sigmoid":
            probs = _stable_sigmoid(logits)
        elif activation == "softmax":
            z = np.exp(logits - logits.max(axis=1, keepdims=True))
            probs = z / z.sum(axis=1, keepdims=True)
        else:
            raise ValueError(f"unknown activation {activation!r}")
        for j, pr in zip(chunk, probs):
            outputs[j] = pr
    weight = gaussian_importance(patch_shape)
    acc = np.zeros((next(iter(outputs.values())).shape[0],) + volume.shape)
    wsum = np.zeros(volume.shape)
    for j, corner in enumerate(windows):
        sl = tuple(slice(a, a + p) for a, p in zip(corner, patch_shape))
        acc[(slice(None),) + sl] += weight * outputs[j]
        wsum[sl] += weight
    probs = acc / wsum
    return probs[(slice(None),) + tuple(slice(0, s) for s in orig)]


def binarize(probabilities: np.ndarray, threshold=0.5) -> np.ndarray:
    """Independent per-class thresholding (``p >= threshold``); overlaps allowed."""
    p = np.asarray(probabilities)
    if (p < 0).any() or (p > 1).any():
        raise ValueError("probabilities must lie in [0, 1]")
    return (p >= threshold).astype(np.uint8)


def softmax_to_masks(probabilities: np.ndarray) -> np.ndarray:
    """Argmax over ``(C+1, ...)`` softmax output as exclusive foreground masks ``(C, ...)``."""
    label = probabilities.argmax(axis=0)
    return (label[None] == np.arange(1, probabilities.shape[0]).reshape(
        (-1,) + (1,) * label.ndim)).astype(np.uint8)


@dataclass
class Predictor:
    """Volume -> multi-hot masks over a model's classes."""

    network: Network
    activation: str = "sigmoid"
    overlap: float = 0.5
    threshold: float = 0.5
    header: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_checkpoint(cls, path, **kw) -> "Predictor":
        net, header = load_checkpoint(path)
        return cls(net, header.get("extra", {}).get("activation", "sigmoid"), header=header, **kw)

    def probabilities(self, volume) -> np.ndarray:
        return predict(self.network, volume, overlap=self.overlap, activation=self.activation)

    def __call__(self, volume) -> np.ndarray:
        probs = self.probabilities(volume)
        if self.activation == "softmax":
            return softmax_to_masks(probs)
        return binarize(probs, self.threshold)

    @property
    def num_classes(self) -> int:
        n = self.network.config.num_global_classes
        return n - 1 if self.activation == "softmax" else n
