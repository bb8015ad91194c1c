"""Desk-scale experiments on the built-in phantom collection.

These are shared by the acceptance tests and the demo scripts. Every training
run is cached on disk under a directory named after its settings, so asking
for the same run twice trains once.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .collection import CollectionManifest, load_case, load_manifest, read_volume, subset_manifest
from .evalreport import dice_score, evaluate
from .phantomgen import DatasetSpec, GenConfig, ProtocolVariant, apply_protocol, \
    default_config, generate_collection
from .sampling import ScheduleSpec
from .trainer import Predictor, TrainConfig, finetune, train

SMALL, LARGE = 1, 2          # dataset ids of the 8-case and 40-case datasets
SEEDS = (0, 1, 2)
# Eight sigmoid heads on 8 shared channels collapse kidney and vessel into one
# output; 16 channels separate them. Every experiment uses the wider net.
BASE_CHANNELS = 16


@dataclass(frozen=True)
class Budget:
    epochs: int
    iterations_per_epoch: int = 25

    @property
    def steps(self) -> int:
        return self.epochs * self.iterations_per_epoch


# One single-dataset baseline gets BASELINE steps; the joint model gets the
# sum over the three datasets, i.e. the same total compute.
BASELINE = Budget(30)
JOINT = Budget(90)
RETENTION = Budget(20)
PRETRAIN = Budget(40)
# the fine-tuning schedule spends 60 epochs in warmup, so runs need more epochs
TRANSFER = Budget(100, 4)
TRANSFER_TRAIN_CASES = 5
TRANSFER_SMALL_CASES = 25
RETENTION_CASES = 16


# --- collections and cached runs ------------------------------------------------------

def _collection(root, name, config: GenConfig, workers=1) -> CollectionManifest:
    out = Path(root) / name
    if (out / "manifest.json").is_file():
        return load_manifest(out / "manifest.json")
    return generate_collection(config, out, workers=workers)


def desk_collection(root, data_seed=0, small_cases=None, workers=1) -> CollectionManifest:
    """The built-in 3-dataset collection (optionally with a larger small dataset)."""
    config = default_config(data_seed)
    name = f"desk_s{data_seed}"
    if small_cases is not None:
        ds = list(config.datasets)
        ds[SMALL] = dataclasses.replace(ds[SMALL], case_count=small_cases)
        config = dataclasses.replace(config, datasets=tuple(ds))
        name += f"_n{small_cases}"
    return _collection(root, name, config, workers)


def retention_collection(root, data_seed=0, workers=1) -> CollectionManifest:
    """Two datasets that both label only the organ, one dilated and one eroded by a voxel."""
    base = default_config(data_seed)
    datasets = tuple(DatasetSpec(name, ("organ",), (ProtocolVariant(margin_voxels=m),),
                                 RETENTION_CASES)
                     for name, m in (("organ_dilated", 1), ("organ_eroded", -1)))
    return _collection(root, f"retention_s{data_seed}",
                       dataclasses.replace(base, datasets=datasets), workers)


def generator_config(manifest: CollectionManifest) -> GenConfig:
    raw = json.loads((Path(manifest.root) / "manifest.json").read_text())
    return GenConfig.from_dict(raw["generator"])


def _fingerprint(settings: dict) -> str:
    return hashlib.sha1(json.dumps(settings, sort_keys=True).encode()).hexdigest()[:12]


def cached_run(root, tag, manifest: CollectionManifest, config: TrainConfig,
               single_dataset=None, init_checkpoint=None, progress=None) -> Path:
    """Train (or fine-tune from ``init_checkpoint``) once; return the checkpoint path."""
    settings = {
        "tag": tag,
        "config": config.to_dict(),
        "cases": [c.case_id for c in manifest.cases],
        "root": manifest.root,
        "single_dataset": single_dataset,
        "init": str(init_checkpoint) if init_checkpoint else None,
    }
    out = Path(root) / "runs" / f"{tag}_{_fingerprint(settings)}"
    ckpt = out / "latest.ckpt"
    marker = out / "run.json"
    if ckpt.is_file() and marker.is_file() and json.loads(marker.read_text()) == settings:
        return ckpt
    if init_checkpoint is not None:
        finetune(init_checkpoint, manifest, config, out, progress=progress)
    else:
        train(manifest, config, out, single_dataset=single_dataset, progress=progress)
    marker.write_text(json.dumps(settings, indent=2, sort_keys=True) + "\n")
    return ckpt


def _config(budget: Budget, seed: int, **kw) -> TrainConfig:
    net = dataclasses.replace(TrainConfig().net, base_channels=BASE_CHANNELS)
    return TrainConfig(epochs=budget.epochs, iterations_per_epoch=budget.iterations_per_epoch,
                       seed=seed, net=net, **kw)


def joint_checkpoint(root, seed, progress=None) -> Path:
    manifest = desk_collection(root)
    return cached_run(root, "joint", manifest, _config(JOINT, seed), progress=progress)


def baseline_checkpoint(root, dataset_id, seed, progress=None) -> Path:
    manifest = desk_collection(root)
    return cached_run(root, f"single{dataset_id}", manifest, _config(BASELINE, seed),
                      single_dataset=dataset_id, progress=progress)


# --- overlapping outputs ----------------------------------------------------------------

def overlap_voxels(root, checkpoint, dataset_id=0) -> int:
    """Voxels predicted positive for two classes of ``dataset_id`` where its truth overlaps.

    Counted over the dataset's held-out cases. A joint checkpoint covers every
    dataset; a softmax baseline covers ``dataset_id`` alone.
    """
    full = desk_collection(root)
    predictor = Predictor.from_checkpoint(checkpoint)
    covered = sorted({c["dataset_id"] for c in predictor.header["classes"]})
    manifest = subset_manifest(full, covered)
    start = manifest.class_offset(dataset_id)
    n = len(manifest.dataset(dataset_id).classes)
    total = 0
    for entry in manifest.cases_of(dataset_id, "held_out"):
        case = load_case(entry)
        pred = predictor(case.image)[start:start + n]
        both_true = case.masks.sum(axis=0) >= 2
        both_pred = pred.sum(axis=0) >= 2
        total += int((both_true & both_pred).sum())
    return total


# --- conflicting protocols ----------------------------------------------------------------

@dataclass(frozen=True)
class RetentionResult:
    structure: str
    margins: tuple[int, int]          # protocol margin of each class
    own: tuple[float, float]          # mean dice of each class vs its own protocol
    other: tuple[float, float]        # ... vs the other class's protocol
    differing_voxels: int

    @property
    def retained(self) -> bool:
        return self.differing_voxels > 0 and all(o > x for o, x in zip(self.own, self.other))


def retention_checkpoint(root, seed, progress=None) -> Path:
    manifest = retention_collection(root)
    return cached_run(root, "retention", manifest, _config(RETENTION, seed), progress=progress)


def protocol_retention(root, checkpoint, manifest=None, structure="organ",
                       datasets=(0, 1)) -> RetentionResult:
    """Compare two classes that label ``structure`` under different margins.

    Each class's output on every held-out image is scored against masks drawn
    from the neutral truth under both datasets' protocols. ``manifest``
    defaults to the two-dataset retention collection.
    """
    manifest = manifest if manifest is not None else retention_collection(root)
    gen = generator_config(manifest)
    children = [s.id for s in gen.structures if s.parent_id == structure]
    protocols, indices = [], []
    for k in datasets:
        ds = gen.datasets[k]
        j = ds.structures.index(structure)
        protocols.append(ds.protocols[j])
        indices.append(manifest.global_index(k, j))
    predictor = Predictor.from_checkpoint(checkpoint)
    own = [[], []]
    other = [[], []]
    differing = 0
    for entry in manifest.split("held_out"):
        case = load_case(entry)
        truth = dict(entry.truth)
        full = read_volume(truth[structure])[0].astype(bool)
        subs = [read_volume(truth[c])[0].astype(bool) for c in children]
        labels = [apply_protocol(full, subs, p) for p in protocols]
        pred = predictor(case.image)
        outs = [pred[i] for i in indices]
        differing += int((outs[0] != outs[1]).sum())
        for a in (0, 1):
            own[a].append(dice_score(outs[a], labels[a]))
            other[a].append(dice_score(outs[a], labels[1 - a]))
    return RetentionResult(structure, tuple(p.margin_voxels for p in protocols),
                           tuple(float(np.mean(v)) for v in own),
                           tuple(float(np.mean(v)) for v in other), differing)


# --- joint training vs single-dataset baselines ----------------------------------------------

def dataset_mean_dice(root, checkpoint, dataset_id) -> float:
    """Mean held-out dice over the classes of one dataset."""
    full = desk_collection(root)
    predictor = Predictor.from_checkpoint(checkpoint)
    covered = sorted({c["dataset_id"] for c in predictor.header["classes"]})
    manifest = subset_manifest(full, covered)
    table = evaluate(predictor, manifest, datasets=[dataset_id])
    return table.dataset_means()[dataset_id]


def joint_vs_single(root, seed, dataset_id=SMALL, progress=None) -> tuple[float, float]:
    """``(joint, single)`` mean held-out dice on one dataset's classes."""
    joint = dataset_mean_dice(root, joint_checkpoint(root, seed, progress), dataset_id)
    single = dataset_mean_dice(root, baseline_checkpoint(root, dataset_id, seed, progress),
                               dataset_id)
    return joint, single


# --- transfer to a small new dataset ---------------------------------------------------------

def transfer_collection(root) -> tuple[CollectionManifest, CollectionManifest]:
    """``(pretraining, target)`` manifests.

    Pretraining sees the two larger datasets. The target is the small
    dataset's classes with only its first few training cases kept; its
    held-out cases are scored.
    """
    full = desk_collection(root, small_cases=TRANSFER_SMALL_CASES)
    pretrain = subset_manifest(full, [d.dataset_id for d in full.datasets
                                      if d.dataset_id != SMALL])
    keep = {c.case_id for c in full.cases_of(SMALL, "train")[:TRANSFER_TRAIN_CASES]}
    target = subset_manifest(full, [SMALL],
                             case_filter=lambda c: c.split == "held_out" or c.case_id in keep)
    return pretrain, target


def transfer_runs(root, seed, progress=None) -> tuple[Path, Path]:
    """``(finetuned, scratch)`` checkpoints trained with the same number of steps."""
    pretrain, target = transfer_collection(root)
    source = cached_run(root, "pretrain", pretrain, _config(PRETRAIN, seed), progress=progress)
    ft_cfg = _config(TRANSFER, seed, schedule=ScheduleSpec(mode="finetune"))
    tuned = cached_run(root, "finetune", target, ft_cfg, init_checkpoint=source,
                       progress=progress)
    scratch = cached_run(root, "scratch", target, _config(TRANSFER, seed), progress=progress)
    return tuned, scratch


def transfer_gain(root, seed, progress=None) -> tuple[float, float]:
    """``(finetuned, scratch)`` mean held-out dice on the target at equal step budget."""
    _, target = transfer_collection(root)
    scores = []
    for ckpt in transfer_runs(root, seed, progress):
        table = evaluate(Predictor.from_checkpoint(ckpt), target)
        scores.append(table.dataset_means()[SMALL])
    return scores[0], scores[1]
