"""Multi-dataset collection model: disjoint class namespaces, manifests, volume I/O.

Every dataset in a collection owns its own classes. Two classes are never
merged, even when they carry the same name, because each dataset may
delineate the structure under its own annotation protocol. Global class
order is dataset-major and fixed once the manifest is loaded.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ManifestError",
    "VolumeFormatError",
    "ClassRef",
    "DatasetDescriptor",
    "CaseEntry",
    "CollectionManifest",
    "Case",
    "load_manifest",
    "save_manifest",
    "manifest_from_dict",
    "annotation_mask_vector",
    "load_case",
    "read_volume",
    "write_volume",
    "subset_manifest",
    "manifest_to_dict",
    "volume_file_size",
]


class ManifestError(ValueError):
    pass


class VolumeFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ClassRef:
    dataset_id: int
    local_index: int
    name: str
    group_tags: frozenset[str] = frozenset()

    @property
    def key(self) -> tuple[int, int]:
        return (self.dataset_id, self.local_index)


@dataclass(frozen=True)
class DatasetDescriptor:
    dataset_id: int
    name: str
    classes: tuple[ClassRef, ...]
    case_count: int
    voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class CaseEntry:
    """One manifest row. Paths are absolute after loading."""

    dataset_id: int
    image: str
    masks: tuple[str, ...]
    case_id: str = ""
    split: str = "train"
    truth: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class CollectionManifest:
    datasets: tuple[DatasetDescriptor, ...]
    global_classes: tuple[ClassRef, ...]
    cases: tuple[CaseEntry, ...]
    root: str = ""

    @property
    def num_classes(self) -> int:
        return len(self.global_classes)

    def dataset(self, dataset_id: int) -> DatasetDescriptor:
        for d in self.datasets:
            if d.dataset_id == dataset_id:
                return d
        raise ManifestError(f"unknown dataset_id {dataset_id}")

    def class_offset(self, dataset_id: int) -> int:
        offset = 0
        for d in self.datasets:
            if d.dataset_id == dataset_id:
                return offset
            offset += len(d.classes)
        raise ManifestError(f"unknown dataset_id {dataset_id}")

    def global_index(self, dataset_id: int, local_index: int) -> int:
        d = self.dataset(dataset_id)
        if not 0 <= local_index < len(d.classes):
            raise ManifestError(f"dataset {dataset_id} has no class {local_index}")
        return self.class_offset(dataset_id) + local_index

    def cases_of(self, dataset_id: int, split: str | None = None) -> list[CaseEntry]:
        return [c for c in self.cases
                if c.dataset_id == dataset_id and (split is None or c.split == split)]

    def split(self, split: str) -> list[CaseEntry]:
        return [c for c in self.cases if c.split == split]


@dataclass(frozen=True)
class Case:
    """An image with one binary mask per local class of its dataset.

    ``masks`` has shape ``(n_local_classes, X, Y, Z)``; masks of different
    classes may overlap.
    """

    dataset_id: int
    image: np.ndarray
    masks: np.ndarray
    case_id: str = ""
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ValueError(f"image must be 3-D, got shape {self.image.shape}")
        if self.masks.ndim != 4 or self.masks.shape[1:] != self.image.shape:
            raise ValueError(
                f"masks shape {self.masks.shape} does not match image {self.image.shape}")
        if self.masks.size and not np.isin(self.masks, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")


def manifest_from_dict(raw: dict, root: str | os.PathLike = "") -> CollectionManifest:
    """Validate a manifest mapping and build the immutable structure."""
    if not isinstance(raw, dict) or "datasets" not in raw or "cases" not in raw:
        raise ManifestError("schema violation: manifest needs 'datasets' and 'cases'")
    root = str(root)

    seen_ids: set[int] = set()
    partial = []
    for d in raw["datasets"]:
        try:
            ds_id = int(d["id"])
            name = str(d["name"])
            classes_raw = d["classes"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"schema violation in dataset entry: {exc!r}") from None
        if ds_id in seen_ids:
            raise ManifestError(f"duplicate dataset_id {ds_id}")
        seen_ids.add(ds_id)
        if not classes_raw:
            raise ManifestError(f"dataset {ds_id} declares no classes")
        classes = []
        for j, c in enumerate(classes_raw):
            if isinstance(c, str):
                c = {"name": c}
            if "name" not in c:
                raise ManifestError(f"schema violation: class {j} of dataset {ds_id} has no name")
            classes.append(ClassRef(ds_id, j, str(c["name"]),
                                    frozenset(c.get("group_tags", ()))))
        spacing = tuple(float(s) for s in d.get("spacing", (1.0, 1.0, 1.0)))
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ManifestError(f"dataset {ds_id}: spacing must be 3 positive reals")
        partial.append((ds_id, name, tuple(classes), spacing))

    n_classes = {p[0]: len(p[2]) for p in partial}
    cases = []
    for idx, c in enumerate(raw["cases"]):
        try:
            ds_id = int(c["dataset_id"])
            image = c["image"]
            masks = list(c["masks"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"schema violation in case {idx}: {exc!r}") from None
        if ds_id not in n_classes:
            raise ManifestError(f"case {idx} references unknown dataset {ds_id}")
        if len(masks) != n_classes[ds_id]:
            raise ManifestError(
                f"mask count mismatch in case {idx}: dataset {ds_id} has "
                f"{n_classes[ds_id]} classes, case lists {len(masks)} masks")
        split = c.get("split", "train")
        if split not in ("train", "held_out"):
            raise ManifestError(f"case {idx}: unknown split {split!r}")
        truth = tuple(sorted((str(k), _resolve(root, v))
                             for k, v in c.get("truth", {}).items()))
        cases.append(CaseEntry(
            dataset_id=ds_id,
            image=_resolve(root, image),
            masks=tuple(_resolve(root, m) for m in masks),
            case_id=str(c.get("id", f"case_{idx:04d}")),
            split=split,
            truth=truth,
        ))

    counts = {ds_id: 0 for ds_id in n_classes}
    for c in cases:
        counts[c.dataset_id] += 1
    datasets = []
    for ds_id, name, classes, spacing in partial:
        if counts[ds_id] == 0:
            raise ManifestError(f"dataset {ds_id} has no cases")
        datasets.append(DatasetDescriptor(ds_id, name, classes, counts[ds_id], spacing))
    global_classes = tuple(c for d in datasets for c in d.classes)
    return CollectionManifest(tuple(datasets), global_classes, tuple(cases), root)


def _resolve(root: str, p: str) -> str:
    if not root or os.path.isabs(p):
        return str(p)
    return os.path.normpath(os.path.join(root, p))


def load_manifest(path: str | os.PathLike) -> CollectionManifest:
    """Load and validate a JSON manifest; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"schema violation: invalid JSON ({exc})") from None
    return manifest_from_dict(raw, root=path.parent.resolve())


def manifest_to_dict(manifest: CollectionManifest) -> dict:
    root = manifest.root

    def rel(p: str) -> str:
        return os.path.relpath(p, root) if root else p

    return {
        "datasets": [
            {
                "id": d.dataset_id,
                "name": d.name,
                "classes": [{"name": c.name, "group_tags": sorted(c.group_tags)}
                            for c in d.classes],
                "spacing": list(d.voxel_spacing),
            }
            for d in manifest.datasets
        ],
        "cases": [
            {
                "id": c.case_id,
                "dataset_id": c.dataset_id,
                "image": rel(c.image),
                "masks": [rel(m) for m in c.masks],
                "split": c.split,
                "truth": {k: rel(v) for k, v in c.truth},
            }
            for c in manifest.cases
        ],
    }


def save_manifest(manifest: CollectionManifest, path: str | os.PathLike) -> None:
    path = Path(path)
    if manifest.root and Path(manifest.root).resolve() != path.parent.resolve():
        manifest = subset_manifest(manifest, root=str(path.parent.resolve()))
    path.write_text(json.dumps(manifest_to_dict(manifest), indent=2, sort_keys=True) + "\n")


def subset_manifest(manifest: CollectionManifest,
                    dataset_ids: Iterable[int] | None = None,
                    case_filter=None, root: str | None = None) -> CollectionManifest:
    """Restrict a manifest to some datasets and/or cases, re-validating the result.

    ``case_filter`` receives each :class:`CaseEntry` and returns whether to keep it.
    """
    keep = None if dataset_ids is None else set(dataset_ids)
    raw = manifest_to_dict(manifest)
    # paths in ``raw`` are relative to the old root; make them absolute first
    old = manifest.root
    for c, entry in zip(raw["cases"], manifest.cases):
        c["image"] = entry.image
        c["masks"] = list(entry.masks)
        c["truth"] = dict(entry.truth)
        c["_keep"] = (keep is None or entry.dataset_id in keep) and (
            case_filter is None or case_filter(entry))
    raw["cases"] = [c for c in raw["cases"] if c.pop("_keep")]
    if keep is not None:
        raw["datasets"] = [d for d in raw["datasets"] if d["id"] in keep]
    out = manifest_from_dict(raw)
    return CollectionManifest(out.datasets, out.global_classes, out.cases,
                              root if root is not None else old)


def annotation_mask_vector(dataset_id: int, manifest: CollectionManifest) -> np.ndarray:
    """Binary vector over global classes: 1 where the class belongs to ``dataset_id``."""
    d = manifest.dataset(dataset_id)
    vec = np.zeros(manifest.num_classes, dtype=np.uint8)
    start = manifest.class_offset(dataset_id)
    vec[start:start + len(d.classes)] = 1
    return vec


def load_case(entry: CaseEntry, manifest: CollectionManifest | None = None) -> Case:
    image, spacing = read_volume(entry.image)
    masks = np.stack([read_volume(m)[0] for m in entry.masks]).astype(np.uint8)
    return Case(entry.dataset_id, image.astype(np.float32), masks, entry.case_id, spacing)


# --- MTVOL volume files -------------------------------------------------------

_MAGIC = b"MTVL"
_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}
# magic, version, dtype code, shape (3 x u64), spacing (3 x f64)
_HEADER = struct.Struct("<4sII3Q3d")


def write_volume(grid: np.ndarray, spacing: Sequence[float], path: str | os.PathLike) -> None:
    """Write a float32 or uint8 3-D grid; the payload is X-fastest (Fortran order)."""
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise VolumeFormatError(f"volume must be 3-D, got {grid.ndim}-D")
    if grid.dtype == np.bool_:
        grid = grid.astype(np.uint8)
    if grid.dtype not in _CODES:
        raise VolumeFormatError(f"unsupported dtype {grid.dtype}; use float32 or uint8")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or min(spacing) <= 0:
        raise VolumeFormatError("spacing must be 3 positive reals")
    code = _CODES[grid.dtype]
    header = _HEADER.pack(_MAGIC, _VERSION, code, *grid.shape, *spacing)
    payload = np.asarray(grid, dtype=_DTYPES[code]).tobytes(order="F")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def read_volume(path: str | os.PathLike) -> tuple[np.ndarray, tuple[float, float, float]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        if blob[:4] != _MAGIC[:len(blob[:4])]:
            raise VolumeFormatError(f"{path}: bad magic")
        raise VolumeFormatError(f"{path}: truncated header")
    magic, version, code, x, y, z, sx, sy, sz = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise VolumeFormatError(f"{path}: unknown dtype code {code}")
    if min(x, y, z) <= 0:
        raise VolumeFormatError(f"{path}: non-positive dimensions {(x, y, z)}")
    dtype = _DTYPES[code]
    n = x * y * z * dtype.itemsize
    payload = blob[_HEADER.size:]
    if len(payload) < n:
        raise VolumeFormatError(f"{path}: truncated payload ({len(payload)} of {n} bytes)")
    grid = np.frombuffer(payload[:n], dtype=dtype).reshape((x, y, z), order="F")
    return np.ascontiguousarray(grid.astype(dtype.newbyteorder("="))), (sx, sy, sz)


def volume_file_size(shape: Sequence[int], dtype=np.float32) -> int:
    return _HEADER.size + int(np.prod(shape)) * np.dtype(dtype).itemsize
