"""Synthetic multi-dataset collections with conflicting annotation protocols.

Every generated image contains all configured structures, but each dataset
labels only a subset of them, and under its own protocol: a boundary margin
(6-connected dilation or erosion), optional removal of nested substructures,
and an optional axial extent. The unmodified support of every structure is
written alongside as neutral ground truth.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .collection import CollectionManifest, manifest_from_dict, write_volume

SHAPE_KINDS = ("sphere", "box", "blob")
HELD_OUT_FRACTION = 0.2
# blob boundaries wobble by up to sqrt(1 + BLOB_WOBBLE) of the nominal ellipsoid
BLOB_WOBBLE = 0.35
NEIGHBORHOOD_6 = ndimage.generate_binary_structure(3, 1)


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class StructureSpec:
    """A target structure. ``center`` and ``size`` are fractions of the volume.

    ``size`` holds semi-axes (sphere, blob) or half-extents (box). ``jitter``
    is the maximum per-case displacement of the center, also as a fraction.
    """

    id: str
    shape_kind: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    intensity_mean: float
    intensity_std: float = 0.0
    parent_id: str | None = None
    tags: tuple[str, ...] = ()
    jitter: float = 0.0

    def __post_init__(self):
        if self.shape_kind not in SHAPE_KINDS:
            raise PhantomError(f"{self.id}: unknown shape kind {self.shape_kind!r}")
        if self.intensity_std < 0:
            raise PhantomError(f"{self.id}: intensity_std must be >= 0")
        if len(self.center) != 3 or len(self.size) != 3 or min(self.size) <= 0:
            raise PhantomError(f"{self.id}: center and size need 3 entries, sizes > 0")


@dataclass(frozen=True)
class ProtocolVariant:
    margin_voxels: int = 0
    include_substructures: bool = True
    axial_crop: tuple[float, float] | None = None

    def __post_init__(self):
        if abs(self.margin_voxels) > 3:
            raise PhantomError("|margin_voxels| must be <= 3")
        if self.axial_crop is not None:
            lo, hi = self.axial_crop
            if not (0 <= lo < hi <= 1):
                raise PhantomError("axial_crop needs 0 <= z_min < z_max <= 1")

    @property
    def neutral(self) -> bool:
        return self.margin_voxels == 0 and self.include_substructures and self.axial_crop is None


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    structures: tuple[str, ...]
    protocols: tuple[ProtocolVariant, ...]
    case_count: int

    def __post_init__(self):
        if not self.structures:
            raise PhantomError(f"dataset {self.name} annotates no structure")
        if len(self.protocols) != len(self.structures):
            raise PhantomError(f"dataset {self.name}: one protocol per structure required")
        if self.case_count < 1:
            raise PhantomError(f"dataset {self.name}: case_count must be >= 1")


@dataclass(frozen=True)
class GenConfig:
    volume_shape: tuple[int, int, int]
    structures: tuple[StructureSpec, ...]
    datasets: tuple[DatasetSpec, ...]
    noise_std: float = 0.3
    seed: int = 0

    def __post_init__(self):
        ids = [s.id for s in self.structures]
        if len(set(ids)) != len(ids):
            raise PhantomError("structure ids must be unique")
        for s in self.structures:
            if s.parent_id is not None and s.parent_id not in ids:
                raise PhantomError(f"{s.id}: unknown parent {s.parent_id}")
        for d in self.datasets:
            for sid in d.structures:
                if sid not in ids:
                    raise PhantomError(f"dataset {d.name}: unknown structure {sid}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        try:
            return cls._from_dict(d)
        except (KeyError, TypeError) as e:
            raise PhantomError(f"malformed generator config: {type(e).__name__}: {e}") from e

    @classmethod
    def _from_dict(cls, d: dict) -> "GenConfig":
        structures = tuple(
            StructureSpec(**{**s, "center": tuple(s["center"]), "size": tuple(s["size"]),
                             "tags": tuple(s.get("tags", ()))})
            for s in d["structures"])
        datasets = []
        for ds in d["datasets"]:
            protocols = tuple(
                ProtocolVariant(p.get("margin_voxels", 0), p.get("include_substructures", True),
                                tuple(p["axial_crop"]) if p.get("axial_crop") else None)
                for p in ds["protocols"])
            datasets.append(DatasetSpec(ds["name"], tuple(ds["structures"]), protocols,
                                        int(ds["case_count"])))
        return cls(tuple(int(v) for v in d["volume_shape"]), structures, tuple(datasets),
                   float(d.get("noise_std", 0.3)), int(d.get("seed", 0)))


def load_gen_config(path) -> GenConfig:
    return GenConfig.from_dict(json.loads(Path(path).read_text()))


def default_config(seed=0) -> GenConfig:
    """Desk-scale geometry: 32^3 volumes, 4 structures, 3 datasets of 24/8/40 cases.

    ``organ`` is annotated by all three datasets with different protocols
    (as-is with its tumor, dilated by one voxel, eroded by one voxel); the
    vessel is annotated over its full length by one dataset and only in its
    upper half by another.
    """
    structures = (
        StructureSpec("organ", "blob", (0.42, 0.45, 0.5), (0.24, 0.22, 0.26), 2.0, 0.2,
                      jitter=0.05),
        StructureSpec("tumor", "sphere", (0.42, 0.45, 0.5), (0.09, 0.09, 0.09), -1.5, 0.2,
                      parent_id="organ", tags=("cancer", "difficult"), jitter=0.06),
        StructureSpec("kidney", "box", (0.76, 0.72, 0.45), (0.08, 0.1, 0.14), -1.0, 0.2,
                      jitter=0.04),
        StructureSpec("vessel", "box", (0.2, 0.8, 0.5), (0.05, 0.05, 0.4), 2.5, 0.1,
                      jitter=0.03),
    )
    neutral = ProtocolVariant()
    datasets = (
        DatasetSpec("organ_tumor", ("organ", "tumor"), (neutral, neutral), 24),
        DatasetSpec("small_multi", ("organ", "vessel", "kidney"),
                    (ProtocolVariant(margin_voxels=1), neutral, neutral), 8),
        DatasetSpec("large_multi", ("organ", "kidney", "vessel"),
                    (ProtocolVariant(margin_voxels=-1), neutral,
                     ProtocolVariant(axial_crop=(0.5, 1.0))), 40),
    )
    return GenConfig((32, 32, 32), structures, datasets, noise_std=0.3, seed=seed)


# --- geometry -------------------------------------------------------------------

def _grid(volume_shape):
    # voxel centers in fractional volume coordinates
    return np.meshgrid(*[(np.arange(n) + 0.5) / n for n in volume_shape], indexing="ij")


def _check_bounds(s: StructureSpec):
    reach = np.asarray(s.size) * (np.sqrt(1 + BLOB_WOBBLE) if s.shape_kind == "blob" else 1.0)
    c = np.asarray(s.center)
    if (c - reach < 0).any() or (c + reach > 1).any():
        raise PhantomError(f"structure {s.id} exceeds the volume bounds")


def structure_mask(s: StructureSpec, volume_shape, rng: np.random.Generator) -> np.ndarray:
    _check_bounds(s)
    g = _grid(volume_shape)
    rel = [(gi - ci) / si for gi, ci, si in zip(g, s.center, s.size)]
    if s.shape_kind == "box":
        return np.all([np.abs(r) <= 1 for r in rel], axis=0)
    d2 = rel[0] ** 2 + rel[1] ** 2 + rel[2] ** 2
    if s.shape_kind == "sphere":
        return d2 <= 1
    field = ndimage.gaussian_filter(rng.standard_normal(volume_shape),
                                    sigma=max(volume_shape) / 8, mode="wrap")
    field /= max(np.abs(field).max(), 1e-12)
    return d2 <= 1 + BLOB_WOBBLE * field


def _ordered(structures):
    """Parents before children."""
    done: list[StructureSpec] = []
    pending = list(structures)
    while pending:
        progressed = False
        for s in list(pending):
            if s.parent_id is None or any(d.id == s.parent_id for d in done):
                done.append(s)
                pending.remove(s)
                progressed = True
        if not progressed:
            raise PhantomError("cyclic parent relation among structures")
    return done


def generate_scene(rng: np.random.Generator, structures, volume_shape, noise_std):
    """Render one image and the full support mask of every structure.

    The image is the sum over structures of ``mask * N(mean, std)`` plus
    Gaussian noise clipped to three standard deviations. A nested structure
    is clipped to its parent's support.
    """
    volume_shape = tuple(int(n) for n in volume_shape)
    if min(volume_shape) < 8:
        raise PhantomError("every volume dimension must be >= 8")
    image = np.zeros(volume_shape)
    truth: dict[str, np.ndarray] = {}
    for s in _ordered(structures):
        mask = structure_mask(s, volume_shape, rng)
        if s.parent_id is not None:
            mask &= truth[s.parent_id]
        truth[s.id] = mask
        values = s.intensity_mean + s.intensity_std * rng.standard_normal(volume_shape)
        image += mask * values
    if noise_std > 0:
        image += np.clip(rng.standard_normal(volume_shape), -3, 3) * noise_std
    return image, {s.id: truth[s.id] for s in structures}


def morph(mask: np.ndarray, margin: int) -> np.ndarray:
    """Iterated 6-connected dilation (``margin > 0``) or erosion (``margin < 0``)."""
    mask = np.asarray(mask, dtype=bool)
    if margin > 0:
        return ndimage.binary_dilation(mask, NEIGHBORHOOD_6, iterations=margin)
    if margin < 0:
        return ndimage.binary_erosion(mask, NEIGHBORHOOD_6, iterations=-margin)
    return mask.copy()


def apply_protocol(full_truth_mask, substructure_masks, variant: ProtocolVariant) -> np.ndarray:
    """Derive one dataset's label for a structure from its neutral support."""
    out = morph(full_truth_mask, variant.margin_voxels)
    if not variant.include_substructures:
        for sub in substructure_masks:
            out &= ~np.asarray(sub, dtype=bool)
    if variant.axial_crop is not None:
        Z = out.shape[-1]
        z = (np.arange(Z) + 0.5) / Z
        keep = (z >= variant.axial_crop[0]) & (z < variant.axial_crop[1])
        out &= keep
    return out.astype(np.uint8)


# --- collections --------------------------------------------------------------------

def held_out(index: int, count: int) -> bool:
    """Deterministic 80/20 split: the last fifth of a dataset's cases is held out."""
    n_train = max(1, int(round(count * (1 - HELD_OUT_FRACTION)))) if count > 1 else 1
    return index >= n_train


def jitter_structures(rng: np.random.Generator, structures):
    out = []
    for s in structures:
        if s.jitter > 0:
            shift = rng.uniform(-s.jitter, s.jitter, 3)
            s = replace(s, center=tuple(float(c) for c in np.asarray(s.center) + shift))
        out.append(s)
    # children follow their parent's displacement so they stay nested
    by_id = {s.id: s for s in out}
    base = {s.id: s for s in structures}
    fixed = []
    for s in out:
        if s.parent_id is not None:
            dp = np.asarray(by_id[s.parent_id].center) - np.asarray(base[s.parent_id].center)
            own = np.asarray(s.center) - np.asarray(base[s.id].center)
            s = replace(s, center=tuple(float(c) for c in
                                        np.asarray(base[s.id].center) + dp + 0.5 * own))
        fixed.append(s)
    return fixed


def _zscore(image):
    std = image.std()
    if std == 0:
        return np.zeros_like(image, dtype=np.float32)
    return ((image - image.mean()) / std).astype(np.float32)


def _render_case(config: GenConfig, ds_index: int, case_index: int, global_index: int,
                 out_dir: Path) -> dict:
    ds = config.datasets[ds_index]
    rng = np.random.default_rng([config.seed, global_index])
    structures = jitter_structures(rng, config.structures)
    image, truth = generate_scene(rng, structures, config.volume_shape, config.noise_std)
    children = {s.id: [c.id for c in config.structures if c.parent_id == s.id]
                for s in config.structures}
    stem = f"ds{ds_index}_case{case_index:03d}"
    write_volume(_zscore(image), (1.0, 1.0, 1.0), out_dir / "volumes" / f"{stem}_img.mtvol")
    masks = []
    for j, (sid, proto) in enumerate(zip(ds.structures, ds.protocols)):
        m = apply_protocol(truth[sid], [truth[c] for c in children[sid]], proto)
        rel = f"volumes/{stem}_m{j}.mtvol"
        write_volume(m, (1.0, 1.0, 1.0), out_dir / rel)
        masks.append(rel)
    truth_paths = {}
    for sid, m in truth.items():
        rel = f"truth/{stem}_{sid}.mtvol"
        write_volume(m.astype(np.uint8), (1.0, 1.0, 1.0), out_dir / rel)
        truth_paths[sid] = rel
    return {
        "id": stem,
        "dataset_id": ds_index,
        "image": f"volumes/{stem}_img.mtvol",
        "masks": masks,
        "split": "held_out" if held_out(case_index, ds.case_count) else "train",
        "truth": truth_paths,
    }


def generate_collection(config: GenConfig, out_dir, workers: int = 1) -> CollectionManifest:
    """Render every case, write ``manifest.json``, ``volumes/`` and ``truth/``.

    Each case draws from its own stream seeded by ``(seed, global case index)``,
    so the output does not depend on ``workers``.
    """
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    (out_dir / "truth").mkdir(parents=True, exist_ok=True)
    tags = {s.id: sorted(s.tags) for s in config.structures}
    jobs = []
    g = 0
    for k, ds in enumerate(config.datasets):
        for i in range(ds.case_count):
            jobs.append((k, i, g))
            g += 1
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            cases = list(pool.map(lambda j: _render_case(config, *j, out_dir), jobs))
    else:
        cases = [_render_case(config, *j, out_dir) for j in jobs]
    raw = {
        "datasets": [
            {
                "id": k,
                "name": ds.name,
                "classes": [{"name": sid, "group_tags": tags[sid],
                             "protocol": asdict(p)}
                            for sid, p in zip(ds.structures, ds.protocols)],
                "spacing": [1.0, 1.0, 1.0],
            }
            for k, ds in enumerate(config.datasets)
        ],
        "cases": cases,
        "generator": config.to_dict(),
    }
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(raw, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, out_dir / "manifest.json")
    return manifest_from_dict(raw, root=out_dir.resolve())
