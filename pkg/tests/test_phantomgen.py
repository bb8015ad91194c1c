import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdseg.collection import annotation_mask_vector, load_case, load_manifest, read_volume
from mdseg.phantomgen import (GenConfig, PhantomError, ProtocolVariant, StructureSpec,
                              apply_protocol, default_config, generate_collection,
                              generate_scene, morph)

NEIGHBORS = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def brute_dilate(mask):
    out = mask.copy()
    X, Y, Z = mask.shape
    for x, y, z in itertools.product(range(X), range(Y), range(Z)):
        if mask[x, y, z]:
            for dx, dy, dz in NEIGHBORS:
                a, b, c = x + dx, y + dy, z + dz
                if 0 <= a < X and 0 <= b < Y and 0 <= c < Z:
                    out[a, b, c] = True
    return out


def brute_erode(mask):
    out = np.zeros_like(mask)
    X, Y, Z = mask.shape
    for x, y, z in itertools.product(range(X), range(Y), range(Z)):
        keep = mask[x, y, z]
        for dx, dy, dz in NEIGHBORS:
            a, b, c = x + dx, y + dy, z + dz
            inside = 0 <= a < X and 0 <= b < Y and 0 <= c < Z
            keep = keep and inside and mask[a, b, c]
        out[x, y, z] = keep
    return out


def brute_morph(mask, margin):
    mask = mask.astype(bool)
    for _ in range(abs(margin)):
        mask = brute_dilate(mask) if margin > 0 else brute_erode(mask)
    return mask


def test_centered_sphere_matches_ball_count():
    s = StructureSpec("ball", "sphere", (0.5, 0.5, 0.5), (0.25, 0.25, 0.25), 1.0)
    _, truth = generate_scene(np.random.default_rng(0), [s], (16, 16, 16), 0.0)
    # voxel i has center (i + 0.5) / 16; inside iff sum((2i - 15) / 8)^2 <= 1
    expected = sum(1 for i, j, k in itertools.product(range(16), repeat=3)
                   if (2 * i - 15) ** 2 + (2 * j - 15) ** 2 + (2 * k - 15) ** 2 <= 64)
    assert truth["ball"].sum() == expected


def test_empty_scene_is_zero():
    image, truth = generate_scene(np.random.default_rng(0), [], (8, 8, 8), 0.0)
    assert not image.any() and truth == {}


def test_scene_is_deterministic():
    cfg = default_config()
    a = generate_scene(np.random.default_rng(3), cfg.structures, (16, 16, 16), 0.3)
    b = generate_scene(np.random.default_rng(3), cfg.structures, (16, 16, 16), 0.3)
    assert a[0].tobytes() == b[0].tobytes()
    assert all(np.array_equal(a[1][k], b[1][k]) for k in a[1])


def test_noise_is_clipped():
    image, _ = generate_scene(np.random.default_rng(1), [], (32, 32, 32), 0.5)
    assert np.abs(image).max() <= 1.5 + 1e-12


def test_scene_errors():
    big = StructureSpec("big", "box", (0.5, 0.5, 0.5), (0.6, 0.1, 0.1), 1.0)
    with pytest.raises(PhantomError, match="bounds"):
        generate_scene(np.random.default_rng(0), [big], (16, 16, 16), 0.0)
    with pytest.raises(PhantomError):
        generate_scene(np.random.default_rng(0), [], (4, 16, 16), 0.0)
    with pytest.raises(PhantomError):
        StructureSpec("x", "sphere", (0.5,) * 3, (0.1,) * 3, 1.0, intensity_std=-1)
    with pytest.raises(PhantomError):
        ProtocolVariant(margin_voxels=4)
    with pytest.raises(PhantomError):
        ProtocolVariant(axial_crop=(0.6, 0.4))


def test_nested_structure_lies_inside_parent():
    cfg = default_config()
    for seed in range(5):
        _, truth = generate_scene(np.random.default_rng(seed), cfg.structures, (32, 32, 32), 0.3)
        assert truth["tumor"].any()
        assert not (truth["tumor"] & ~truth["organ"]).any()


def test_neutral_protocol_is_identity():
    rng = np.random.default_rng(0)
    mask = rng.random((9, 9, 9)) < 0.3
    assert np.array_equal(apply_protocol(mask, [], ProtocolVariant()), mask)


def test_cube_dilation_matches_oracle():
    mask = np.zeros((9, 9, 9), bool)
    mask[3:6, 3:6, 3:6] = True
    out = apply_protocol(mask, [], ProtocolVariant(margin_voxels=1))
    oracle = brute_dilate(mask)
    assert np.array_equal(out.astype(bool), oracle)
    assert out.sum() == oracle.sum() == 27 + 6 * 9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(-3, 3), st.sampled_from([0.2, 0.5, 0.8]))
def test_morphology_matches_brute_force(seed, margin, density):
    mask = np.random.default_rng(seed).random((7, 6, 8)) < density
    assert np.array_equal(morph(mask, margin), brute_morph(mask, margin))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3))
def test_opening_is_anti_extensive(seed, margin):
    mask = np.random.default_rng(seed).random((10, 10, 10)) < 0.6
    opened = brute_morph(brute_morph(mask, -margin), margin)
    assert not (opened & ~mask).any()


def test_exclude_substructures_removes_tumor():
    cfg = default_config()
    _, truth = generate_scene(np.random.default_rng(2), cfg.structures, (32, 32, 32), 0.0)
    organ = apply_protocol(truth["organ"], [truth["tumor"]],
                           ProtocolVariant(include_substructures=False))
    assert not (organ.astype(bool) & truth["tumor"]).any()
    assert organ.sum() == truth["organ"].sum() - truth["tumor"].sum()


def test_axial_crop_zeroes_lower_half():
    mask = np.zeros((8, 8, 16), bool)
    mask[3:5, 3:5, 1:15] = True
    out = apply_protocol(mask, [], ProtocolVariant(axial_crop=(0.5, 1.0)))
    assert not out[:, :, :8].any()
    assert np.array_equal(out[:, :, 8:].astype(bool), mask[:, :, 8:])


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    return generate_collection(default_config(seed=4), out), out


def test_collection_bookkeeping(desk):
    m, out = desk
    cfg = default_config()
    assert [len(d.classes) for d in m.datasets] == [len(d.structures) for d in cfg.datasets]
    assert [d.case_count for d in m.datasets] == [24, 8, 40]
    vecs = np.stack([annotation_mask_vector(d.dataset_id, m) for d in m.datasets])
    assert (vecs.sum(axis=0) == 1).all()
    assert (out / "manifest.json").is_file()
    assert len(list((out / "truth").iterdir())) == 72 * 4
    held = [sum(c.split == "held_out" for c in m.cases_of(k)) for k in range(3)]
    assert held == [5, 2, 8]
    # the held-out cases are the last ones of each dataset
    assert all(c.split == "held_out" for c in m.cases_of(2)[-8:])


def test_collection_masks_follow_protocols(desk):
    m, _ = desk
    cfg = default_config()
    for entry in m.cases[::7]:
        case = load_case(entry)
        ds = cfg.datasets[entry.dataset_id]
        truth = {k: read_volume(p)[0].astype(bool) for k, p in entry.truth}
        for j, (sid, proto) in enumerate(zip(ds.structures, ds.protocols)):
            expected = brute_morph(truth[sid], proto.margin_voxels)
            if proto.axial_crop is not None:
                expected[:, :, :16] = False
            assert np.array_equal(case.masks[j].astype(bool), expected), (entry.case_id, sid)


def test_opposite_margins_differ_on_shell(desk):
    m, _ = desk
    entry = m.cases_of(0)[0]
    organ = read_volume(dict(entry.truth)["organ"])[0].astype(bool)
    eroded, dilated = brute_morph(organ, -1), brute_morph(organ, 1)
    a = apply_protocol(organ, [], ProtocolVariant(margin_voxels=-1)).astype(bool)
    b = apply_protocol(organ, [], ProtocolVariant(margin_voxels=1)).astype(bool)
    assert np.array_equal(a, eroded) and np.array_equal(b, dilated)
    shell = a ^ b
    assert shell.any() and not (shell & eroded).any()


def test_same_dataset_overlap_only_when_nested(desk):
    m, _ = desk
    for entry in m.cases:
        masks = load_case(entry).masks
        overlap = masks.sum(axis=0) >= 2
        if entry.dataset_id != 0:   # only dataset 0 annotates organ and tumor together
            assert not overlap.any()


def test_generation_independent_of_workers(tmp_path):
    cfg = GenConfig.from_dict({**default_config().to_dict(), "datasets": [
        {"name": "a", "structures": ["organ", "tumor"], "protocols": [{}, {}], "case_count": 3}]})
    m1 = generate_collection(cfg, tmp_path / "serial", workers=1)
    m2 = generate_collection(cfg, tmp_path / "parallel", workers=3)
    for a, b in zip(m1.cases, m2.cases):
        for pa, pb in zip([a.image, *a.masks], [b.image, *b.masks]):
            assert open(pa, "rb").read() == open(pb, "rb").read()


def test_config_json_roundtrip(tmp_path):
    cfg = default_config(seed=9)
    assert GenConfig.from_dict(cfg.to_dict()) == cfg
    m = generate_collection(cfg, tmp_path / "g")
    again = load_manifest(tmp_path / "g" / "manifest.json")
    assert [c.image for c in again.cases] == [c.image for c in m.cases]
    img = load_case(again.cases[0]).image
    assert abs(float(img.mean())) < 1e-5 and abs(float(img.std()) - 1) < 1e-4
