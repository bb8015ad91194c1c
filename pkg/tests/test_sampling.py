import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from mdseg.collection import Case, manifest_from_dict
from mdseg.sampling import (ScheduleSpec, build_sampler, embed_targets, extract_patch,
                            learning_rate, sample_batch)


def sized_manifest(sizes, classes=None):
    classes = classes or [1] * len(sizes)
    return manifest_from_dict({
        "datasets": [{"id": k, "name": f"D{k}", "classes": [f"c{j}" for j in range(c)],
                      "spacing": [1, 1, 1]} for k, c in enumerate(classes)],
        "cases": [{"dataset_id": k, "image": f"i{k}_{i}", "masks": ["m"] * classes[k]}
                  for k, n in enumerate(sizes) for i in range(n)],
    })


# dataset sizes of three training sets: 131, 30 and 210 images
TABLE_SIZES = (131, 30, 210)


def test_dataset_probabilities_are_sqrt_n():
    s = build_sampler(sized_manifest(TABLE_SIZES), split=None)
    probs = s.dataset_probabilities()
    roots = [math.sqrt(n) for n in TABLE_SIZES]
    for k, r in enumerate(roots):
        assert probs[k] == pytest.approx(r / sum(roots), abs=1e-15)
    # quoted to four digits; the middle one is truncated (0.174355...)
    assert np.allclose([probs[k] for k in range(3)], [0.3643, 0.1743, 0.4613], rtol=0, atol=1e-4)
    assert s.probabilities.sum() == pytest.approx(1, abs=1e-15)
    assert (s.probabilities > 0).all()


def test_cases_within_dataset_are_exchangeable():
    s = build_sampler(sized_manifest((5, 9)), split=None)
    for k in range(2):
        p = s.probabilities[np.array(s.dataset_ids) == k]
        assert np.all(p == p[0])


def test_empirical_frequencies():
    m = sized_manifest(TABLE_SIZES)
    s = build_sampler(m, split=None)
    picks = sample_batch(s, 100_000, np.random.default_rng(0))
    counts = np.bincount([m.cases[i].dataset_id for i in picks], minlength=3) / 100_000
    assert np.abs(counts - np.array([0.3643, 0.1743, 0.4613])).max() < 0.01


def test_symmetric_and_single_dataset():
    probs = build_sampler(sized_manifest((10, 10)), split=None).dataset_probabilities()
    assert probs[0] == pytest.approx(0.5) and probs[1] == pytest.approx(0.5)
    s = build_sampler(sized_manifest((7,)), split=None)
    assert np.allclose(s.probabilities, 1 / 7)


def test_batches_are_deterministic_with_replacement():
    s = build_sampler(sized_manifest((2, 3)), split=None)
    a = sample_batch(s, 4, np.random.default_rng(5))
    b = sample_batch(s, 4, np.random.default_rng(5))
    assert a == b and len(a) == 4
    many = sample_batch(s, 50, np.random.default_rng(1))
    assert len(set(many)) < 50
    with pytest.raises(ValueError):
        sample_batch(s, 0, np.random.default_rng(0))


def test_split_filter_and_empty():
    m = sized_manifest((3,))
    with pytest.raises(ValueError):
        build_sampler(m, split="held_out")


def _case(shape=(20, 20, 20), dataset_id=0, classes=2, voxel=None):
    masks = np.zeros((classes,) + shape, np.uint8)
    if voxel is not None:
        masks[(0,) + voxel] = 1
    image = np.arange(np.prod(shape), dtype=np.float32).reshape(shape)
    return Case(dataset_id, image, masks, "c")


def test_forced_foreground_contains_the_voxel():
    m = sized_manifest((1, 1), classes=[2, 1])
    case = _case(voxel=(17, 2, 9))
    rng = np.random.default_rng(0)
    for _ in range(50):
        img, tgt, vec = extract_patch(case, m, (8, 8, 8), rng, fg_bias=1.0)
        assert tgt[0].sum() == 1
        assert case.image[17, 2, 9] in img


def test_forced_foreground_samples_classes_evenly():
    # a big structure and a single voxel: both classes should anchor patches equally often
    m = sized_manifest((1,), classes=[2])
    case = _case(shape=(32, 32, 32))
    case.masks[0, :16] = 1
    case.masks[1, 30, 30, 30] = 1
    rng = np.random.default_rng(1)
    hits = sum(extract_patch(case, m, (4, 4, 4), rng, fg_bias=1.0)[1][1].any()
               for _ in range(400))
    assert 160 < hits < 240


def test_unforced_corners_are_uniform():
    # 19^3 case with 16^3 patches: 4 valid corner positions per axis
    m = sized_manifest((1,), classes=[1])
    case = _case(shape=(19, 19, 19), classes=1)
    rng = np.random.default_rng(2)
    counts = np.zeros(64)
    for _ in range(6400):
        img, _, _ = extract_patch(case, m, (16, 16, 16), rng, fg_bias=0.0)
        x, y, z = np.unravel_index(int(img[0, 0, 0]), (19, 19, 19))
        counts[x * 16 + y * 4 + z] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_embedding_into_global_classes():
    m = sized_manifest((1, 1), classes=[2, 1])
    case = _case(shape=(8, 8, 8), voxel=(1, 1, 1))
    case.masks[1, 2, 2, 2] = 1
    tgt, vec = embed_targets(case, m)
    assert vec.tolist() == [1, 1, 0]
    assert tgt.shape == (3, 8, 8, 8) and not tgt[2].any() and tgt[:2].sum() == 2
    other = Case(1, case.image, np.ones((1, 8, 8, 8), np.uint8), "b")
    tgt, vec = embed_targets(other, m)
    assert vec.tolist() == [0, 0, 1] and not tgt[:2].any()


def test_small_case_is_padded():
    m = sized_manifest((1,), classes=[2])
    case = _case(shape=(6, 8, 8), voxel=(5, 0, 0))
    img, tgt, _ = extract_patch(case, m, (8, 8, 8), np.random.default_rng(0), fg_bias=1.0)
    assert img.shape == (8, 8, 8) and tgt.shape == (2, 8, 8, 8)
    assert np.array_equal(img[6], img[5]) and not tgt[:, 6:].any()


def test_standard_schedule_values():
    s = ScheduleSpec("standard", base_lr=0.01, total_epochs=1000)
    assert learning_rate(s, 0, "backbone") == 0.01
    assert learning_rate(s, 500, "head") == pytest.approx(0.01 * 0.5 ** 0.9, rel=1e-12)
    assert round(learning_rate(s, 500, "backbone"), 6) == 0.005359


def test_finetune_schedule_phases():
    s = ScheduleSpec("finetune", base_lr=0.01, total_epochs=1000)
    assert learning_rate(s, 5, "backbone") == 0.0
    assert learning_rate(s, 5, "head") == pytest.approx(0.006)
    for e in range(10):
        assert learning_rate(s, e, "backbone") == 0.0
    assert learning_rate(s, 10, "backbone") == pytest.approx(0.01 / 50)
    assert learning_rate(s, 59, "head") == pytest.approx(0.01)
    expected = 0.01 * (1 - 0 / 940) ** 0.9
    assert learning_rate(s, 60, "backbone") == learning_rate(s, 60, "head") == expected
    assert learning_rate(s, 500, "head") == pytest.approx(0.01 * (1 - 440 / 940) ** 0.9)


@given(st.sampled_from(["standard", "finetune"]), st.integers(61, 400),
       st.sampled_from(["backbone", "head"]))
def test_schedule_monotone_within_phases(mode, total, role):
    s = ScheduleSpec(mode, total_epochs=total)
    lrs = [learning_rate(s, e, role) for e in range(total)]
    assert min(lrs) >= 0
    bounds = [0, total] if mode == "standard" else [0, 10, 60, total]
    for lo, hi in zip(bounds, bounds[1:]):
        seg = np.array(lrs[lo:hi])
        d = np.diff(seg)
        rising = mode == "finetune" and hi <= 60
        assert (d >= 0).all() if rising else (d <= 0).all()


def test_schedule_errors():
    s = ScheduleSpec(total_epochs=10)
    with pytest.raises(ValueError):
        learning_rate(s, 10)
    with pytest.raises(ValueError):
        learning_rate(s, -1)
    with pytest.raises(ValueError):
        ScheduleSpec("finetune", total_epochs=60)
    with pytest.raises(ValueError):
        learning_rate(s, 0, "decoder")
