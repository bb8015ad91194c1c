import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdseg.losses import (DICE_EPS, LossBatch, baseline_softmax_ce_dice, batch_dice,
                          labelmap_from_multihot, multi_dataset_loss, sigmoid_bce)

from oracles import brute_force_loss


def random_batch(seed, shape=(2, 3, 4, 4, 4), p_annot=0.6, nonempty=False):
    rng = np.random.default_rng(seed)
    B, C = shape[:2]
    masks = (rng.random((B, C)) < p_annot).astype(np.float64)
    targets = (rng.random(shape) < 0.3).astype(np.float64) * masks[..., None, None, None]
    if nonempty:
        masks[:] = 1
        targets = (rng.random(shape) < 0.3).astype(np.float64)
        targets[:, :, 0, 0, 0] = 1
    logits = rng.standard_normal(shape) * 2
    return LossBatch(logits, targets, masks)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("shape", [(1, 1, 2, 2, 2), (2, 3, 3, 3, 3), (2, 3, 4, 4, 4)])
def test_matches_brute_force(seed, shape):
    batch = random_batch(seed, shape)
    for norm in ("annotated", "voxels"):
        lv = multi_dataset_loss(batch, bce_normalization=norm)
        oracle = brute_force_loss(batch.logits, batch.targets, batch.annotation_masks,
                                  normalization=norm)
        assert abs(lv.total - float(oracle)) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_matches_brute_force_without_eps(seed):
    batch = random_batch(seed, nonempty=True)
    lv = multi_dataset_loss(batch, eps=0.0)
    assert abs(lv.total - float(brute_force_loss(batch.logits, batch.targets,
                                                 batch.annotation_masks, eps=0.0))) < 1e-12


def test_per_class_terms_sum_to_total():
    lv = multi_dataset_loss(random_batch(1))
    assert lv.per_class.shape == (3, 2)
    assert np.isclose(lv.bce + lv.dice, lv.total, rtol=0, atol=1e-12)
    assert (lv.per_class[:, 1] <= 0).all()


def test_unannotated_class_contributes_nothing():
    batch = random_batch(2)
    batch.annotation_masks[:, 1] = 0
    batch.targets[:, 1] = 0
    lv = multi_dataset_loss(batch)
    assert (lv.per_class[1] == 0).all()
    assert not lv.voxel_gradient[:, 1].any()


def test_single_dataset_reduces_to_plain_loss():
    # all-ones annotation vector: ordinary BCE mean over all voxels plus batch dice
    batch = random_batch(3, nonempty=True)
    lv = multi_dataset_loss(batch)
    z, y = batch.logits, batch.targets
    p = 1 / (1 + np.exp(-z))
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean(axis=(0, 2, 3, 4))
    dice = 2 * (p * y).sum(axis=(0, 2, 3, 4)) / (p.sum(axis=(0, 2, 3, 4)) + y.sum(axis=(0, 2, 3, 4)) + DICE_EPS)
    assert np.isclose(lv.total, (bce - dice).sum(), rtol=0, atol=1e-12)


def test_bce_is_stable_for_large_logits():
    logits = np.array([[[[[800.0, -800.0]]]]])
    targets = np.array([[[[[0.0, 1.0]]]]])
    bce, grad = sigmoid_bce(logits, targets, np.ones((1, 1)))
    assert np.isfinite(bce).all() and np.isclose(bce[0], 800.0)
    assert np.isfinite(grad).all()


def test_zero_denominator_dice():
    probs = np.zeros((1, 2, 2, 2, 2))
    targets = np.zeros_like(probs)
    dice, grad = batch_dice(probs, targets, np.ones((1, 2)), eps=0.0)
    assert (dice == 0).all() and not grad.any()
    dice, grad = batch_dice(probs + 0.5, targets, np.zeros((1, 2)), eps=0.0)
    assert (dice == 0).all() and not grad.any()


def test_batch_validation():
    ok = random_batch(0)
    with pytest.raises(ValueError, match="binary"):
        LossBatch(ok.logits, ok.targets * 0.5 + 0.25, ok.annotation_masks)
    with pytest.raises(ValueError, match="shape"):
        LossBatch(ok.logits, ok.targets, ok.annotation_masks[:, :2])
    targets = ok.targets.copy()
    masks = ok.annotation_masks.copy()
    masks[0, 0] = 0
    targets[0, 0, 0, 0, 0] = 1
    with pytest.raises(ValueError, match="unannotated"):
        LossBatch(ok.logits, targets, masks)
    with pytest.raises(ValueError):
        batch_dice(np.full((1, 1, 1, 1, 1), 1.5), np.zeros((1, 1, 1, 1, 1)), np.ones((1, 1)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_gradient_zero_where_unannotated(seed):
    batch = random_batch(seed, shape=(3, 4, 2, 3, 2), p_annot=0.5)
    grad = multi_dataset_loss(batch).voxel_gradient
    off = batch.annotation_masks == 0
    assert (grad[off] == 0).all()


def test_labelmap_later_class_wins():
    t = np.zeros((2, 2, 1, 1))
    t[0, 0] = 1
    t[1, 0] = 1
    t[1, 1] = 1
    assert labelmap_from_multihot(t)[:, 0, 0].tolist() == [2, 2]


def test_softmax_baseline_brute_force():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((2, 3, 2, 2, 2))
    labels = rng.integers(0, 3, (2, 2, 2, 2))
    loss, grad, details = baseline_softmax_ce_dice(logits, labels)
    e = np.exp(logits)
    p = e / e.sum(axis=1, keepdims=True)
    ce = 0.0
    for idx in np.ndindex(labels.shape):
        b, rest = idx[0], idx[1:]
        ce -= np.log(p[(b, labels[idx]) + rest])
    ce /= labels.size
    dices = []
    for c in (1, 2):
        y = labels == c
        pc = p[:, c]
        dices.append(2 * (pc * y).sum() / (pc.sum() + y.sum() + DICE_EPS))
    assert np.isclose(loss, ce - np.mean(dices), rtol=0, atol=1e-12)
    assert np.isclose(details["ce"], ce, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        baseline_softmax_ce_dice(logits, labels + 3)
