"""How the multi-dataset loss treats classes a sample's dataset never labels.

A batch mixes samples from two datasets. Classes outside a sample's dataset
get no loss and no gradient, so the network is never told that an
unannotated structure is background. The second half compares batch-pooled
dice with per-image dice on a near-empty image.

    python demos/02_masked_loss.py
"""

import numpy as np

from mdseg.losses import LossBatch, batch_dice, multi_dataset_loss

rng = np.random.default_rng(0)

# 4 samples, 5 global classes: dataset A owns classes 0-1, dataset B owns 2-4
masks = np.array([[1, 1, 0, 0, 0],
                  [1, 1, 0, 0, 0],
                  [0, 0, 1, 1, 1],
                  [0, 0, 1, 1, 1]], dtype=float)
shape = (4, 5, 6, 6, 6)
targets = (rng.random(shape) < 0.2) * masks[:, :, None, None, None]
logits = rng.standard_normal(shape)

value = multi_dataset_loss(LossBatch(logits, targets, masks))
print(f"total loss {value.total:.4f} = bce {value.bce:.4f} + dice term {value.dice:.4f}")
for c, (bce, dice) in enumerate(value.per_class):
    print(f"  class {c}: bce {bce:.4f}  -dice {dice:.4f}")
g = value.voxel_gradient
print("largest |gradient| per (sample, class):")
print(np.abs(g).max(axis=(2, 3, 4)).round(6))

# changing the logits of an unannotated pair does not move the loss at all
bumped = logits.copy()
bumped[0, 3] += 10.0
same = multi_dataset_loss(LossBatch(bumped, targets, masks)).total
print(f"loss after pushing sample 0 / class 3 (unlabelled there): {same:.4f}")

# pooled versus per-image dice: one large structure, one 2-voxel structure
y = np.zeros((2, 1, 8, 8, 8))
y[0, 0, 2:6, 2:6, 2:6] = 1
y[1, 0, 0, 0, :2] = 1
pred = y.copy()
pred[1] = 0                                  # the tiny structure is missed
m = np.ones((2, 1))
pooled = 1 - batch_dice(pred, y, m)[0][0]
per_image = 1 - np.mean([batch_dice(pred[b:b + 1], y[b:b + 1], m[b:b + 1])[0][0]
                         for b in range(2)])
print(f"\nmissing a 2-voxel structure costs {pooled:.4f} with pooled dice "
      f"and {per_image:.4f} with per-image dice")
