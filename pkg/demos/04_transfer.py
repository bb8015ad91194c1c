"""Fine-tune a pretrained backbone on a new dataset with only five training cases.

A model is pretrained on two datasets, then gets fresh heads for the third
dataset's classes. The heads warm up on a frozen backbone before the whole
network trains. A network trained from scratch with the same number of steps
is the comparison. Per-class differences across seeds go into a paired
one-sided t-test.

    python demos/04_transfer.py --out /tmp/mdseg_demo
"""

import argparse
from pathlib import Path

from mdseg import experiments as ex
from mdseg.evalreport import evaluate, paired_one_sided_t_test
from mdseg.sampling import ScheduleSpec, learning_rate
from mdseg.trainer import Predictor

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--out", default="/tmp/mdseg_demo")
parser.add_argument("--seeds", type=int, nargs="+", default=list(ex.SEEDS))
args = parser.parse_args()
root = Path(args.out)

s = ScheduleSpec(mode="finetune", total_epochs=ex.TRANSFER.epochs)
print("fine-tuning learning rates (backbone / heads):")
for epoch in (0, 5, 9, 10, 35, 59, 60, 80, 99):
    print(f"  epoch {epoch:3d}: {learning_rate(s, epoch, 'backbone'):.5f} / "
          f"{learning_rate(s, epoch, 'head'):.5f}")

pretrain, target = ex.transfer_collection(root)
print(f"\npretraining on {len(pretrain.split('train'))} cases; target has "
      f"{len(target.split('train'))} training and {len(target.split('held_out'))} held-out cases")

paired_tuned, paired_scratch = [], []
for seed in args.seeds:
    tuned, scratch = ex.transfer_gain(root, seed, progress=print)
    print(f"seed {seed}: fine-tuned {tuned:.1f}, from scratch {scratch:.1f}")
    tables = [evaluate(Predictor.from_checkpoint(c), target)
              for c in ex.transfer_runs(root, seed)]
    for key, score in tables[0].class_means().items():
        paired_tuned.append(score)
        paired_scratch.append(tables[1].class_means()[key])

if len(paired_tuned) >= 2:
    p = paired_one_sided_t_test(paired_tuned, paired_scratch)
    print(f"\npaired one-sided t-test over {len(paired_tuned)} (class, seed) pairs: p = {p:.4f}")
