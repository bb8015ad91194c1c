"""Generate the built-in phantom collection and look at what each dataset labels.

Every image holds the same four structures, but each dataset annotates only
some of them and under its own protocol. This script prints the class layout,
how far apart the protocols are on the same structure, and the case sampling
probabilities that balance the three dataset sizes.

    python demos/01_conflicting_protocols.py --out /tmp/mdseg_demo
"""

import argparse
from pathlib import Path

import numpy as np

from mdseg.collection import load_manifest, read_volume
from mdseg.evalreport import dice_score
from mdseg.phantomgen import apply_protocol, default_config, generate_collection
from mdseg.sampling import build_sampler

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--out", default="/tmp/mdseg_demo")
args = parser.parse_args()

config = default_config(seed=0)
root = Path(args.out) / "desk_s0"
if (root / "manifest.json").is_file():
    manifest = load_manifest(root / "manifest.json")
else:
    manifest = generate_collection(config, root)
print(f"{len(manifest.cases)} cases in {root}")

print("\nglobal class layout (dataset-major):")
for g, c in enumerate(manifest.global_classes):
    ds = config.datasets[c.dataset_id]
    proto = ds.protocols[c.local_index]
    rule = []
    if proto.margin_voxels:
        rule.append(f"margin {proto.margin_voxels:+d}")
    if proto.axial_crop:
        rule.append(f"z in {proto.axial_crop}")
    print(f"  {g}: {ds.name:<12} {c.name:<7} {', '.join(rule) or 'as is'}")

# the same organ under the dilated and eroded protocols
entry = manifest.cases[0]
truth = {k: read_volume(v)[0].astype(bool) for k, v in entry.truth}
plus = apply_protocol(truth["organ"], [truth["tumor"]], config.datasets[1].protocols[0])
minus = apply_protocol(truth["organ"], [truth["tumor"]], config.datasets[2].protocols[0])
print(f"\norgan in {entry.case_id}: {truth['organ'].sum()} voxels as is, "
      f"{plus.sum()} dilated, {minus.sum()} eroded")
print(f"dice between the two protocols: {dice_score(plus, minus):.1f}")

vessel = truth["vessel"]
cropped = apply_protocol(vessel, [], config.datasets[2].protocols[2])
print(f"vessel: {vessel.sum()} voxels in full, {cropped.sum()} in the upper half only")

sampler = build_sampler(manifest)
counts = {d.dataset_id: len(manifest.cases_of(d.dataset_id, "train")) for d in manifest.datasets}
print("\ntraining cases and draw probability per dataset:")
for k, p in sampler.dataset_probabilities().items():
    print(f"  dataset {k}: {counts[k]:3d} cases  p = {p:.3f}  "
          f"(proportional share {counts[k] / sum(counts.values()):.3f})")
per_case = {k: p / counts[k] for k, p in sampler.dataset_probabilities().items()}
ratio = per_case[1] / per_case[2]
print(f"a small-dataset case is drawn {ratio:.2f}x as often as a large-dataset case "
      f"(sqrt({counts[2]}/{counts[1]}) = {np.sqrt(counts[2] / counts[1]):.2f})")
