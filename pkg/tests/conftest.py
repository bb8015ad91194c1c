import json

import numpy as np
import pytest

from mdseg.collection import load_manifest, write_volume


def make_collection(root, class_counts=(2, 1), cases_per_dataset=(2, 2), shape=(8, 8, 8),
                    seed=0, names=None):
    """Write a small random collection and return the manifest path."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    datasets, cases = [], []
    for k, (nc, n) in enumerate(zip(class_counts, cases_per_dataset)):
        cls = names[k] if names else [f"s{k}_{j}" for j in range(nc)]
        datasets.append({"id": k, "name": f"D{k}", "spacing": [1.0, 1.0, 1.0],
                         "classes": [{"name": c, "group_tags": []} for c in cls]})
        for i in range(n):
            img = rng.standard_normal(shape).astype(np.float32)
            write_volume(img, (1, 1, 1), root / f"d{k}c{i}.mtvol")
            masks = []
            for j in range(nc):
                write_volume((rng.random(shape) < 0.2).astype(np.uint8), (1, 1, 1),
                             root / f"d{k}c{i}m{j}.mtvol")
                masks.append(f"d{k}c{i}m{j}.mtvol")
            cases.append({"dataset_id": k, "image": f"d{k}c{i}.mtvol", "masks": masks,
                          "id": f"d{k}c{i}", "split": "held_out" if i == n - 1 else "train"})
    path = root / "manifest.json"
    path.write_text(json.dumps({"datasets": datasets, "cases": cases}))
    return path


@pytest.fixture
def small_collection(tmp_path):
    return load_manifest(make_collection(tmp_path / "coll"))


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
