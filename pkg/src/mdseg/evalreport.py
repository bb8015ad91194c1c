"""Per-class dice, dataset and group aggregates, paired significance tests, CSV reports."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .collection import CollectionManifest, load_case

DIFFICULT_THRESHOLD = 75.0
RULE_KINDS = ("all", "dataset_average", "threshold_difficult", "tag")

__all__ = [
    "DiceRow", "EvalTable", "GroupRule", "SummaryRow", "dice_score", "evaluate",
    "aggregate", "paired_one_sided_t_test", "write_report", "default_rules",
]


def dice_score(pred_mask, gt_mask) -> float:
    """Dice in [0, 100]; two empty masks score 100."""
    p = np.asarray(pred_mask)
    g = np.asarray(gt_mask)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    for a, what in ((p, "prediction"), (g, "ground truth")):
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"{what} mask must be binary")
    p = p.astype(bool)
    g = g.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 100.0
    return 100.0 * 2 * int((p & g).sum()) / denom


@dataclass(frozen=True)
class DiceRow:
    dataset_id: int
    local_index: int
    class_name: str
    case_id: str
    dice: float
    tags: frozenset = frozenset()

    @property
    def key(self) -> tuple[int, int]:
        return (self.dataset_id, self.local_index)


@dataclass
class EvalTable:
    rows: list[DiceRow] = field(default_factory=list)

    def __post_init__(self):
        for r in self.rows:
            self._check(r)

    @staticmethod
    def _check(r: DiceRow):
        if not 0 <= r.dice <= 100:
            raise ValueError(f"dice {r.dice} outside [0, 100]")

    def add(self, row: DiceRow):
        self._check(row)
        self.rows.append(row)

    def class_keys(self) -> list[tuple[int, int]]:
        return sorted({r.key for r in self.rows})

    def class_names(self) -> dict[tuple[int, int], str]:
        return {r.key: r.class_name for r in self.rows}

    def class_tags(self) -> dict[tuple[int, int], frozenset]:
        return {r.key: r.tags for r in self.rows}

    def class_scores(self, key) -> list[float]:
        return [r.dice for r in self.rows if r.key == key]

    def class_means(self) -> dict[tuple[int, int], float]:
        return {k: float(np.mean(self.class_scores(k))) for k in self.class_keys()}

    def dataset_means(self) -> dict[int, float]:
        """Mean of each dataset's class means (not pooled over cases)."""
        by_ds: dict[int, list[float]] = {}
        for (ds, _), m in self.class_means().items():
            by_ds.setdefault(ds, []).append(m)
        return {ds: float(np.mean(v)) for ds, v in sorted(by_ds.items())}

    def restrict(self, dataset_ids) -> "EvalTable":
        keep = set(dataset_ids)
        return EvalTable([r for r in self.rows if r.dataset_id in keep])


@dataclass(frozen=True)
class GroupRule:
    kind: str
    threshold: float = DIFFICULT_THRESHOLD
    reference: EvalTable | None = None
    tag: str | None = None
    label: str | None = None

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown group rule {self.kind!r}")
        if self.kind == "threshold_difficult" and self.reference is None:
            raise ValueError("threshold_difficult needs a reference table")
        if self.kind == "tag" and not self.tag:
            raise ValueError("tag rule needs a tag")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind == "tag":
            return f"tag:{self.tag}"
        if self.kind == "threshold_difficult":
            return f"difficult<{self.threshold:g}"
        return self.kind


@dataclass(frozen=True)
class SummaryRow:
    group: str
    mean_dice: float
    n_classes: int
    classes: tuple = ()


def _mean(values) -> float:
    return float(np.mean(values)) if len(values) else float("nan")


def aggregate(table: EvalTable, rule: GroupRule) -> SummaryRow:
    means = table.class_means()
    if rule.kind == "all":
        keys = sorted(means)
        return SummaryRow(rule.name, _mean([means[k] for k in keys]), len(keys), tuple(keys))
    if rule.kind == "dataset_average":
        ds = table.dataset_means()
        return SummaryRow(rule.name, _mean(list(ds.values())), len(means), tuple(sorted(means)))
    if rule.kind == "threshold_difficult":
        ref = rule.reference.class_means()
        keys = sorted(k for k in means if k in ref and ref[k] < rule.threshold)
    else:
        tags = table.class_tags()
        keys = sorted(k for k in means if rule.tag in tags[k])
    return SummaryRow(rule.name, _mean([means[k] for k in keys]), len(keys), tuple(keys))


def default_rules(reference: EvalTable | None = None, tags=("cancer",)) -> list[GroupRule]:
    rules = [GroupRule("all"), GroupRule("dataset_average")]
    if reference is not None:
        rules.append(GroupRule("threshold_difficult", reference=reference))
    rules += [GroupRule("tag", tag=t) for t in tags]
    return rules


def evaluate(model, manifest: CollectionManifest, split="held_out", datasets=None,
             workers=1) -> EvalTable:
    """Score every annotated class of every case in ``split``.

    ``model`` maps an image volume to multi-hot masks over ``manifest``'s global
    classes (a ``Predictor`` or any callable); a bare ``Network`` is wrapped as
    a sigmoid predictor. Each class is compared with its own dataset's masks.
    """
    from .ndnet import Network
    from .trainer import Predictor

    if isinstance(model, Network):
        model = Predictor(model)
    expected = getattr(model, "num_classes", None)
    if expected is not None and expected != manifest.num_classes:
        raise ValueError(f"model predicts {expected} classes, manifest has "
                         f"{manifest.num_classes}")
    entries = [c for c in manifest.cases
               if (split is None or c.split == split)
               and (datasets is None or c.dataset_id in datasets)]
    if not entries:
        raise ValueError(f"no cases in split {split!r}")

    def score(entry):
        case = load_case(entry)
        pred = np.asarray(model(case.image))
        if pred.shape != (manifest.num_classes,) + case.image.shape:
            raise ValueError(f"prediction shape {pred.shape} for case {entry.case_id}")
        start = manifest.class_offset(entry.dataset_id)
        ds = manifest.dataset(entry.dataset_id)
        return [DiceRow(entry.dataset_id, j, cref.name, entry.case_id,
                        dice_score(pred[start + j], case.masks[j]), cref.group_tags)
                for j, cref in enumerate(ds.classes)]

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            per_case = list(pool.map(score, entries))
    else:
        per_case = [score(e) for e in entries]
    return EvalTable([r for rows in per_case for r in rows])


def _t_sf(t: float, df: int) -> float:
    """Upper tail of Student's t via the regularized incomplete beta function."""
    x = df / (df + t * t)
    tail = 0.5 * special.betainc(df / 2, 0.5, x)
    return float(tail if t >= 0 else 1 - tail)


def paired_one_sided_t_test(scores_a, scores_b) -> float:
    """p-value for H1: mean(a - b) > 0, pairing entries by position."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("scores must be 1-D sequences of equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0:
        if mean == 0:
            return 0.5
        return 0.0 if mean > 0 else 1.0
    t = mean / (sd / math.sqrt(n))
    return _t_sf(t, n - 1)


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, path)


def write_report(table: EvalTable, aggregates, path) -> dict[str, Path]:
    """Write ``per_class.csv``, ``per_dataset.csv`` and ``groups.csv`` into ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    names = table.class_names()
    means = table.class_means()
    per_class = [(ds, names[(ds, j)], _fmt(means[(ds, j)]), len(table.class_scores((ds, j))))
                 for ds, j in table.class_keys()]
    per_dataset = [(ds, _fmt(m)) for ds, m in table.dataset_means().items()]
    groups = [(a.group, _fmt(a.mean_dice), a.n_classes) for a in aggregates]
    files = {
        "per_class": out / "per_class.csv",
        "per_dataset": out / "per_dataset.csv",
        "groups": out / "groups.csv",
    }
    _write_csv(files["per_class"], ("dataset_id", "class_name", "mean_dice", "n_cases"), per_class)
    _write_csv(files["per_dataset"], ("dataset_id", "mean_dice"), per_dataset)
    _write_csv(files["groups"], ("group", "mean_dice", "n_classes"), groups)
    return files
