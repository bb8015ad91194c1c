"""Command-line front end: gen-data, train, finetune, predict, eval, gradcheck.

Exit codes: 0 success, 1 internal or tolerance failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides) -> dict:
    """Apply ``key.sub=value`` overrides; values are parsed as JSON when possible."""
    for item in overrides or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = config
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise UsageError(f"unknown config section {p!r} in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise UsageError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(value)
    return config


def _need_file(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _read_json(path, what) -> dict:
    p = _need_file(path, what)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{what} {p} is not valid JSON: {e}") from e


def _write_resolved(out: Path, command: str, resolved: dict):
    out.mkdir(parents=True, exist_ok=True)
    body = {"command": command, **resolved}
    (out / "resolved_config.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _train_config(args) -> dict:
    from .trainer import TrainConfig

    base = TrainConfig().to_dict()
    if args.config:
        user = _read_json(args.config, "train config")
        for k, v in user.items():
            if isinstance(v, dict) and isinstance(base.get(k), dict):
                base[k].update(v)
            else:
                base[k] = v
    if args.seed is not None:
        base["seed"] = args.seed
    if args.workers is not None:
        base["workers"] = args.workers
    return apply_overrides(base, args.set)


def _manifest(path):
    from .collection import load_manifest

    return load_manifest(_need_file(path, "manifest"))


def _progress(line):
    print(line, flush=True)


# --- commands --------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .phantomgen import GenConfig, default_config, generate_collection

    cfg = default_config().to_dict() if not args.config else _read_json(args.config, "generator config")
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg = apply_overrides(cfg, args.set)
    config = GenConfig.from_dict(cfg)
    out = Path(args.out)
    _write_resolved(out, "gen-data", {"generator": config.to_dict(), "workers": args.workers or 1})
    manifest = generate_collection(config, out, workers=args.workers or 1)
    print(f"wrote {len(manifest.cases)} cases over {len(manifest.datasets)} datasets "
          f"({manifest.num_classes} classes) to {out / 'manifest.json'}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    manifest = _manifest(args.manifest)
    cfg = _train_config(args)
    config = TrainConfig.from_dict(cfg)
    out = Path(args.out)
    _write_resolved(out, "train", {"train": config.to_dict(), "manifest": str(args.manifest),
                                   "single_dataset": args.single_dataset})
    if args.single_dataset is not None and args.single_dataset not in \
            [d.dataset_id for d in manifest.datasets]:
        raise UsageError(f"--single-dataset {args.single_dataset}: no such dataset")
    result = train(manifest, config, out, single_dataset=args.single_dataset, progress=_progress)
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .trainer import TrainConfig, finetune

    checkpoint = _need_file(args.checkpoint, "checkpoint")
    manifest = _manifest(args.manifest)
    cfg = _train_config(args)
    cfg.setdefault("schedule", {})["mode"] = "finetune"
    config = TrainConfig.from_dict(cfg)
    out = Path(args.out)
    _write_resolved(out, "finetune", {"train": config.to_dict(), "manifest": str(args.manifest),
                                      "checkpoint": str(checkpoint)})
    result = finetune(checkpoint, manifest, config, out, progress=_progress)
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .collection import read_volume, write_volume
    from .trainer import Predictor, binarize, softmax_to_masks

    predictor = Predictor.from_checkpoint(_need_file(args.checkpoint, "checkpoint"),
                                          overlap=args.overlap, threshold=args.threshold)
    volume, spacing = read_volume(_need_file(args.volume, "volume"))
    out = Path(args.out)
    _write_resolved(out, "predict", {"checkpoint": str(args.checkpoint), "volume": str(args.volume),
                                     "overlap": args.overlap, "threshold": args.threshold})
    probs = predictor.probabilities(volume)
    if predictor.activation == "softmax":
        masks = softmax_to_masks(probs)
        probs = probs[1:]
    else:
        masks = binarize(probs, args.threshold)
    for c in range(masks.shape[0]):
        write_volume(probs[c].astype(np.float32), spacing, out / f"prob_{c:02d}.mtvol")
        write_volume(masks[c], spacing, out / f"mask_{c:02d}.mtvol")
    overlap = int((masks.sum(axis=0) >= 2).sum())
    print(f"wrote {masks.shape[0]} class volumes to {out} ({overlap} multi-label voxels)")
    return EXIT_OK


def _reference_table(path, manifest):
    """Rebuild class means from a previous ``per_class.csv`` as a reference table."""
    import csv

    from .evalreport import DiceRow, EvalTable

    rows = []
    with open(_need_file(path, "reference per_class.csv"), newline="") as f:
        for r in csv.DictReader(f):
            ds = int(r["dataset_id"])
            if ds not in {d.dataset_id for d in manifest.datasets}:
                continue
            names = [c.name for c in manifest.dataset(ds).classes]
            if r["class_name"] not in names:
                raise UsageError(f"reference class {r['class_name']!r} not in dataset {ds}")
            j = names.index(r["class_name"])
            rows.append(DiceRow(ds, j, r["class_name"], "reference", float(r["mean_dice"])))
    return EvalTable(rows)


def cmd_eval(args) -> int:
    from .collection import subset_manifest
    from .evalreport import aggregate, default_rules, evaluate, write_report
    from .trainer import Predictor

    predictor = Predictor.from_checkpoint(_need_file(args.checkpoint, "checkpoint"),
                                          overlap=args.overlap)
    manifest = _manifest(args.manifest)
    covered = sorted({c["dataset_id"] for c in predictor.header.get("classes", [])})
    if covered and covered != [d.dataset_id for d in manifest.datasets]:
        manifest = subset_manifest(manifest, covered)
    out = Path(args.out)
    _write_resolved(out, "eval", {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest),
                                  "split": args.split, "overlap": args.overlap,
                                  "reference": args.reference, "workers": args.workers or 1})
    table = evaluate(predictor, manifest, split=args.split, workers=args.workers or 1)
    reference = _reference_table(args.reference, manifest) if args.reference else None
    tags = sorted({t for c in manifest.global_classes for t in c.group_tags})
    summaries = [aggregate(table, r) for r in default_rules(reference, tags)]
    write_report(table, summaries, out)
    for s in summaries:
        print(f"{s.group:>20s}  {s.mean_dice:7.2f}  ({s.n_classes} classes)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .ndnet.gradcheck import gradcheck

    report = gradcheck(tolerance=args.tolerance, seed=args.seed or 0)
    lines = report.lines()
    if args.out:
        out = Path(args.out)
        _write_resolved(out, "gradcheck", {"tolerance": args.tolerance, "seed": args.seed or 0})
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    print("gradcheck " + ("passed" if report.ok else f"FAILED ({len(report.failures())} checks)"))
    return EXIT_OK if report.ok else EXIT_FAIL


# --- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the run seed")
    common.add_argument("--workers", type=int, default=None, help="worker threads")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry (dotted path), repeatable")

    parser = argparse.ArgumentParser(prog="mdseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a phantom collection")
    p.add_argument("--config", help="generator config JSON (default: built-in desk config)")
    p.set_defaults(func=cmd_gen_data, needs_out=True)

    p = sub.add_parser("train", parents=[common], help="train from scratch")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--manifest", required=True)
    p.add_argument("--single-dataset", type=int, default=None,
                   help="train a softmax baseline on one dataset")
    p.set_defaults(func=cmd_train, needs_out=True)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune a checkpoint on new classes")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_finetune, needs_out=True)

    p = sub.add_parser("predict", parents=[common], help="sliding-window prediction of one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict, needs_out=True)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint and write CSV reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="held_out")
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--reference", help="per_class.csv of a reference run (difficult-class group)")
    p.set_defaults(func=cmd_eval, needs_out=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck, needs_out=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.needs_out and not args.out:
        parser.error(f"{args.command} requires --out")
    if args.workers is not None and args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        # malformed configs, manifests, volumes and checkpoints are input errors
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
