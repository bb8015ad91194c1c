import json

import pytest

from mdseg import cli
from mdseg.collection import read_volume

FAST = ["--set", "epochs=1", "--set", "iterations_per_epoch=2", "--set", "batch_size=2",
        "--set", "net.base_channels=4", "--set", "net.stages=2", "--set", "net.patch_shape=[8,8,8]"]


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    gen = root / "gen.json"
    from mdseg.phantomgen import default_config
    cfg = default_config().to_dict()
    cfg["volume_shape"] = [16, 16, 16]
    for d in cfg["datasets"]:
        d["case_count"] = 5
    gen.write_text(json.dumps(cfg))
    assert cli.main(["gen-data", "--config", str(gen), "--out", str(root / "data"),
                     "--workers", "2"]) == 0
    return root


def test_pipeline_writes_reports(generated):
    root = generated
    manifest = str(root / "data" / "manifest.json")
    assert cli.main(["train", "--manifest", manifest, "--out", str(root / "run"), *FAST]) == 0
    resolved = json.loads((root / "run" / "resolved_config.json").read_text())
    assert resolved["train"]["epochs"] == 1 and resolved["train"]["net"]["base_channels"] == 4
    assert cli.main(["eval", "--checkpoint", str(root / "run" / "latest.ckpt"),
                     "--manifest", manifest, "--out", str(root / "eval")]) == 0
    groups = (root / "eval" / "groups.csv").read_text().splitlines()
    assert groups[0] == "group,mean_dice,n_classes"
    assert any(line.startswith("tag:cancer,") for line in groups)
    assert cli.main(["predict", "--checkpoint", str(root / "run" / "latest.ckpt"),
                     "--volume", str(root / "data" / "volumes" / "ds0_case000_img.mtvol"),
                     "--out", str(root / "pred")]) == 0
    prob, _ = read_volume(root / "pred" / "prob_00.mtvol")
    assert prob.shape == (16, 16, 16) and 0 <= prob.min() and prob.max() <= 1


def test_baseline_and_finetune(generated):
    root = generated
    manifest = str(root / "data" / "manifest.json")
    assert cli.main(["train", "--manifest", manifest, "--out", str(root / "b1"),
                     "--single-dataset", "1", *FAST]) == 0
    assert cli.main(["eval", "--checkpoint", str(root / "b1" / "latest.ckpt"),
                     "--manifest", manifest, "--out", str(root / "eb1")]) == 0
    rows = (root / "eb1" / "per_class.csv").read_text().splitlines()
    assert len(rows) == 4 and all(r.startswith("1,") for r in rows[1:])
    assert cli.main(["train", "--manifest", manifest, "--out", str(root / "src"), *FAST]) == 0
    ft = FAST + ["--set", "epochs=0"]
    assert cli.main(["finetune", "--checkpoint", str(root / "src" / "latest.ckpt"),
                     "--manifest", manifest, "--out", str(root / "ft"), *ft]) == 0
    resolved = json.loads((root / "ft" / "resolved_config.json").read_text())
    assert resolved["train"]["schedule"]["mode"] == "finetune"


def test_missing_manifest_exit_code(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "manifest.json"
    code = cli.main(["train", "--manifest", str(missing), "--out", str(tmp_path / "o")])
    assert code == 2
    assert str(missing) in capsys.readouterr().err


def test_usage_errors(tmp_path, generated):
    manifest = str(generated / "data" / "manifest.json")
    assert cli.main(["train", "--manifest", manifest, "--out", str(tmp_path),
                     "--set", "nonsense=1"]) == 2
    assert cli.main(["train", "--manifest", manifest, "--out", str(tmp_path),
                     "--set", "epochs"]) == 2
    assert cli.main(["train", "--manifest", manifest, "--out", str(tmp_path),
                     "--single-dataset", "9", *FAST]) == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--manifest", manifest])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["launch"])
    assert info.value.code == 2


def test_gradcheck_failure_exit_code(monkeypatch, tmp_path):
    from mdseg.ndnet import gradcheck as gc

    def failing(tolerance, seed):
        return gc.GradcheckReport([gc.CheckResult("conv3d", "w", 1.0, tolerance, 1)])

    monkeypatch.setattr(gc, "gradcheck", failing)
    assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 1
    assert "FAIL" in (tmp_path / "gradcheck.txt").read_text()


def test_overrides():
    cfg = {"a": 1, "b": {"c": [1, 2]}}
    cli.apply_overrides(cfg, ["a=2.5", "b.c=[3]"])
    assert cfg == {"a": 2.5, "b": {"c": [3]}}
    with pytest.raises(cli.UsageError):
        cli.apply_overrides(cfg, ["b.d=1"])
