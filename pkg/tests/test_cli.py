import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from gliotl.cli import main
from gliotl.config import apply_overrides, load_config
from gliotl.preprocess import Volume3D, save_volume

TINY = {
    "seed": 3,
    "data": {"input_grid": [16, 16, 16], "volume_format": ".nii"},
    "synth": {"n_subjects": 10, "n_wad_subjects": 10, "n_external_subjects": 4, "volume_shape": [16, 16, 16],
              "radius_range": [2.0, 3.0], "radius_step": 1.5},
    "model": {"conv_block_channels": [2, 2, 2, 2], "fc_widths": [4, 4, 2, 1]},
    "train": {"max_epochs": 2, "early_stop_patience": 2, "augmentation": {"enabled": False}},
    "hpo": {"n_trials": 2, "pruner": {"enabled": False}},
    "stats": {"n_permutations": 200},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def diag(err):
    lines = [l for l in err.splitlines() if l.startswith("{")]
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.yaml"
    doc = dict(TINY)
    doc["data"] = {**TINY["data"], "had_manifest": "synth/had_manifest.csv", "wad_manifest": "synth/wad_manifest.csv",
                   "external_manifest": "synth/external_manifest.csv"}
    cfg.write_text(yaml.safe_dump(doc))
    assert main(["synth", "--config", str(cfg), "--output", str(root / "synth")]) == 0
    return root, cfg


def test_synth_outputs(workspace):
    root, _ = workspace
    for name in ("had_manifest.csv", "wad_manifest.csv", "external_manifest.csv", "wad_truth.csv", "synth_run.json"):
        assert (root / "synth" / name).exists()
    info = json.loads((root / "synth" / "synth_run.json").read_text())
    assert info["seed"] == 3 and info["config"]["synth"]["n_subjects"] == 10


def test_study_is_byte_identical_and_chains(workspace, capsys):
    root, cfg = workspace
    for d in ("s1", "s2"):
        code, out, _ = run(capsys, "study", "--config", cfg, "--output", root / d)
        assert code == 0 and json.loads(out)["status"] == "ok"
    assert (root / "s1/metrics.json").read_bytes() == (root / "s2/metrics.json").read_bytes()
    assert (root / "s1/predictions.csv").read_bytes() == (root / "s2/predictions.csv").read_bytes()

    code, _, _ = run(capsys, "evaluate", "--config", cfg, "--output", root / "ev",
                     "--set", f"evaluate.predictions={root / 's1/predictions.csv'}")
    assert code == 0
    ev = json.loads((root / "ev/metrics.json").read_text())
    st = json.loads((root / "s1/metrics.json").read_text())
    assert ev["AUC"] == st["AUC"]

    code, out, _ = run(capsys, "compare", "--config", cfg, "--output", root / "cmp",
                       "--set", f"stats.predictions_a={root / 's1/predictions.csv'}",
                       "--set", f"stats.predictions_b={root / 's2/predictions.csv'}")
    assert code == 0
    body = json.loads((root / "cmp/comparison.json").read_text())
    assert body["delta"] == 0 and body["p_value"] == 1.0

    code, _, _ = run(capsys, "infer", "--config", cfg, "--output", root / "inf", "--set", f"infer.study_dir={root / 's1'}")
    assert code == 0
    with open(root / "inf/external_predictions.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and {r["fold_id"] for r in rows} == {"vote"}


def test_train_command(workspace, capsys):
    root, cfg = workspace
    code, out, _ = run(capsys, "train", "--config", cfg, "--output", root / "tr", "--set", "train.fold=1",
                       "--set", "train.strategy=mixed_training")
    assert code == 0, out
    for name in ("model.pt", "epoch_log.csv", "test_predictions.csv", "train_run.json"):
        assert (root / "tr" / name).exists()


def test_preprocess_command(tmp_path, capsys):
    rng = np.random.default_rng(0)
    rows = []
    for i in range(2):
        a = Volume3D(rng.normal(size=(10, 10, 10)).astype(np.float32))
        b = Volume3D(rng.normal(size=(10, 10, 10)).astype(np.float32))
        save_volume(a, tmp_path / f"p{i}.nii")
        save_volume(b, tmp_path / f"c{i}.nii")
        rows.append({"map_id": f"m{i}", "subject_id": f"s{i}", "previous_scan_id": f"p{i}", "current_scan_id": f"c{i}",
                     "label": "stable", "provenance": "human", "confidence": "",
                     "previous_path": f"p{i}.nii", "current_path": f"c{i}.nii"})
    with open(tmp_path / "pairs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    code, out, err = run(capsys, "preprocess", "--output", tmp_path / "out", "--set", f"preprocess.pairs={tmp_path / 'pairs.csv'}",
                         "--set", "data.input_grid=[8,8,8]", "--set", "data.volume_format=.nii")
    assert code == 0, err
    assert json.loads(out)["n_maps"] == 2
    assert len((tmp_path / "out/preprocess_log.jsonl").read_text().splitlines()) == 2


def test_missing_manifest_exits_3(tmp_path, capsys):
    code, _, err = run(capsys, "study", "--output", tmp_path, "--set", f"data.had_manifest={tmp_path / 'nope.csv'}")
    assert code == 3
    d = diag(err)
    assert d["kind"] == "missing_file" and "nope.csv" in d["path"]


def test_missing_config_exits_3(tmp_path, capsys):
    code, _, err = run(capsys, "study", "--config", tmp_path / "absent.yaml")
    assert code == 3 and "absent.yaml" in diag(err)["message"]


@pytest.mark.parametrize(
    "override,field",
    [("train.batch_size=0", "train.batch_size"), ("model.family=resnet", "model.family"),
     ("train.learning_rate=0.3", "train"), ("hpo.n_trials=0", "hpo"), ("bogus=1", "bogus")],
)
def test_invalid_config_exits_2_with_field(tmp_path, capsys, override, field):
    code, _, err = run(capsys, "study", "--output", tmp_path, "--set", override)
    assert code == 2
    d = diag(err)
    assert d["kind"] == "invalid_config" and d["field"] == field


def test_unset_input_is_config_error(tmp_path, capsys):
    code, _, err = run(capsys, "compare", "--output", tmp_path)
    assert code == 2 and diag(err)["field"] == "stats.predictions_a"


def test_runtime_error_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("not,a,prediction,file\n")
    code, _, err = run(capsys, "evaluate", "--output", tmp_path, "--set", f"evaluate.predictions={bad}")
    assert code == 1 and diag(err)["kind"] == "runtime_error"


def test_overrides_and_relative_paths(tmp_path):
    doc = apply_overrides({"train": {"max_epochs": 5}}, ["train.max_epochs=7", "hpo.sampler=tpe", "cv.seed=null"])
    assert doc == {"train": {"max_epochs": 7}, "hpo": {"sampler": "tpe"}, "cv": {"seed": None}}
    (tmp_path / "c.yaml").write_text("data:\n  had_manifest: m/had.csv\n")
    cfg = load_config(tmp_path / "c.yaml", ["seed=9"], parallelism=2)
    assert cfg.data.had_manifest == tmp_path / "m/had.csv"
    assert cfg.seed == 9 and cfg.parallelism == 2 and cfg.cv_seed == 9


def test_console_script_runs():
    out = subprocess.run([sys.executable, "-m", "gliotl.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "gliotl" in out.stdout
