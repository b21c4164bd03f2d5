import csv
import json

import pytest

from patchforge.cli import main
from patchforge.config import ConfigError, parse_config

STAGE = {"epochs": 2, "lr_halve_epoch": 1, "batch_size": 4, "max_steps": 2, "max_partials": 1}


def tiny_config(root):
    return {
        "seed": 3,
        "paths": {"meshes": str(root / "meshes"), "data": str(root / "data"), "ckpt": str(root / "ckpt"),
                  "noisy_data": str(root / "noisy"), "out": str(root / "out")},
        "scan": {"views": 6, "res": 8, "width": 48, "test_categories": ["chair"]},
        "model": {"d": 4, "resolutions": [8, 4, 2], "channels": 2, "norm_groups": 2, "decoder_channels": 2},
        "train": {"s1": STAGE, "s2": STAGE, "finetune": {**STAGE, "batch_size": 2}},
        "eval": {"n_points": 200},
    }


def write_config(root, data=None):
    path = root / "run.json"
    path.write_text(json.dumps(data or tiny_config(root)))
    return str(path)


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root)
    assert main(["synth", "--config", cfg, "--out", str(root / "meshes"), "--per-category", "table=3,chair=2"]) == 0
    assert main(["datagen", "--config", cfg]) == 0
    assert main(["init-priors", "--config", cfg]) == 0
    for stage in ("s1-8", "s1-4", "s1-2", "s2"):
        assert main(["train", "--config", cfg, "--stage", stage]) == 0
    return root, cfg


def test_unknown_key_exits_2_naming_key(tmp_path, capsys):
    cfg = write_config(tmp_path, {"model": {"d": 8, "widht": 3}})
    assert main(["evaluate", "--config", cfg]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config" and err["key"] == "model.widht"


def test_unknown_loss_key_named():
    with pytest.raises(ConfigError) as info:
        parse_config({"train": {"s2": {"loss": {"w_ful": 1}}}})
    assert info.value.key == "train.s2.loss.w_ful"


def test_missing_manifest_is_json_error(tmp_path, capsys):
    assert main(["evaluate", "--manifest", str(tmp_path / "nope.json"), "--ckpt", str(tmp_path)]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "FileNotFoundError"


def test_gt_as_prediction_scores_zero(chain, tmp_path):
    root, cfg = chain
    out = tmp_path / "gt"
    assert main(["evaluate", "--config", cfg, "--gt-as-prediction", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out.with_suffix(".csv"))))
    assert rows and all(float(r["cd_x100"]) == 0.0 and float(r["iou"]) == 1.0 for r in rows)
    assert json.loads(out.with_suffix(".json").read_text())["inst_avg"]["cd_x100"] == 0.0


def test_evaluate_writes_report_and_run_record(chain, tmp_path):
    root, cfg = chain
    out = tmp_path / "rep"
    assert main(["evaluate", "--config", cfg, "--out", str(out), "--export-meshes", str(tmp_path / "m")]) == 0
    rows = list(csv.DictReader(open(out.with_suffix(".csv"))))
    assert len(rows) == 2 * 4
    record = json.loads((tmp_path / "run_evaluate.json").read_text())
    assert record["seed"] == 3 and len(record["config_sha256"]) == 64


def test_ablate_table_has_configured_rows(chain, tmp_path):
    root, cfg = chain
    data = json.loads(open(cfg).read())
    data["ablate"] = {"variants": ["8-only", "4-only", "2-only", "no-attention", "fixed-priors", "full"]}
    cfg2 = write_config(tmp_path, data)
    out = tmp_path / "ablation.csv"
    assert main(["ablate", "--config", cfg2, "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert [r["variant"] for r in rows] == data["ablate"]["variants"]
    assert all(float(r["inst_cd_x100"]) > 0 for r in rows)


def test_rerun_is_bit_identical(tmp_path):
    files = []
    for name in ("a", "b"):
        root = tmp_path / name
        root.mkdir()
        data = tiny_config(root)
        data["model"]["resolutions"] = [8, 4]
        data["ablate"] = {"variants": ["8-only", "no-attention", "fixed-priors", "full"]}
        cfg = write_config(root, data)
        assert main(["synth", "--config", cfg, "--out", str(root / "meshes"), "--per-category", "table=2,chair=1"]) == 0
        assert main(["datagen", "--config", cfg]) == 0
        assert main(["datagen", "--config", cfg, "--noisy"]) == 0
        assert main(["init-priors", "--config", cfg]) == 0
        for stage in ("s1-8", "s1-4", "s2", "finetune"):
            assert main(["train", "--config", cfg, "--stage", stage]) == 0
        assert main(["evaluate", "--config", cfg, "--out", str(root / "out" / "report")]) == 0
        assert main(["ablate", "--config", cfg, "--out", str(root / "out" / "ablation.csv")]) == 0
        files.append(root)
    a, b = files
    compared = 0
    for f in sorted(a.rglob("*")):
        if f.is_dir() or f.name.startswith("run_") or f.suffix == ".json" and f.name == "run.json":
            continue
        other = b / f.relative_to(a)
        data = f.read_bytes()
        if f.name == "manifest.json":
            data = data.replace(str(a).encode(), b"")
        assert other.exists(), f
        assert data == other.read_bytes().replace(str(b).encode(), b""), f
        compared += 1
    assert compared > 10


def test_noisy_data_is_separate_and_feeds_finetune(chain, tmp_path):
    root, cfg = chain
    clean = (root / "data" / "manifest.json").read_bytes()
    partial = sorted((root / "data").rglob("*partial*"))[0].read_bytes()
    assert main(["datagen", "--config", cfg, "--noisy"]) == 0
    assert (root / "noisy" / "manifest.json").exists()
    assert (root / "data" / "manifest.json").read_bytes() == clean
    assert sorted((root / "data").rglob("*partial*"))[0].read_bytes() == partial
    assert main(["train", "--config", cfg, "--stage", "finetune"]) == 0
    assert (root / "ckpt" / "finetune.ckpt").exists()


def test_finetune_without_noisy_data_is_config_error(tmp_path, capsys):
    data = tiny_config(tmp_path)
    del data["paths"]["noisy_data"]
    assert main(["train", "--config", write_config(tmp_path, data), "--stage", "finetune"]) == 2
    assert json.loads(capsys.readouterr().err)["key"] == "paths.noisy_data"
