import json
import os
from pathlib import Path

import pytest

from condadapt.cli import main
from condadapt.config import (TrainConfig, apply_overrides, from_dict, load_config,
                              save_config, to_dict)

TINY = [
    "--set", "data.source_train=18", "--set", "data.source_eval=6",
    "--set", "data.target_train=18", "--set", "data.target_eval_per_condition=4",
    "--set", "data.unseen_eval=3",
    "--set", "model.feat_dim=8", "--set", "model.enc_widths=8,8,8",
    "--set", "translator.steps=6", "--set", "translator.fseg_steps=6",
    "--set", "translator.batch_size=6", "--set", "translator.gen_base=8",
    "--set", "stage1.steps=6", "--set", "stage1.batch_size=6",
    "--set", "stage2.steps=6", "--set", "stage2.batch_size=6",
    "--set", "distill.steps=6", "--set", "distill.batch_size=6",
]


def test_config_roundtrip(tmp_path):
    cfg = TrainConfig()
    cfg.stage2.lambda_p = 0.75
    cfg.data.conditions = ["clean", "fog"]
    save_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert to_dict(back) == to_dict(cfg)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError) as err:
        from_dict({"seed": 1, "bogus": 2})
    assert "bogus" in str(err.value)
    with pytest.raises(ValueError) as err:
        from_dict({"stage2": {"lambda_q": 0.5}})
    assert "lambda_q" in str(err.value)


def test_overrides_coerce_types():
    cfg = TrainConfig()
    apply_overrides(cfg, ["stage2.lambda_p=0.5", "stage1.steps=9", "stage2.use_hard_adv=false",
                          "data.conditions=clean,fog", "model.enc_widths=4,8,12"])
    assert cfg.stage2.lambda_p == 0.5
    assert cfg.stage1.steps == 9
    assert cfg.stage2.use_hard_adv is False
    assert cfg.data.conditions == ["clean", "fog"]
    assert cfg.model.enc_widths == [4, 8, 12]
    with pytest.raises(ValueError):
        apply_overrides(cfg, ["stage2.never=1"])
    with pytest.raises(ValueError):
        apply_overrides(cfg, ["stage2.lambda_p"])


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """Tiny end-to-end pipeline; shared by the CLI interface tests."""
    root = tmp_path_factory.mktemp("pipe")
    base = ["--seed", "7", *TINY]
    assert main(["gen-data", "--out", str(root / "data"), *base]) == 0
    assert main(["train-translator", "--data", str(root / "data"),
                 "--out", str(root / "translator"), *base]) == 0
    assert main(["translate", "--data", str(root / "data"), "--translator",
                 str(root / "translator"), "--out", str(root / "stylized"), *base]) == 0
    assert main(["train-stage1", "--data", str(root / "data"), "--stylized",
                 str(root / "stylized"), "--out", str(root / "m0"), *base]) == 0
    assert main(["train-stage2", "--data", str(root / "data"), "--stylized",
                 str(root / "stylized"), "--m0", str(root / "m0"),
                 "--out", str(root / "m1"), *base]) == 0
    assert main(["distill", "--data", str(root / "data"), "--stylized", str(root / "stylized"),
                 "--m1", str(root / "m1"), "--out", str(root / "student"), *base]) == 0
    assert main(["eval", "--ckpt", str(root / "m1"), "--data", str(root / "data"),
                 "--out", str(root / "eval"), *base]) == 0
    return root, base


def test_pipeline_artifacts(pipeline_dir):
    root, _ = pipeline_dir
    assert (root / "data" / "source_train.manifest").exists()
    assert (root / "translator" / "translator.ckpt").exists()
    assert (root / "translator" / "fseg.ckpt").exists()
    assert (root / "translator" / "curves.csv").exists()
    assert (root / "translator" / "curves.png").exists()
    assert (root / "stylized" / "stylized_train.manifest").exists()
    assert (root / "m0" / "m0.ckpt").exists()
    assert (root / "m1" / "m1.ckpt").exists()
    assert (root / "student" / "student.ckpt").exists()
    assert (root / "eval" / "metrics.csv").exists()
    assert (root / "eval" / "metrics_joint.csv").exists()  # joint head reported alongside
    assert (root / "eval" / "miou_bars.png").exists()
    assert (root / "eval" / "stats.json").exists()
    assert (root / "eval" / "panels" / "000_pred.png").exists()
    # every command leaves its resolved config behind
    for sub in ("data", "translator", "stylized", "m0", "m1", "student", "eval"):
        assert (root / sub / "config.json").exists()


def test_stylized_dataset_covers_all_conditions(pipeline_dir):
    from condadapt.toyworld import read_manifest
    root, _ = pipeline_dir
    man = read_manifest(root / "stylized" / "stylized_train.manifest")
    per_cond = {}
    for rec in man.records:
        per_cond[rec.condition.index] = per_cond.get(rec.condition.index, 0) + 1
    assert per_cond == {0: 18, 1: 18, 2: 18}


def test_eval_rerun_is_byte_identical(pipeline_dir, tmp_path):
    root, base = pipeline_dir
    out2 = tmp_path / "eval2"
    assert main(["eval", "--ckpt", str(root / "m1"), "--data", str(root / "data"),
                 "--out", str(out2), *base]) == 0
    a = (root / "eval" / "metrics.csv").read_bytes()
    b = (out2 / "metrics.csv").read_bytes()
    assert a == b


def test_missing_prerequisite_names_command(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["translate", "--data", str(tmp_path), "--translator", str(tmp_path),
              "--out", str(tmp_path / "o")])
    assert "train-translator" in str(err.value)
    with pytest.raises(SystemExit) as err:
        main(["train-stage1", "--data", str(tmp_path), "--stylized", str(tmp_path),
              "--out", str(tmp_path / "o")])
    assert "translate" in str(err.value)


def test_commands_keep_artifact_dirs_disjoint(pipeline_dir):
    root, base = pipeline_dir
    before = sorted(p.name for p in (root / "m0").iterdir())
    assert main(["eval", "--ckpt", str(root / "m0"), "--data", str(root / "data"),
                 "--out", str(root / "eval_m0"), *base]) == 0
    after = sorted(p.name for p in (root / "m0").iterdir())
    assert before == after


def test_dump_pseudo_is_loader_compatible(pipeline_dir):
    from condadapt.toyworld import ManifestData, read_manifest
    root, base = pipeline_dir
    out = root / "pseudo"
    assert main(["dump-pseudo", "--data", str(root / "data"), "--m0", str(root / "m0"),
                 "--out", str(out), *base]) == 0
    man = read_manifest(out / "pseudo_train.manifest")
    data = ManifestData(man)
    assert len(data) == 18
    assert data.labels.min() >= 0  # 0 = hard region, allowed in pseudo labels
    assert (out / "confidence").exists()


def test_env_var_artifact_root(tmp_path, monkeypatch):
    monkeypatch.setenv("CONDADAPT_RUNS", str(tmp_path))
    assert main(["gen-data", "--out", "envdata", "--seed", "3", *TINY]) == 0
    assert (tmp_path / "envdata" / "source_train.manifest").exists()
