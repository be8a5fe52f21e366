import numpy as np
import pytest
import torch

import oracles
from condadapt import evalkit
from condadapt.evalkit import (MetricReport, confusion, evaluate, format_report, miou,
                               point_biserial, write_metrics_csv, write_panels)
from condadapt.segnet import build_segmenter
from condadapt.toyworld import ManifestData

L = 4


def test_confusion_perfect_prediction_is_diagonal():
    gt = np.random.default_rng(0).integers(1, L + 1, size=(3, 8, 8))
    mat = confusion(gt, gt, L)
    assert (mat - np.diag(np.diag(mat))).sum() == 0
    assert mat.sum() == gt.size


def test_confusion_ignores_unlabeled_and_validates():
    gt = np.array([[0, 1], [2, 0]])
    pred = np.array([[1, 1], [1, 2]])
    mat = confusion(pred, gt, L)
    assert mat.sum() == 2
    with pytest.raises(ValueError):
        confusion(np.array([[0]]), np.array([[1]]), L)


def test_confusion_additive_across_partitions():
    rng = np.random.default_rng(1)
    pred = rng.integers(1, L + 1, size=(6, 5, 5))
    gt = rng.integers(0, L + 1, size=(6, 5, 5))
    whole = confusion(pred, gt, L)
    parts = confusion(pred[:2], gt[:2], L) + confusion(pred[2:], gt[2:], L)
    assert np.array_equal(whole, parts)


def test_confusion_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(10):
        pred = rng.integers(1, L + 1, size=(2, 6, 6))
        gt = rng.integers(0, L + 1, size=(2, 6, 6))
        assert np.array_equal(confusion(pred, gt, L), oracles.confusion(pred, gt, L))


def test_miou_analytic_cases():
    perfect = np.diag([5, 3, 7, 2])
    per_class, mean = miou(perfect)
    assert np.allclose(per_class, 1.0)
    assert mean == 1.0
    disjoint = np.array([[0, 4], [3, 0]])
    per_class, mean = miou(disjoint)
    assert np.allclose(per_class, 0.0)
    assert mean == 0.0


def test_miou_hand_built_matrix():
    mat = np.array([[5, 1, 0], [0, 4, 2], [1, 0, 7]])
    per_class, mean = miou(mat)
    want = [5 / (6 + 1), 4 / (6 + 1), 7 / (8 + 2)]
    assert np.allclose(per_class, want)
    assert abs(mean - np.mean(want)) < 1e-12
    loop_ious, loop_mean = oracles.iou_from_confusion(mat)
    assert np.allclose(per_class, loop_ious)
    assert abs(mean - loop_mean) < 1e-12


def test_miou_excludes_absent_classes():
    mat = np.zeros((3, 3), dtype=np.int64)
    mat[0, 0] = 10
    mat[1, 1] = 5
    per_class, mean = miou(mat)
    assert np.isnan(per_class[2])
    assert mean == 1.0


def test_miou_permutation_invariant():
    rng = np.random.default_rng(3)
    pred = rng.integers(1, L + 1, size=(4, 8, 8))
    gt = rng.integers(0, L + 1, size=(4, 8, 8))
    _, base = miou(confusion(pred, gt, L))
    perm = np.array([0, 3, 1, 4, 2])  # label value -> permuted value (0 stays)
    _, permuted = miou(confusion(perm[pred], perm[gt], L))
    assert abs(base - permuted) < 1e-12


def test_point_biserial_sign():
    rng = np.random.default_rng(4)
    correct = rng.uniform(size=4000) < 0.7
    conf = np.where(correct, 0.8, 0.3) + rng.normal(0, 0.05, size=4000)
    assert point_biserial(conf, correct) > 0.5
    assert point_biserial(np.full(10, 0.5), np.arange(10) % 2 == 0) == 0.0


def test_evaluate_reports_per_condition_and_seen(tiny_dataset):
    root, cfg, manifests = tiny_dataset
    data = ManifestData(manifests["target_eval"])
    model = build_segmenter("cam", cfg.num_classes, cfg.num_conditions,
                            feat_dim=8, enc_widths=(8, 8, 8))
    report = evaluate(model, data)
    assert set(report.per_condition) == {"clean", "fog", "rain", "dusk"}
    assert report.seen is not None
    assert report.seen.sample_count == cfg.target_eval_per_condition * cfg.num_conditions
    assert 0.0 <= report.miou <= 1.0
    text = format_report(report)
    assert "dusk" in text and "seen" in text


def test_metrics_csv_deterministic(tiny_dataset, tmp_path):
    root, cfg, manifests = tiny_dataset
    data = ManifestData(manifests["target_eval"])
    torch.manual_seed(0)
    model = build_segmenter("mix", cfg.num_classes, cfg.num_conditions,
                            feat_dim=8, enc_widths=(8, 8, 8))
    report = evaluate(model, data)
    write_metrics_csv(report, tmp_path / "a.csv")
    write_metrics_csv(evaluate(model, data), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_write_panels(tmp_path):
    rng = np.random.default_rng(5)
    img = rng.uniform(size=(3, 16, 16)).astype(np.float32)
    gt = rng.integers(1, L + 1, size=(16, 16))
    pred = rng.integers(1, L + 1, size=(16, 16))
    pseudo = rng.integers(0, L + 1, size=(16, 16))
    conf = rng.uniform(size=(16, 16)).astype(np.float32)
    write_panels(tmp_path, 0, img, gt, pred, pseudo, conf)
    for suffix in ("input", "pred", "error", "pseudo_regions", "confidence"):
        assert (tmp_path / f"000_{suffix}.png").exists()
