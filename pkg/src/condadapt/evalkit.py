"""Metrics and diagnostics: confusion matrices, IoU, per-condition reports,
error/confidence panels."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import toyworld
from .toyworld import ManifestData

# fixed render palette for panels, class 1..L then cycled
PANEL_COLORS = np.array([
    (135, 181, 235), (92, 74, 56), (140, 140, 148), (46, 115, 51),
    (166, 38, 38), (217, 191, 51), (200, 120, 200), (80, 200, 200),
], dtype=np.uint8)


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """[L,L] counts, rows = ground truth, cols = prediction; gt==0 excluded."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    keep = gt > 0
    pred, gt = pred[keep], gt[keep]
    if pred.size and (pred.min() < 1 or pred.max() > num_classes):
        raise ValueError("predictions must lie in 1..L")
    idx = (gt - 1) * num_classes + (pred - 1)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN when the class is absent from both) and their mean."""
    matrix = np.asarray(matrix, dtype=np.float64)
    tp = np.diag(matrix)
    union = matrix.sum(axis=1) + matrix.sum(axis=0) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    mean = float(np.nanmean(iou)) if np.isfinite(iou).any() else float("nan")
    return iou, mean


@dataclass
class MetricReport:
    matrix: np.ndarray
    per_class: np.ndarray
    miou: float
    sample_count: int
    per_condition: dict[str, "MetricReport"] = field(default_factory=dict)
    seen: "MetricReport | None" = None  # pooled over train-time conditions only

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, sample_count: int) -> "MetricReport":
        per_class, mean = miou(matrix)
        return cls(matrix, per_class, mean, sample_count)


def predict_labels(model: torch.nn.Module, images: np.ndarray, mode: str = "fused",
                   batch_size: int = 16, device: str = "cpu") -> np.ndarray:
    """Labels in 1..L at image resolution, eval mode, no grad."""
    was_training = model.training
    model.eval().to(device)
    outs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = torch.from_numpy(images[start:start + batch_size]).to(device)
            probs = model.predict_probs(x, mode)
            outs.append((probs.argmax(dim=1) + 1).cpu().numpy())
    if was_training:
        model.train()
    return np.concatenate(outs, axis=0)


def evaluate(model: torch.nn.Module, data: ManifestData, mode: str = "fused",
             device: str = "cpu") -> MetricReport:
    """Pooled + per-condition report over a manifest; `seen` pools the
    conditions whose index lies inside the train range."""
    L = data.manifest.num_classes
    k = data.manifest.num_conditions
    preds = predict_labels(model, data.images, mode, device=device)
    total = confusion(preds, data.labels, L)
    report = MetricReport.from_matrix(total, len(data))
    seen_mats, seen_count = [], 0
    for cidx in sorted(set(data.conditions.tolist())):
        keep = data.conditions == cidx
        sub = confusion(preds[keep], data.labels[keep], L)
        name = data.manifest.condition_names.get(cidx, str(cidx))
        report.per_condition[name] = MetricReport.from_matrix(sub, int(keep.sum()))
        if cidx < k:
            seen_mats.append(sub)
            seen_count += int(keep.sum())
    if seen_mats:
        report.seen = MetricReport.from_matrix(np.sum(seen_mats, axis=0), seen_count)
    return report


def point_biserial(confidence: np.ndarray, correct: np.ndarray) -> float:
    """Correlation between the dense confidence and binary pixel correctness."""
    conf = confidence.ravel().astype(np.float64)
    corr = correct.ravel().astype(bool)
    if corr.all() or not corr.any() or conf.std() == 0:
        return 0.0
    m1, m0 = conf[corr].mean(), conf[~corr].mean()
    p = corr.mean()
    return float((m1 - m0) * np.sqrt(p * (1 - p)) / conf.std())


# ---------------------------------------------------------------------------
# report artifacts
# ---------------------------------------------------------------------------

def write_metrics_csv(report: MetricReport, path: Path, class_names: list[str] | None = None) -> None:
    L = report.matrix.shape[0]
    names = class_names or [f"class{i}" for i in range(1, L + 1)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "samples", "miou"] + names)
        for cname, rep in _report_rows(report):
            ious = ["" if np.isnan(v) else f"{v:.6f}" for v in rep.per_class]
            w.writerow([cname, rep.sample_count, f"{rep.miou:.6f}"] + ious)


def _report_rows(report: MetricReport):
    rows = [("all", report)]
    if report.seen is not None:
        rows.append(("seen", report.seen))
    rows.extend(report.per_condition.items())
    return rows


def format_report(report: MetricReport) -> str:
    lines = [f"{'condition':<12}{'samples':>8}{'mIoU':>10}"]
    for cname, rep in _report_rows(report):
        lines.append(f"{cname:<12}{rep.sample_count:>8}{rep.miou:>10.4f}")
    return "\n".join(lines)


def colorize(labels: np.ndarray) -> np.ndarray:
    """[H,W] labels (0=black) -> [3,H,W] uint8 image."""
    out = np.zeros((*labels.shape, 3), dtype=np.uint8)
    for cls in np.unique(labels):
        if cls == 0:
            continue
        out[labels == cls] = PANEL_COLORS[(cls - 1) % len(PANEL_COLORS)]
    return out.transpose(2, 0, 1)


def write_panels(out_dir: Path, index: int, image: np.ndarray, gt: np.ndarray,
                 pred: np.ndarray, pseudo: np.ndarray | None = None,
                 confidence: np.ndarray | None = None) -> None:
    """Per-image diagnostic panels as lossless 8-bit files.

    pseudo-label region map: black = hard (no label), gray = wrong label,
    white = correct label.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    toyworld.save_image(image, out_dir / f"{index:03d}_input.png")
    toyworld.save_image(colorize(pred) / 255.0, out_dir / f"{index:03d}_pred.png")
    err = ((pred != gt) & (gt > 0)).astype(np.float32)
    toyworld.save_image(np.repeat(err[None], 3, axis=0), out_dir / f"{index:03d}_error.png")
    if pseudo is not None:
        region = np.zeros(gt.shape, dtype=np.float32)
        region[(pseudo > 0) & (pseudo != gt)] = 0.5
        region[(pseudo > 0) & (pseudo == gt)] = 1.0
        toyworld.save_image(np.repeat(region[None], 3, axis=0), out_dir / f"{index:03d}_pseudo_regions.png")
    if confidence is not None:
        toyworld.save_image(np.repeat(confidence[None], 3, axis=0), out_dir / f"{index:03d}_confidence.png")
