"""Confusion-matrix metrics (OA, mIoU, per-class P/R/F1, average F1) and latency."""
import json
import statistics
import time
from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class ClassScore:
    precision: float
    recall: float
    f1: float
    flagged: bool  # some denominator was zero; values replaced by 0


class ConfusionMatrix:
    """counts[pred, true]: rows are predicted classes, columns are true classes."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (num_classes, num_classes) or (self.counts < 0).any():
            raise ValueError("counts must be a non-negative K x K matrix")

    def update(self, predictions, labels):
        pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
        true = np.asarray(labels, dtype=np.int64).reshape(-1)
        if pred.shape != true.shape:
            raise ValueError("predictions and labels differ in length")
        k = self.num_classes
        for name, arr in (("prediction", pred), ("label", true)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise ValueError(f"{name} class outside [0, {k})")
        np.add.at(self.counts, (pred, true), 1)
        return self

    def merge(self, other):
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())


def overall_accuracy(cm):
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return float(100.0 * np.trace(cm.counts) / cm.total)


def f1_score(precision, recall):
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def per_class_prf(cm):
    c = cm.counts.astype(np.float64)
    diag = np.diag(c)
    pred_tot = c.sum(1)
    true_tot = c.sum(0)
    out = []
    for k in range(cm.num_classes):
        flagged = pred_tot[k] == 0 or true_tot[k] == 0
        p = 100.0 * diag[k] / pred_tot[k] if pred_tot[k] else 0.0
        r = 100.0 * diag[k] / true_tot[k] if true_tot[k] else 0.0
        out.append(ClassScore(float(p), float(r), float(f1_score(p, r)), bool(flagged)))
    return out


def class_iou(cm):
    """Per-class IoU in percent; NaN where the class is absent from both sides."""
    c = cm.counts.astype(np.float64)
    diag = np.diag(c)
    union = c.sum(0) + c.sum(1) - diag
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, 100.0 * diag / union, np.nan)


def miou(cm):
    iou = class_iou(cm)
    if np.isnan(iou).all():
        raise ValueError("every class is empty")
    return float(np.nanmean(iou))


def average_f1(cm):
    return float(np.mean([s.f1 for s in per_class_prf(cm)]))


def instance_miou(shape_preds, shape_labels, shape_parts):
    """Part-segmentation mIoU averaged over shapes.

    ``shape_parts[i]`` lists the part ids of shape i's category; a part absent
    from both prediction and truth counts as IoU 1.
    """
    scores = []
    for pred, true, parts in zip(shape_preds, shape_labels, shape_parts):
        pred, true = np.asarray(pred), np.asarray(true)
        ious = []
        for p in parts:
            inter = np.sum((pred == p) & (true == p))
            union = np.sum((pred == p) | (true == p))
            ious.append(1.0 if union == 0 else inter / union)
        scores.append(np.mean(ious))
    if not scores:
        raise ValueError("no shapes to score")
    return 100.0 * float(np.mean(scores))


def measure_latency(model, points, repeats=10, warmup=3):
    """Median forward wall-clock time in milliseconds (eval mode, no grad)."""
    was_training = model.training
    model.eval()
    times = []
    with torch.no_grad():
        for _ in range(warmup):
            model(points)
        for _ in range(max(1, repeats)):
            t0 = time.perf_counter()
            model(points)
            times.append((time.perf_counter() - t0) * 1000.0)
    model.train(was_training)
    return statistics.median(times)


def build_report(cm, class_names=None, latency_ms=None, config_echo="", seed=None):
    names = class_names or [f"class{k}" for k in range(cm.num_classes)]
    scores = per_class_prf(cm)
    return {
        "oa": overall_accuracy(cm),
        "miou": miou(cm),
        "avg_f1": average_f1(cm),
        "per_class": {
            name: {"precision": s.precision, "recall": s.recall, "f1": s.f1, "flagged": s.flagged}
            for name, s in zip(names, scores)
        },
        "confusion": cm.counts.tolist(),
        "latency_ms": latency_ms,
        "config_echo": config_echo,
        "seed": seed,
    }


def write_report(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
