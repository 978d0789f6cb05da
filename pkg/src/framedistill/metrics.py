"""Confusion-matrix bookkeeping and segmentation scores (IoU, mIoU, mAcc, oAcc)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import IGNORE_ID


@dataclass(eq=False)
class ConfusionMatrix:
    """K x K counts; rows are ground truth, columns are predictions."""

    counts: np.ndarray

    @classmethod
    def empty(cls, n_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((n_classes, n_classes), dtype=np.uint64))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return self.merge(other)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def accumulate(cm: ConfusionMatrix, gt: np.ndarray, pred: np.ndarray,
               ignore_id: int = IGNORE_ID) -> ConfusionMatrix:
    gt = np.asarray(gt).astype(np.int64).reshape(-1)
    pred = np.asarray(pred).astype(np.int64).reshape(-1)
    if gt.shape != pred.shape:
        raise ValueError(f"gt has {gt.size} labels, pred has {pred.size}")
    k = cm.n_classes
    keep = gt != ignore_id
    gt, pred = gt[keep], pred[keep]
    if np.any(gt >= k) or np.any(gt < 0):
        raise ValueError(f"ground-truth label outside [0, {k})")
    if np.any(pred >= k) or np.any(pred < 0):
        raise ValueError(f"predicted label outside [0, {k})")
    add = np.bincount(gt * k + pred, minlength=k * k).reshape(k, k).astype(np.uint64)
    return ConfusionMatrix(cm.counts + add)


def scores(cm: ConfusionMatrix) -> dict:
    """Per-class IoU and recall plus mIoU, mAcc and oAcc, all as fractions in [0, 1].

    Classes absent from both ground truth and predictions are left out of
    mIoU; classes absent from ground truth are left out of mAcc. Their
    per-class entries are NaN.
    """
    total = cm.total
    if total == 0:
        raise ValueError("cannot score an empty confusion matrix")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fn = c.sum(axis=1) - tp
    fp = c.sum(axis=0) - tp
    union = tp + fp + fn
    support = tp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        recall = np.where(support > 0, tp / support, np.nan)
    return {
        "per_class_iou": iou,
        "per_class_recall": recall,
        "miou": float(np.mean(iou[union > 0])),
        "macc": float(np.mean(recall[support > 0])),
        "oacc": float(tp.sum() / total),
        "points": total,
    }


def _pct(x: float) -> str:
    return "-" if np.isnan(x) else f"{100.0 * x:.2f}"


def format_table(s: dict, class_names: Sequence[str], title: str = "") -> str:
    width = max(len("class"), *(len(n) for n in class_names), len("mean"))
    lines = [title] if title else []
    lines.append(f"{'class':<{width}}  {'IoU%':>7}  {'Acc%':>7}")
    lines.append("-" * (width + 18))
    for name, iou, rec in zip(class_names, s["per_class_iou"], s["per_class_recall"]):
        lines.append(f"{name:<{width}}  {_pct(iou):>7}  {_pct(rec):>7}")
    lines.append("-" * (width + 18))
    lines.append(f"{'mean':<{width}}  {_pct(s['miou']):>7}  {_pct(s['macc']):>7}")
    lines.append(f"oAcc {_pct(s['oacc'])}%   points {s['points']}")
    return "\n".join(lines) + "\n"


def format_csv(s: dict, class_names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "iou", "recall"])
    for name, iou, rec in zip(class_names, s["per_class_iou"], s["per_class_recall"]):
        w.writerow([name, "" if np.isnan(iou) else f"{iou:.6f}", "" if np.isnan(rec) else f"{rec:.6f}"])
    w.writerow(["summary", f"{s['miou']:.6f}", f"{s['macc']:.6f}"])
    w.writerow(["oacc", f"{s['oacc']:.6f}", ""])
    return buf.getvalue()


def scores_json(s: dict, class_names: Sequence[str]) -> dict:
    def clean(x: float):
        return None if np.isnan(x) else round(float(x), 10)

    return {
        "miou": clean(s["miou"]),
        "macc": clean(s["macc"]),
        "oacc": clean(s["oacc"]),
        "points": s["points"],
        "per_class": {n: {"iou": clean(i), "recall": clean(r)}
                      for n, i, r in zip(class_names, s["per_class_iou"], s["per_class_recall"])},
    }
