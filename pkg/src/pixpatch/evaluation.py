"""Confusion-matrix accumulation and per-class IoU / mIoU reporting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .validation import IGNORE_LABEL, ValidationError, check_same_shape, require


class ConfusionMatrix:
    """C x C integer counts; entry (g, p) = pixels with truth g predicted p.

    IGNORE ground-truth pixels are never counted. Accumulation is integer, so
    sharding samples across workers and summing matrices is exact and
    order-independent.
    """

    def __init__(self, class_count: int, counts: np.ndarray | None = None):
        require(class_count >= 2, "class_count must be >= 2")
        self.class_count = class_count
        if counts is None:
            counts = np.zeros((class_count, class_count), dtype=np.int64)
        require(counts.shape == (class_count, class_count), "bad counts shape")
        self.counts = counts.astype(np.int64, copy=True)

    def update(self, predictions, ground_truth) -> "ConfusionMatrix":
        pred = np.asarray(predictions)
        gt = np.asarray(ground_truth)
        check_same_shape(pred, gt, "predictions/ground truth")
        scored = gt != IGNORE_LABEL
        pred_v = pred[scored].astype(np.int64)
        gt_v = gt[scored].astype(np.int64)
        require(pred_v.size == 0 or (int(pred_v.min()) >= 0
                and int(pred_v.max()) < self.class_count),
                "predictions contain out-of-range class ids")
        require(gt_v.size == 0 or (int(gt_v.min()) >= 0
                and int(gt_v.max()) < self.class_count),
                "ground truth contains out-of-range class ids")
        flat = self.class_count * gt_v + pred_v
        binned = np.bincount(flat, minlength=self.class_count ** 2)
        self.counts += binned.reshape(self.class_count, self.class_count)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        require(other.class_count == self.class_count, "class_count mismatch")
        self.counts += other.counts
        return self

    def per_class_iou(self) -> np.ndarray:
        """IoU_c = TP / (TP + FP + FN); NaN marks classes absent from both."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - np.diag(self.counts)
        fn = self.counts.sum(axis=1) - np.diag(self.counts)
        denom = tp + fp + fn
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(denom > 0, tp / denom, np.nan)
        return iou

    def mean_iou(self) -> float:
        iou = self.per_class_iou()
        present = ~np.isnan(iou)
        if not present.any():
            raise ValidationError("every class is absent; mIoU is undefined")
        return float(iou[present].mean())


def mean_iou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN for absent classes) and the mean over present ones."""
    return cm.per_class_iou(), cm.mean_iou()


@dataclass
class EvalReport:
    class_count: int
    per_class_iou: list
    miou: float
    pixel_accuracy: float
    scored_pixels: int
    split: str = ""
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {"split": self.split, "class_count": self.class_count,
                   "per_class_iou": [None if np.isnan(v) else float(v)
                                     for v in self.per_class_iou],
                   "miou": self.miou, "pixel_accuracy": self.pixel_accuracy,
                   "scored_pixels": self.scored_pixels, **self.extras}
        return json.dumps(payload, indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"{'class':>8}  {'IoU':>8}"]
        for c, v in enumerate(self.per_class_iou):
            shown = "absent" if np.isnan(v) else f"{v:8.4f}"
            lines.append(f"{c:>8}  {shown:>8}")
        lines.append(f"{'mIoU':>8}  {self.miou:8.4f}")
        lines.append(f"{'pix acc':>8}  {self.pixel_accuracy:8.4f}")
        return "\n".join(lines)


def report_from_confusion(cm: ConfusionMatrix, split: str = "",
                          extras: dict | None = None) -> EvalReport:
    total = int(cm.counts.sum())
    correct = int(np.diag(cm.counts).sum())
    return EvalReport(class_count=cm.class_count,
                      per_class_iou=list(cm.per_class_iou()),
                      miou=cm.mean_iou(),
                      pixel_accuracy=correct / total if total else 0.0,
                      scored_pixels=total, split=split, extras=extras or {})


def write_report(report: EvalReport, json_path: Path | str,
                 table_path: Path | str | None = None) -> None:
    Path(json_path).write_text(report.to_json() + "\n")
    if table_path is not None:
        Path(table_path).write_text(report.table() + "\n")


def plot_iou_bars(report: EvalReport, out_path: Path | str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    values = [0.0 if np.isnan(v) else v for v in report.per_class_iou]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(range(report.class_count), values, color="#4878cf")
    ax.axhline(report.miou, color="#d65f5f", linestyle="--",
               label=f"mIoU = {report.miou:.3f}")
    ax.set_xlabel("class id")
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_loss_curves(metrics_records: list[dict], out_path: Path | str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    iters = [r["iteration"] for r in metrics_records if "total" in r]
    fig, ax = plt.subplots(figsize=(6, 3))
    for key in ("total", "ce_source", "ce_target", "pixel", "patch"):
        values = [r[key] for r in metrics_records if "total" in r]
        if any(v != 0 for v in values):
            ax.plot(iters, values, label=key, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
