"""Pixel confusion counts and IoU / precision / recall / F1 reports."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

CLASSES = ("background", "defect")


@dataclass(frozen=True)
class ClassCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "ClassCounts") -> "ClassCounts":
        return ClassCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class ConfusionCounts:
    per_class: dict  # class name -> ClassCounts

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts({c: self.per_class[c] + other.per_class[c] for c in CLASSES})

    @property
    def total(self) -> int:
        c = self.per_class["defect"]
        return c.tp + c.fp + c.fn + c.tn


@dataclass
class ClassMetrics:
    iou: float
    precision: float
    recall: float
    f1: float


@dataclass
class MetricsReport:
    per_class: dict  # class name -> ClassMetrics
    miou: float
    n_images: int = 1
    meta: dict = field(default_factory=dict)

    @property
    def defect(self) -> ClassMetrics:
        return self.per_class["defect"]

    def to_dict(self) -> dict:
        ts = os.environ.get("SOURCE_DATE_EPOCH")
        out = {
            "method": self.meta.get("method"),
            "delta": self.meta.get("delta"),
            "layers": self.meta.get("layers"),
            "per_class": {c: vars(m).copy() for c, m in self.per_class.items()},
            "miou": self.miou,
            "n_images": self.n_images,
            "timestamp": int(ts) if ts is not None else int(time.time()),
        }
        extra = {k: v for k, v in self.meta.items() if k not in ("method", "delta", "layers")}
        if extra:
            out["meta"] = extra
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table_row(self, name: str | None = None) -> str:
        """``name | IoU | Precision | Recall | Micro-F1`` in percent."""
        d = self.defect
        name = name or str(self.meta.get("method", ""))
        return f"{name:<16s} {100 * d.iou:6.2f} {100 * d.precision:6.2f} {100 * d.recall:6.2f} {100 * d.f1:6.2f}"


TABLE_HEADER = f"{'method':<16s} {'IoU':>6s} {'Prec':>6s} {'Rec':>6s} {'F1':>6s}"


def confusion(pred, gt) -> ConfusionCounts:
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"confusion: prediction shape {p.shape} != ground truth shape {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts({
        "defect": ClassCounts(tp, fp, fn, tn),
        "background": ClassCounts(tn, fn, fp, tp),
    })


def _ratio(num: int, den: int, empty: float) -> float:
    return num / den if den else empty


def class_metrics(c: ClassCounts) -> ClassMetrics:
    iou = _ratio(c.tp, c.tp + c.fp + c.fn, 1.0)
    precision = _ratio(c.tp, c.tp + c.fp, 0.0)
    recall = _ratio(c.tp, c.tp + c.fn, 0.0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    # a perfectly empty class is predicted perfectly
    if c.tp + c.fp + c.fn == 0:
        precision = recall = f1 = 1.0
    return ClassMetrics(iou, precision, recall, f1)


def metrics(counts: ConfusionCounts, n_images: int = 1, **meta) -> MetricsReport:
    per = {c: class_metrics(counts.per_class[c]) for c in CLASSES}
    miou = sum(m.iou for m in per.values()) / len(per)
    return MetricsReport(per, miou, n_images, dict(meta))


def evaluate_set(preds, gts, mode: str = "micro", **meta) -> MetricsReport:
    """Aggregate over images: ``micro`` sums counts, ``macro`` averages per-image metrics."""
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError(f"evaluate_set: {len(preds)} predictions but {len(gts)} ground truths")
    if not preds:
        raise ValueError("evaluate_set: no images")
    counts = [confusion(p, g) for p, g in zip(preds, gts)]
    if mode == "micro":
        total = counts[0]
        for c in counts[1:]:
            total = total + c
        return metrics(total, len(counts), aggregation="micro", **meta)
    if mode == "macro":
        reports = [metrics(c) for c in counts]
        per = {
            cls: ClassMetrics(*(float(np.mean([getattr(r.per_class[cls], f) for r in reports]))
                                for f in ("iou", "precision", "recall", "f1")))
            for cls in CLASSES
        }
        return MetricsReport(per, sum(m.iou for m in per.values()) / len(per), len(counts),
                             {"aggregation": "macro", **meta})
    raise ValueError(f"unknown aggregation mode {mode!r}")
