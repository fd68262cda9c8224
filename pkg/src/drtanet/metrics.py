"""Pixel-level precision, recall and F1 for binary change masks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    mode: str = "aggregate"
    # set when a denominator was zero and the metric was defined as 0
    precision_degenerate: bool = False
    recall_degenerate: bool = False

    def csv_row(self, epoch) -> str:
        return (
            f"{epoch},{self.tp},{self.fp},{self.fn},{self.precision:.6f},"
            f"{self.recall:.6f},{self.f1:.6f},{self.mode}"
        )

    def format(self) -> str:
        flags = []
        if self.precision_degenerate:
            flags.append("precision undefined (no positive predictions)")
        if self.recall_degenerate:
            flags.append("recall undefined (no positive pixels)")
        text = (
            f"[{self.mode}] TP={self.tp} FP={self.fp} FN={self.fn} "
            f"precision={self.precision:.3f} recall={self.recall:.3f} f1={self.f1:.3f}"
        )
        return text + (f"  ({'; '.join(flags)})" if flags else "")


CSV_HEADER = "epoch,tp,fp,fn,precision,recall,f1,mode"


def binarize(logits, threshold: float = 0.5) -> np.ndarray:
    """1 where sigmoid(logit) > threshold."""
    z = np.asarray(logits, dtype=np.float64)
    cut = np.log(threshold / (1.0 - threshold))
    return (z > cut).astype(np.uint8)


def confusion(pred, truth) -> tuple[int, int, int]:
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"confusion: prediction {p.shape} and truth {t.shape} differ in shape")
    for name, a in (("prediction", p), ("truth", t)):
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"confusion: {name} mask is not binary")
    p = p.astype(bool)
    t = t.astype(bool)
    return int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t))


def prf1(tp: int, fp: int, fn: int, mode: str = "aggregate") -> MetricsReport:
    """Precision = TP/(TP+FP), Recall = TP/(TP+FN), F1 = 2PR/(P+R); zero denominators give 0 with a flag."""
    if min(tp, fp, fn) < 0:
        raise ValueError("confusion counts must be non-negative")
    p_deg = tp + fp == 0
    r_deg = tp + fn == 0
    precision = 0.0 if p_deg else tp / (tp + fp)
    recall = 0.0 if r_deg else tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * recall * precision / (recall + precision)
    return MetricsReport(tp, fp, fn, precision, recall, f1, mode, p_deg, r_deg)


class MetricAccumulator:
    """Sums confusion counts over images; reports aggregate and per-image-mean metrics."""

    def __init__(self):
        self.counts: list[tuple[int, int, int]] = []

    def update(self, pred, truth):
        p = np.asarray(pred)
        t = np.asarray(truth)
        if p.ndim == 2:
            p, t = p[None], t[None]
        for pi, ti in zip(p, t):
            self.counts.append(confusion(pi, ti))

    def extend(self, counts: Iterable[tuple[int, int, int]]):
        self.counts.extend(counts)

    def aggregate(self) -> MetricsReport:
        tp = sum(c[0] for c in self.counts)
        fp = sum(c[1] for c in self.counts)
        fn = sum(c[2] for c in self.counts)
        return prf1(tp, fp, fn, "aggregate")

    def per_image_mean(self) -> MetricsReport:
        reports = [prf1(*c) for c in self.counts]
        agg = self.aggregate()
        if not reports:
            return MetricsReport(0, 0, 0, 0.0, 0.0, 0.0, "per_image_mean", True, True)
        return MetricsReport(
            agg.tp,
            agg.fp,
            agg.fn,
            float(np.mean([r.precision for r in reports])),
            float(np.mean([r.recall for r in reports])),
            float(np.mean([r.f1 for r in reports])),
            "per_image_mean",
            any(r.precision_degenerate for r in reports),
            any(r.recall_degenerate for r in reports),
        )
