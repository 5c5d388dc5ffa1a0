"""Centroid-based detection evaluation: TP/FP/FN counting and P/R/F1/F2.

A detection is a true positive when its box centroid falls inside (edges
inclusive) a not-yet-matched ground-truth box.  Extra detections landing in
an already-matched ground truth count neither way; detections inside no
ground truth are false positives; unmatched ground truths are false
negatives.  Score thresholds are strict: a detection survives a threshold t
iff score > t.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .assign import GroundTruth
from .boxes import Detection, sort_detections


@dataclass(frozen=True)
class EvalCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "EvalCounts") -> "EvalCounts":
        return EvalCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    f2: float
    counts: EvalCounts


def _centroid(box) -> tuple[float, float]:
    return ((box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0)


def _inside(point, box) -> bool:
    return box[0] <= point[0] <= box[2] and box[1] <= point[1] <= box[3]


def match_image(dets: Sequence[Detection], gts: Sequence[GroundTruth]) -> EvalCounts:
    """Match one image's detections (already NMS-filtered and thresholded)
    against its ground truths."""
    matched = [False] * len(gts)
    tp = fp = 0
    for det in sort_detections(list(dets)):
        c = _centroid(det.box)
        hit = None
        in_matched = False
        for i, gt in enumerate(gts):
            if _inside(c, gt.box):
                if matched[i]:
                    in_matched = True
                elif hit is None:
                    hit = i
        if hit is not None:
            matched[hit] = True
            tp += 1
        elif not in_matched:
            fp += 1
    return EvalCounts(tp=tp, fp=fp, fn=matched.count(False))


def metrics(counts: EvalCounts) -> MetricsReport:
    """Precision, recall, F1 and F2 from counts; empty denominators give 0."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    pre = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * pre * rec / (pre + rec) if pre + rec else 0.0
    f2 = 5.0 * pre * rec / (4.0 * pre + rec) if 4.0 * pre + rec else 0.0
    return MetricsReport(precision=pre, recall=rec, f1=f1, f2=f2, counts=counts)


def evaluate_at_threshold(dets_per_image: Sequence[Sequence[Detection]],
                          gts_per_image: Sequence[Sequence[GroundTruth]],
                          threshold: float) -> MetricsReport:
    total = EvalCounts()
    for dets, gts in zip(dets_per_image, gts_per_image):
        kept = [d for d in dets if d.score > threshold]
        total = total + match_image(kept, gts)
    return metrics(total)


def pr_sweep(dets_per_image: Sequence[Sequence[Detection]],
             gts_per_image: Sequence[Sequence[GroundTruth]],
             thresholds: Sequence[float]) -> list[tuple[float, MetricsReport]]:
    """One metrics row per ascending threshold over the whole image set."""
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError(f"{len(dets_per_image)} detection lists vs "
                         f"{len(gts_per_image)} ground-truth lists")
    return [(t, evaluate_at_threshold(dets_per_image, gts_per_image, t))
            for t in thresholds]


def pr_table_csv(rows: Sequence[tuple[float, MetricsReport]]) -> str:
    lines = ["threshold,precision,recall,f1,f2"]
    for t, rep in rows:
        lines.append(f"{t:.6f},{rep.precision:.6f},{rep.recall:.6f},"
                     f"{rep.f1:.6f},{rep.f2:.6f}")
    return "\n".join(lines) + "\n"


def best_f1(rows: Sequence[tuple[float, MetricsReport]]
            ) -> tuple[float, MetricsReport]:
    """The sweep row with the highest F1 (first such threshold on ties)."""
    if not rows:
        raise ValueError("empty sweep")
    best = rows[0]
    for row in rows[1:]:
        if row[1].f1 > best[1].f1:
            best = row
    return best
