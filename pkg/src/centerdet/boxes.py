"""Box geometry: stride-encoded regression deltas, IoU, and greedy NMS.

Boxes are (x1, y1, x2, y2) tuples in input-image pixel coordinates with
x2 > x1 and y2 > y1, origin top-left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    cls: int = 0

    def __post_init__(self) -> None:
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"degenerate detection box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


def encode(gt_box: Box, point: tuple[float, float], stride: float) -> np.ndarray:
    """Offset vector (dcx, dcy, dw, dh) of a box relative to a grid point.

    Center offsets are measured in units of the stride; width and height are
    log-ratios against the stride (natural log).
    """
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    x1, y1, x2, y2 = gt_box
    w, h = x2 - x1, y2 - y1
    if w <= 0 or h <= 0:
        raise ValueError(f"box {gt_box} has a non-positive side")
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    px, py = point
    return np.array([(cx - px) / stride, (cy - py) / stride,
                     math.log(w / stride), math.log(h / stride)])


def decode(delta: np.ndarray, point: tuple[float, float], stride: float) -> Box:
    """Inverse of encode: recover the box described by a delta at a point."""
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    dcx, dcy, dw, dh = (float(v) for v in delta)
    cx = point[0] + stride * dcx
    cy = point[1] + stride * dcy
    w = stride * math.exp(dw)
    h = stride * math.exp(dh)
    return (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def iou(a: Box, b: Box) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def sort_detections(dets: list[Detection]) -> list[Detection]:
    """Descending score; ties broken by ascending (x1, y1, x2, y2)."""
    return sorted(dets, key=lambda d: (-d.score, d.box))


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy NMS: keep a detection iff its IoU with every previously kept
    one is <= iou_threshold.  Output order follows the score sort."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou threshold {iou_threshold} outside [0, 1]")
    order = sort_detections(dets)
    if not order:
        return []
    b = np.array([d.box for d in order])
    areas = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    alive = np.ones(len(order), dtype=bool)
    kept: list[Detection] = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        kept.append(order[i])
        rest = alive.copy()
        rest[:i + 1] = False
        idx = np.nonzero(rest)[0]
        if idx.size == 0:
            continue
        ix = np.minimum(b[i, 2], b[idx, 2]) - np.maximum(b[i, 0], b[idx, 0])
        iy = np.minimum(b[i, 3], b[idx, 3]) - np.maximum(b[i, 1], b[idx, 1])
        inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
        overlap = inter / (areas[i] + areas[idx] - inter)
        alive[idx[overlap > iou_threshold]] = False
    return kept
