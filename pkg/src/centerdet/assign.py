"""Anchor-free label assignment over a feature pyramid.

Each ground-truth box is matched to the pyramid level whose stride best
fits its size.  On that level, grid cells inside a centered sub-box of the
ground truth (scaled by eps_p) become positive; cells outside a larger
centered sub-box (scaled by eps_n) stay negative; the ring in between is
ignored.  On every other level a shrunken copy of the non-negative region
is projected, scaled by a cosine factor of the level distance, and its
cells are ignored so the model is not penalized for responding there.

Grid cells follow the 1-based convention: cell (i, j) of a level with
stride s sits at pixel (s*(i+1), s*(j+1)) for 0-based array indices, i.e.
pixel coordinates run from s to s*m inclusive.  Region membership is
inclusive: a point exactly on the region edge counts as inside.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, encode

log = logging.getLogger(__name__)

LABEL_NEGATIVE = 0
LABEL_POSITIVE = 1
LABEL_IGNORED = -1

# (height, width, stride) of one pyramid level
LevelShape = tuple[int, int, int]


@dataclass(frozen=True)
class AssignConfig:
    eps_p: float = 0.75
    eps_n: float = 1.25
    lam: float = 2.5
    alpha_gauss: float = 1.0
    k: int = 6
    cosine_projection: bool = True
    gaussian_penalty: bool = True
    # Alternative reading of the projection that also scales positive
    # regions onto neighboring levels; off by default.
    project_positives: bool = False

    def __post_init__(self) -> None:
        if not (self.eps_p > 0 and self.eps_n > 0 and self.lam > 0
                and self.alpha_gauss > 0 and self.k >= 1):
            raise ValueError(f"assign config fields must be positive: {self}")
        if self.eps_p >= self.eps_n:
            raise ValueError(f"eps_p must be < eps_n, got {self.eps_p} >= {self.eps_n}")


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    cls: int = 0

    def __post_init__(self) -> None:
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"ground truth box {self.box} has non-positive sides")

    @property
    def center(self) -> tuple[float, float]:
        x1, y1, x2, y2 = self.box
        return ((x1 + x2) / 2.0, (y1 + y2) / 2.0)

    @property
    def size(self) -> tuple[float, float]:
        x1, y1, x2, y2 = self.box
        return (x2 - x1, y2 - y1)


def validate_gt(gt: GroundTruth, image_size: tuple[int, int]) -> None:
    """Raise if the box leaves the (width, height) image bounds."""
    x1, y1, x2, y2 = gt.box
    w, h = image_size
    if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
        raise ValueError(f"ground truth box {gt.box} outside image bounds {w}x{h}")


@dataclass
class AssignmentMaps:
    """Per-level label / regression-target / positive-weight grids.

    labels[l] is (H, W) int8 with values LABEL_POSITIVE / LABEL_NEGATIVE /
    LABEL_IGNORED; targets[l] is (4, H, W) and weights[l] is (H, W), both
    meaningful only where the label is positive (zero elsewhere).
    """

    labels: list[np.ndarray]
    targets: list[np.ndarray]
    weights: list[np.ndarray]
    gts_without_positives: int = 0

    @property
    def n_pos(self) -> int:
        return int(sum((lab == LABEL_POSITIVE).sum() for lab in self.labels))

    def as_dict(self, strides: tuple[int, ...]) -> dict:
        return {
            "gts_without_positives": self.gts_without_positives,
            "levels": [
                {
                    "stride": int(s),
                    "shape": [int(lab.shape[0]), int(lab.shape[1])],
                    "labels": lab.tolist(),
                    "targets": tgt.tolist(),
                    "weights": wt.tolist(),
                }
                for s, lab, tgt, wt in zip(strides, self.labels, self.targets,
                                           self.weights)
            ],
        }


def feature_shapes(input_size: int, strides: tuple[int, ...]) -> list[LevelShape]:
    """Level (height, width, stride) triples for a square input."""
    for s in strides:
        if input_size % s != 0:
            raise ValueError(f"input size {input_size} not divisible by stride {s}")
    return [(input_size // s, input_size // s, s) for s in strides]


def grid_points(height: int, width: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates (xs, ys) of the cell centers of one level."""
    if height < 1 or width < 1:
        raise ValueError(f"level dims must be positive, got {height}x{width}")
    xs = stride * (np.arange(width, dtype=float) + 1.0)
    ys = stride * (np.arange(height, dtype=float) + 1.0)
    return xs, ys


def best_level(gt: GroundTruth, strides: tuple[int, ...]) -> int:
    """Level whose stride best matches the box size.

    Matches log2(max side) against log2(4 * stride); ties break toward the
    smaller stride.
    """
    w, h = gt.size
    target = math.log2(max(w, h))
    best_i, best_d = 0, float("inf")
    for i, s in enumerate(strides):
        d = abs(target - math.log2(4.0 * s))
        if d < best_d - 1e-12:
            best_i, best_d = i, d
    return best_i


def cosine_factor(d: int, k: int, lam: float) -> float:
    """Shrink factor for projecting the non-negative region d levels away."""
    if d < 0:
        raise ValueError(f"level distance must be >= 0, got {d}")
    theta = lam * d * math.pi / (2.0 * k)
    # Hold the factor at zero past the first half period so larger
    # distances never come back positive.
    if theta >= math.pi:
        return 0.0
    return max(math.cos(theta), 0.0)


def gaussian_weight(gt: GroundTruth, point: tuple[float, float],
                    alpha_gauss: float) -> float:
    """Unnormalized 2-D Gaussian weight of a positive cell.

    Equals 1 exactly at the ground-truth centroid and decays with squared
    distance, scaled by the box's larger side.
    """
    cx, cy = gt.center
    w, h = gt.size
    px, py = point
    d2 = (cx - px) ** 2 + (cy - py) ** 2
    return math.exp(-d2 / (2.0 * alpha_gauss * max(w, h) ** 2))


def _window(center: float, half: float, stride: int, n_cells: int
            ) -> tuple[int, int]:
    """Cell-index range that could intersect [center-half, center+half],
    padded by one cell so the exact membership test below is authoritative."""
    lo = int(math.floor((center - half) / stride - 1.0)) - 1
    hi = int(math.ceil((center + half) / stride - 1.0)) + 1
    return max(lo, 0), min(hi, n_cells - 1)


def _region_mask(gt: GroundTruth, scale: float, level: LevelShape
                 ) -> tuple[slice, slice, np.ndarray, np.ndarray, np.ndarray]:
    """Boolean membership mask of the centered region scale*(w, h) over a
    candidate window of the level grid.

    Returns (row slice, col slice, mask, window xs, window ys).
    """
    h_cells, w_cells, s = level
    cx, cy = gt.center
    w, h = gt.size
    hx, hy = scale * w / 2.0, scale * h / 2.0
    x_lo, x_hi = _window(cx, hx, s, w_cells)
    y_lo, y_hi = _window(cy, hy, s, h_cells)
    if x_lo > x_hi or y_lo > y_hi:
        empty = np.zeros((0, 0), dtype=bool)
        return slice(0, 0), slice(0, 0), empty, np.empty(0), np.empty(0)
    xs = s * (np.arange(x_lo, x_hi + 1, dtype=float) + 1.0)
    ys = s * (np.arange(y_lo, y_hi + 1, dtype=float) + 1.0)
    in_x = (xs >= cx - hx) & (xs <= cx + hx)
    in_y = (ys >= cy - hy) & (ys <= cy + hy)
    mask = in_y[:, None] & in_x[None, :]
    return slice(y_lo, y_hi + 1), slice(x_lo, x_hi + 1), mask, xs, ys


def _mark_positive(gt: GroundTruth, level: LevelShape, config: AssignConfig,
                   scale: float, labels: np.ndarray, targets: np.ndarray,
                   weights: np.ndarray) -> bool:
    """Mark the positive region of one gt on one level; returns whether the
    region geometrically covers at least one grid point."""
    rows, cols, mask, xs, ys = _region_mask(gt, scale, level)
    if not mask.any():
        return False
    win_lab = labels[rows, cols]
    new = mask & (win_lab != LABEL_POSITIVE)   # an earlier gt's positive wins
    win_lab[new] = LABEL_POSITIVE

    s = level[2]
    cx, cy = gt.center
    w, h = gt.size
    deltas = np.empty((4,) + mask.shape)
    deltas[0] = ((cx - xs) / s)[None, :]
    deltas[1] = ((cy - ys) / s)[:, None]
    deltas[2] = math.log(w / s)
    deltas[3] = math.log(h / s)
    targets[:, rows, cols][:, new] = deltas[:, new]

    if config.gaussian_penalty:
        d2 = ((cx - xs) ** 2)[None, :] + ((cy - ys) ** 2)[:, None]
        psi = np.exp(-d2 / (2.0 * config.alpha_gauss * max(w, h) ** 2))
    else:
        psi = np.ones(mask.shape)
    weights[rows, cols][new] = psi[new]
    return True


def _mark_ignored(gt: GroundTruth, level: LevelShape, scale: float,
                  labels: np.ndarray) -> None:
    rows, cols, mask, _, _ = _region_mask(gt, scale, level)
    if not mask.any():
        return
    win = labels[rows, cols]
    win[mask & (win == LABEL_NEGATIVE)] = LABEL_IGNORED


def assign(gts: list[GroundTruth], levels: list[LevelShape],
           config: AssignConfig) -> AssignmentMaps:
    """Build per-level label, regression-target, and weight grids.

    Positives live only on each gt's best level (inside the eps_p region);
    the eps_n region's remainder is ignored there.  Other levels receive
    cosine-scaled ignore regions.  Overlaps resolve as positive > ignored >
    negative, and the first gt in list order keeps a contested positive cell.
    """
    if len(levels) != config.k:
        raise ValueError(f"got {len(levels)} levels but config.k = {config.k}")
    strides = tuple(s for (_, _, s) in levels)
    labels = [np.zeros((h, w), dtype=np.int8) for (h, w, _) in levels]
    targets = [np.zeros((4, h, w)) for (h, w, _) in levels]
    weights = [np.zeros((h, w)) for (h, w, _) in levels]
    lost = 0

    for gt in gts:
        best = best_level(gt, strides)
        covered = False
        for l, level in enumerate(levels):
            if l == best:
                covered = _mark_positive(gt, level, config, config.eps_p,
                                         labels[l], targets[l], weights[l])
                _mark_ignored(gt, level, config.eps_n, labels[l])
            else:
                if not config.cosine_projection:
                    continue
                phi = cosine_factor(abs(best - l), config.k, config.lam)
                if phi <= 0.0:
                    continue
                if config.project_positives:
                    _mark_positive(gt, level, config, phi * config.eps_p,
                                   labels[l], targets[l], weights[l])
                _mark_ignored(gt, level, phi * config.eps_n, labels[l])
        if not covered:
            lost += 1
            log.warning("ground truth %s captured no grid point on its best "
                        "level (stride %d)", gt.box, strides[best])

    return AssignmentMaps(labels, targets, weights, lost)
