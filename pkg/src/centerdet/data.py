"""Synthetic blob dataset, annotation ingestion, PPM decoding, and flips.

Synthetic samples are a deterministic function of (seed, index): a smooth
textured background plus a few bright elliptical blobs with compact support,
whose tight bounding boxes are the ground truth.  Blob geometry is quantized
to 1/1024 px so box coordinates survive flips bit-exactly.

Annotations are JSON lines: {"image": "<path>", "boxes": [[x1,y1,x2,y2], ...]}
with pixel floats, origin top-left, x right, y down.  Images are binary (P6)
PPM with maxval 255, decoded to [0, 1] reals.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .assign import GroundTruth, validate_gt

QUANT = 1024.0   # blob geometry grid, in inverse pixels


class AnnotationError(ValueError):
    """An annotation file or image record failed to parse or validate."""


@dataclass
class Sample:
    image: np.ndarray           # (1, 3, H, W), values in [0, 1]
    gts: list[GroundTruth]
    id: str


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 128
    count_range: tuple[int, int] = (1, 3)
    radius_range: tuple[float, float] = (6.0, 20.0)
    texture_amp: float = 0.08
    seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad blob count range {self.count_range}")
        rlo, rhi = self.radius_range
        if not (2.0 < rlo <= rhi < self.image_size / 3.0):
            raise ValueError(f"radius range {self.radius_range} outside "
                             f"(2, {self.image_size / 3})")
        if self.texture_amp < 0:
            raise ValueError(f"texture amplitude must be >= 0, got {self.texture_amp}")


def _bilinear_field(rng: np.random.Generator, coarse: int, size: int,
                    amp: float) -> np.ndarray:
    grid = rng.uniform(-amp, amp, (coarse, coarse))
    t = np.linspace(0.0, coarse - 1.0, size)
    i0 = np.floor(t).astype(int)
    i1 = np.minimum(i0 + 1, coarse - 1)
    f = t - i0
    rows = grid[i0] * (1.0 - f)[:, None] + grid[i1] * f[:, None]
    return rows[:, i0] * (1.0 - f)[None, :] + rows[:, i1] * f[None, :]


def _boxes_overlap(a, b, margin: float) -> bool:
    return (a[0] - margin < b[2] and b[0] - margin < a[2]
            and a[1] - margin < b[3] and b[1] - margin < a[3])


def synth_sample(cfg: SynthConfig, index: int) -> Sample:
    """Deterministic synthetic sample number `index` of the configured set."""
    rng = np.random.default_rng([cfg.seed, index])
    s = cfg.image_size

    base = rng.uniform(0.28, 0.42)
    tint = np.array([1.0, 0.82, 0.74]) * base
    texture = _bilinear_field(rng, 9, s, cfg.texture_amp)
    img = tint[:, None, None] + texture[None, :, :]

    count = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    yy = np.arange(s) + 0.5
    xx = np.arange(s) + 0.5
    gts: list[GroundTruth] = []
    boxes: list[tuple[float, float, float, float]] = []
    for _ in range(count):
        for _attempt in range(100):
            r = rng.uniform(*cfg.radius_range)
            aspect = rng.uniform(0.7, 1.4)
            rx = round(r * aspect * QUANT) / QUANT
            ry = round(r * QUANT) / QUANT
            cx = round(rng.uniform(rx + 1.0, s - rx - 1.0) * QUANT) / QUANT
            cy = round(rng.uniform(ry + 1.0, s - ry - 1.0) * QUANT) / QUANT
            box = (cx - rx, cy - ry, cx + rx, cy + ry)
            if any(_boxes_overlap(box, other, 2.0) for other in boxes):
                continue
            contrast = rng.uniform(0.28, 0.45)
            rho2 = (((xx - cx) / rx) ** 2)[None, :] + (((yy - cy) / ry) ** 2)[:, None]
            bump = contrast * np.clip(1.0 - rho2, 0.0, None) ** 2
            img += bump[None, :, :] * np.array([1.0, 0.9, 0.85])[:, None, None]
            boxes.append(box)
            gts.append(GroundTruth(box))
            break
    img = np.clip(img, 0.0, 1.0).astype(np.float32)[None]
    return Sample(image=img, gts=gts, id=f"synth-{cfg.seed}-{index}")


def synth_dataset(cfg: SynthConfig, count: int, start: int = 0) -> list[Sample]:
    return [synth_sample(cfg, start + i) for i in range(count)]


# -- annotation and image files ------------------------------------------------

def load_annotations(path: str) -> list[tuple[str, list[tuple[float, ...]]]]:
    """Parse a JSONL annotation file into (image path, boxes) records."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise AnnotationError(f"{path} line {lineno}: invalid JSON ({e})")
            if not isinstance(obj, dict) or "image" not in obj:
                raise AnnotationError(f"{path} line {lineno}: expected an object "
                                      "with an 'image' key")
            boxes = []
            for b in obj.get("boxes", []):
                if len(b) != 4:
                    raise AnnotationError(f"{path} line {lineno}: box {b} must "
                                          "have 4 coordinates")
                x1, y1, x2, y2 = (float(v) for v in b)
                if x2 <= x1 or y2 <= y1:
                    raise AnnotationError(f"{path} line {lineno}: box {b} has "
                                          "non-positive sides")
                boxes.append((x1, y1, x2, y2))
            records.append((str(obj["image"]), boxes))
    return records


def write_annotations(path: str, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image, boxes in records:
            fh.write(json.dumps({"image": image, "boxes": [list(b) for b in boxes]})
                     + "\n")


def _read_ppm_token(fh) -> bytes:
    """Next whitespace-delimited header token, skipping '#' comments."""
    token = b""
    while True:
        ch = fh.read(1)
        if ch == b"":
            raise AnnotationError("truncated PPM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def load_image_ppm(path: str) -> np.ndarray:
    """Decode a binary (P6, maxval 255) PPM into a (1, 3, H, W) [0,1] array."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic != b"P6":
            raise AnnotationError(f"{path}: not a P6 PPM (magic {magic!r})")
        width = int(_read_ppm_token(fh))
        height = int(_read_ppm_token(fh))
        maxval = int(_read_ppm_token(fh))
        if maxval != 255:
            raise AnnotationError(f"{path}: unsupported maxval {maxval}")
        raw = fh.read(3 * width * height)
    if len(raw) != 3 * width * height:
        raise AnnotationError(f"{path}: truncated pixel data "
                              f"({len(raw)} of {3 * width * height} bytes)")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]


def write_image_ppm(path: str, image: np.ndarray) -> None:
    if image.ndim != 4 or image.shape[0] != 1 or image.shape[1] != 3:
        raise AnnotationError(f"expected (1, 3, H, W) image, got {image.shape}")
    h, w = image.shape[2:]
    data = np.clip(np.rint(image[0] * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.transpose(1, 2, 0).tobytes())


def load_dataset(annotations_path: str) -> list[Sample]:
    """Load every record of an annotation file, validating box bounds."""
    base = os.path.dirname(os.path.abspath(annotations_path))
    samples = []
    for image_path, boxes in load_annotations(annotations_path):
        full = image_path if os.path.isabs(image_path) else os.path.join(base, image_path)
        image = load_image_ppm(full)
        h, w = image.shape[2:]
        gts = []
        for b in boxes:
            gt = GroundTruth(b)
            try:
                validate_gt(gt, (w, h))
            except ValueError as e:
                raise AnnotationError(f"record {image_path}: {e}")
            gts.append(gt)
        samples.append(Sample(image=image, gts=gts, id=image_path))
    return samples


# -- flips ----------------------------------------------------------------------

def flip_horizontal(sample: Sample) -> Sample:
    w = sample.image.shape[3]
    image = np.ascontiguousarray(sample.image[:, :, :, ::-1])
    gts = [GroundTruth((w - g.box[2], g.box[1], w - g.box[0], g.box[3]), g.cls)
           for g in sample.gts]
    return Sample(image=image, gts=gts, id=sample.id)


def flip_vertical(sample: Sample) -> Sample:
    h = sample.image.shape[2]
    image = np.ascontiguousarray(sample.image[:, :, ::-1, :])
    gts = [GroundTruth((g.box[0], h - g.box[3], g.box[2], h - g.box[1]), g.cls)
           for g in sample.gts]
    return Sample(image=image, gts=gts, id=sample.id)
