"""SGD-with-momentum training loop, cosine LR schedule, and inference.

Training is bit-deterministic given (seed, config, dataset): the parameter
init, the per-epoch shuffle, and the flip augmentation all consume a single
PCG64 stream whose state is checkpointed, so resuming from a checkpoint
reproduces an uninterrupted run exactly.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import pyramid as pyr
from .assign import AssignmentMaps, assign, feature_shapes
from .boxes import Detection, nms
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Sample, flip_horizontal, flip_vertical
from .evaluation import MetricsReport, best_f1, pr_sweep
from .kernels import ShapeError
from .losses import sigmoid, total_loss

log = logging.getLogger(__name__)

DEFAULT_SWEEP = tuple(round(0.05 * i, 2) for i in range(1, 20))


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or inconsistent inputs)."""


def lr_schedule(t: int | float, period: int, lr_min: float, lr_max: float) -> float:
    """Cosine annealing from lr_max at t=0 to lr_min at t=period; callers
    restart the schedule by passing t modulo the period."""
    if not 0 <= t <= period:
        raise ValueError(f"step {t} outside [0, {period}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / period))


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             velocity: dict[str, np.ndarray], lr: float, momentum: float,
             weight_decay: float) -> tuple[dict, dict]:
    """One momentum-SGD update, in place:
    v <- momentum*v - lr*(g + weight_decay*theta); theta <- theta + v."""
    for name, theta in params.items():
        g, v = grads[name], velocity[name]
        if g.shape != theta.shape or v.shape != theta.shape:
            raise ShapeError(f"parameter {name}: shapes {theta.shape} / "
                             f"{g.shape} / {v.shape} not aligned")
        v *= momentum
        v -= lr * (g + weight_decay * theta)
        theta += v
    return params, velocity


def predict(params: dict, cfg: pyr.PyramidConfig, images: np.ndarray,
            score_thresh: float, nms_iou: float = 0.1
            ) -> list[list[Detection]]:
    """Decode per-cell detections above the score threshold, then NMS.

    Returns one detection list per batch image, boxes clamped to image
    bounds.  Images must match the trained input size; there is no implicit
    resizing.
    """
    n, c, h, w = images.shape
    if (h, w) != (cfg.input_size, cfg.input_size):
        raise ShapeError(f"predict expects {cfg.input_size}x{cfg.input_size} "
                         f"images, got {h}x{w}")
    out, _ = pyr.network_forward(images, params, cfg, want_cache=False)
    size = float(cfg.input_size)
    results: list[list[Detection]] = []
    for i in range(n):
        dets: list[Detection] = []
        for level, stride in enumerate(cfg.strides):
            scores = sigmoid(out.cls[level][i, 0].astype(np.float64))
            keep = scores > score_thresh
            if not keep.any():
                continue
            iy, ix = np.nonzero(keep)
            deltas = out.reg[level][i][:, iy, ix].astype(np.float64)
            px = stride * (ix + 1.0)
            py = stride * (iy + 1.0)
            cx = px + stride * deltas[0]
            cy = py + stride * deltas[1]
            bw = stride * np.exp(deltas[2])
            bh = stride * np.exp(deltas[3])
            x1 = np.clip(cx - bw / 2.0, 0.0, size)
            y1 = np.clip(cy - bh / 2.0, 0.0, size)
            x2 = np.clip(cx + bw / 2.0, 0.0, size)
            y2 = np.clip(cy + bh / 2.0, 0.0, size)
            for j in range(len(iy)):
                if x2[j] > x1[j] and y2[j] > y1[j]:
                    dets.append(Detection((float(x1[j]), float(y1[j]),
                                           float(x2[j]), float(y2[j])),
                                          float(scores[iy[j], ix[j]])))
        results.append(nms(dets, nms_iou))
    return results


def predict_samples(params: dict, cfg: pyr.PyramidConfig, samples: list[Sample],
                    score_thresh: float, nms_iou: float = 0.1,
                    batch_size: int = 16) -> list[list[Detection]]:
    dets: list[list[Detection]] = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        images = np.concatenate([s.image for s in chunk]).astype(
            params_dtype(params))
        dets.extend(predict(params, cfg, images, score_thresh, nms_iou))
    return dets


def params_dtype(params: dict) -> np.dtype:
    return next(iter(params.values())).dtype


def sweep_samples(params: dict, cfg: pyr.PyramidConfig, samples: list[Sample],
                  thresholds=DEFAULT_SWEEP, nms_iou: float = 0.1):
    """PR sweep of a model over a sample list (one inference pass)."""
    floor = min(thresholds)
    dets = predict_samples(params, cfg, samples, score_thresh=floor,
                           nms_iou=nms_iou)
    gts = [s.gts for s in samples]
    return pr_sweep(dets, gts, list(thresholds))


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    val_f1: float


def _augment(sample: Sample, rng: np.random.Generator) -> Sample:
    # always draw both coins so the stream shape is input-independent
    do_h, do_v = rng.random(2)
    if do_h < 0.5:
        sample = flip_horizontal(sample)
    if do_v < 0.5:
        sample = flip_vertical(sample)
    return sample


def train(train_samples: list[Sample], config: RunConfig, out_path: str,
          val_samples: list[Sample] | None = None,
          resume_from: str | None = None) -> tuple[Checkpoint, list[EpochLog]]:
    """Run the epoch loop, checkpointing to out_path after every epoch.

    Resuming restores parameters, optimizer velocity, epoch counter, and the
    RNG stream from the checkpoint, so a resumed run is step-for-step
    identical to an uninterrupted one.
    """
    if not train_samples:
        raise TrainingError("training set is empty")
    tcfg, pcfg = config.train, config.pyramid
    dtype = np.float32 if tcfg.dtype == "float32" else np.float64
    levels = feature_shapes(pcfg.input_size, pcfg.strides)

    rng = np.random.default_rng(tcfg.seed)
    params = pyr.init_params(pcfg, rng, dtype)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    start_epoch = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        config = ckpt.config
        tcfg, pcfg = config.train, config.pyramid
        levels = feature_shapes(pcfg.input_size, pcfg.strides)
        params, velocity = ckpt.params, ckpt.velocity
        start_epoch = ckpt.epoch
        rng.bit_generator.state = ckpt.rng_state

    history: list[EpochLog] = []
    for epoch in range(start_epoch, tcfg.epochs):
        lr = lr_schedule(epoch % tcfg.anneal_period, tcfg.anneal_period,
                         tcfg.lr_min, tcfg.lr_max)
        order = rng.permutation(len(train_samples))
        epoch_loss, batches = 0.0, 0
        for b0 in range(0, len(order), tcfg.batch_size):
            batch = [_augment(train_samples[i], rng)
                     for i in order[b0:b0 + tcfg.batch_size]]
            images = np.concatenate([s.image for s in batch]).astype(dtype)
            maps = [assign(s.gts, levels, config.assign) for s in batch]
            out, cache = pyr.network_forward(images, params, pcfg, want_cache=True)
            report, g_cls, g_reg = total_loss(out, maps, config.loss)
            if not math.isfinite(report.total):
                raise TrainingError(f"non-finite loss {report.total} at epoch "
                                    f"{epoch} batch {batches}")
            grads = pyr.network_backward(g_cls, g_reg, params, pcfg, cache)
            sgd_step(params, grads, velocity, lr, tcfg.momentum,
                     tcfg.weight_decay)
            epoch_loss += report.total
            batches += 1

        val_f1 = float("nan")
        if val_samples:
            rows = sweep_samples(params, pcfg, val_samples)
            val_f1 = best_f1(rows)[1].f1
        entry = EpochLog(epoch=epoch + 1, lr=lr, loss=epoch_loss / max(batches, 1),
                         val_f1=val_f1)
        history.append(entry)
        log.info("epoch %d/%d lr %.6f loss %.4f val_f1 %.4f",
                 entry.epoch, tcfg.epochs, entry.lr, entry.loss, entry.val_f1)

        ckpt = Checkpoint(config=config, params=params, velocity=velocity,
                          epoch=epoch + 1, rng_state=rng.bit_generator.state)
        save_checkpoint(out_path, ckpt)

    final = Checkpoint(config=config, params=params, velocity=velocity,
                       epoch=tcfg.epochs, rng_state=rng.bit_generator.state)
    if start_epoch >= tcfg.epochs:
        save_checkpoint(out_path, final)
    return final, history
