"""Multitask detection loss with analytic gradients.

Localization: Smooth L1 over the 4 regression components of positive cells,
scaled by beta and normalized by the positive count.  Classification: focal
loss on negative cells plus Gaussian-weighted binary cross entropy on
positive cells, both normalized by the positive count.  Ignored cells
contribute nothing to either term.

Probabilities are clamped to [1e-7, 1 - 1e-7] before any log; gradients
treat the clamp as the identity (it only binds at logits beyond +-16 where
the true gradient is negligible anyway).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .assign import LABEL_NEGATIVE, LABEL_POSITIVE, AssignmentMaps

P_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.45
    gamma: float = 2.0
    alpha_t: float = 0.25

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.alpha_t < 1.0:
            raise ValueError(f"alpha_t must be in (0, 1), got {self.alpha_t}")


@dataclass(frozen=True)
class LossReport:
    l_loc: float
    l_cls: float
    total: float
    n_pos: int


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -40.0, 40.0)))


def smooth_l1(x):
    """0.5 x^2 inside |x| < 1, |x| - 0.5 outside."""
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * np.square(x), ax - 0.5)


def smooth_l1_grad(x):
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def focal_term(p, y, gamma: float, alpha_t: float):
    """Focal loss -alpha_t (1 - p_t)^gamma log(p_t) with p_t = p^y (1-p)^(1-y)."""
    p = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    p_t = np.where(np.asarray(y) == 1, p, 1.0 - p)
    return -alpha_t * (1.0 - p_t) ** gamma * np.log(p_t)


def _stack_maps(assignments: Sequence[AssignmentMaps]
                ) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
    """Stack per-sample maps into batch arrays, one triple per level."""
    n_levels = len(assignments[0].labels)
    labels = [np.stack([a.labels[l] for a in assignments]) for l in range(n_levels)]
    targets = [np.stack([a.targets[l] for a in assignments]) for l in range(n_levels)]
    weights = [np.stack([a.weights[l] for a in assignments]) for l in range(n_levels)]
    return labels, targets, weights


def _as_batch(assignment) -> Sequence[AssignmentMaps]:
    if isinstance(assignment, AssignmentMaps):
        return [assignment]
    return list(assignment)


def loc_loss(pred_deltas: Sequence[np.ndarray], target_deltas: Sequence[np.ndarray],
             positive_masks: Sequence[np.ndarray], beta: float
             ) -> tuple[float, list[np.ndarray]]:
    """Smooth L1 localization loss and its gradient w.r.t. the predictions.

    Each level contributes its positive cells' 4 components; the sum is
    scaled by beta / N with N the total positive count.  N = 0 yields a
    zero loss with zero gradients.
    """
    n_pos = int(sum(m.sum() for m in positive_masks))
    grads = [np.zeros_like(p) for p in pred_deltas]
    if n_pos == 0:
        return 0.0, grads
    scale = beta / n_pos
    value = 0.0
    for pred, tgt, mask, grad in zip(pred_deltas, target_deltas, positive_masks,
                                     grads):
        if pred.shape != tgt.shape:
            raise ValueError(f"prediction shape {pred.shape} != target {tgt.shape}")
        m = mask[:, None, :, :]
        diff = (pred - tgt) * m          # zero off-positives; smooth_l1(0) == 0
        value += float(smooth_l1(diff).sum())
        grad += scale * smooth_l1_grad(diff) * m
    return scale * value, grads


def cls_loss(cls_logits: Sequence[np.ndarray], assignment, config: LossConfig
             ) -> tuple[float, list[np.ndarray]]:
    """Classification loss and its gradient w.r.t. the logits.

    Negatives get the focal term, positives get their Gaussian weight times
    binary cross entropy; both sums divide by the positive count (clamped to
    one when a batch has no positives).
    """
    batch = _as_batch(assignment)
    labels, _, weights = _stack_maps(batch)
    n_pos = int(sum((lab == LABEL_POSITIVE).sum() for lab in labels))
    norm = max(n_pos, 1)
    value = 0.0
    grads = []
    for logits, lab, psi in zip(cls_logits, labels, weights):
        if logits.shape[1] != 1:
            raise ValueError("classification head must emit a single channel")
        z = logits[:, 0]
        p = np.clip(sigmoid(z), P_CLAMP, 1.0 - P_CLAMP)
        dpdz = p * (1.0 - p)
        pos = lab == LABEL_POSITIVE
        neg = lab == LABEL_NEGATIVE

        grad = np.zeros_like(z)
        if neg.any():
            pn = p[neg]
            value += float(focal_term(pn, 0, config.gamma, config.alpha_t).sum())
            dldp = -config.alpha_t * (
                config.gamma * pn ** (config.gamma - 1.0) * np.log(1.0 - pn)
                - pn ** config.gamma / (1.0 - pn))
            grad[neg] = dldp * dpdz[neg]
        if pos.any():
            pp = p[pos]
            value += float((psi[pos] * -np.log(pp)).sum())
            grad[pos] = psi[pos] * -(1.0 - pp)
        grads.append((grad / norm)[:, None, :, :].astype(logits.dtype))
    return value / norm, grads


def total_loss(head_outputs, assignment, config: LossConfig
               ) -> tuple[LossReport, list[np.ndarray], list[np.ndarray]]:
    """Combined localization + classification loss over all levels.

    Returns the report plus per-level gradients for the classification
    logits and the regression deltas.
    """
    batch = _as_batch(assignment)
    labels, targets, _ = _stack_maps(batch)
    pos_masks = [lab == LABEL_POSITIVE for lab in labels]
    lcfg = config

    l_loc, reg_grads = loc_loss(head_outputs.reg, targets, pos_masks, lcfg.beta)
    l_cls, cls_grads = cls_loss(head_outputs.cls, batch, lcfg)
    reg_grads = [g.astype(p.dtype) for g, p in zip(reg_grads, head_outputs.reg)]
    n_pos = int(sum(m.sum() for m in pos_masks))
    report = LossReport(l_loc=float(l_loc), l_cls=float(l_cls),
                        total=float(l_loc) + float(l_cls), n_pos=n_pos)
    return report, cls_grads, reg_grads
