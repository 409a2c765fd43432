"""Focal loss, smooth-L1, toy detection-head losses and the combined objective."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class FocalConfig:
    gamma: float = 2.0
    beta: tuple[float, ...] | None = None    # per-class weights; None means all ones

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.beta is not None and min(self.beta) <= 0:
            raise ValueError(f"class weights must be positive, got {self.beta}")


@dataclass(frozen=True)
class LossWeights:
    w: float = 2.0


def _check_labels(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) and (labels.min() < 0 or labels.max() >= n_classes):
        bad = labels[(labels < 0) | (labels >= n_classes)][0]
        raise ValueError(f"label {bad} outside [0, {n_classes})")
    return labels


def focal_loss(probs, labels, cfg: FocalConfig = FocalConfig()) -> dc.Tensor:
    """Mean over samples of -beta_y (1 - p_y)^gamma log p_y.

    ``probs`` is ``(N, C)`` with rows summing to one; probabilities are
    clamped to ``[1e-7, 1 - 1e-7]``.  An empty batch gives 0.
    """
    probs = dc.tensor(probs)
    n, c = probs.shape
    labels = _check_labels(labels, c)
    if len(labels) != n:
        raise ValueError(f"{n} probability rows but {len(labels)} labels")
    if n == 0:
        return dc.Tensor(0.0)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    p = dc.sum(dc.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP) * onehot, axis=1)
    beta = np.ones(c) if cfg.beta is None else np.asarray(cfg.beta, dtype=np.float64)
    if len(beta) != c:
        raise ValueError(f"{len(beta)} class weights for {c} classes")
    per = dc.log(p) * beta[labels]
    if cfg.gamma:
        per = per * dc.power(1.0 - p, cfg.gamma)
    return dc.sum(per) * (-1.0 / n)


def cross_entropy(probs, labels) -> dc.Tensor:
    return focal_loss(probs, labels, FocalConfig(gamma=0.0))


def binary_probs(scores) -> dc.Tensor:
    """(N,) foreground probabilities -> (N, 2) rows [1 - s, s]."""
    s = dc.reshape(dc.tensor(scores), (-1, 1))
    return dc.concat([1.0 - s, s], axis=1)


def total_loss(loss_f, loss_s, loss_cls, loss_reg, weights: LossWeights = LossWeights()):
    """w (L_f + L_s) + L_cls + L_reg; raises on a non-finite term."""
    terms = {"loss_f": loss_f, "loss_s": loss_s, "loss_cls": loss_cls, "loss_reg": loss_reg}
    for name, v in terms.items():
        value = np.asarray(v.data if isinstance(v, dc.Tensor) else v, dtype=np.float64)
        if value.size != 1:
            raise ValueError(f"{name} must be a scalar, got shape {value.shape}")
        if not math.isfinite(float(value)):
            raise ValueError(f"{name} is not finite ({float(value)})")
    if not any(isinstance(v, dc.Tensor) for v in terms.values()):
        return weights.w * (loss_f + loss_s) + loss_cls + loss_reg
    return (dc.tensor(loss_f) + loss_s) * weights.w + loss_cls + loss_reg


def smooth_l1(residual, delta: float = 1.0):
    """0.5 r^2 / delta where |r| < delta, |r| - 0.5 delta elsewhere (elementwise)."""
    r = dc.tensor(residual)
    small = np.abs(r.data) < delta
    quad = r * r * (0.5 / delta)
    lin = dc.relu(r) + dc.relu(-r) - 0.5 * delta
    return quad * small.astype(np.float64) + lin * (~small).astype(np.float64)


def head_losses(obj_logits, box_pred, obj_target, box_target, delta: float = 1.0):
    """Cross-entropy over BEV-cell objectness and smooth-L1 on boxes of positive cells.

    ``obj_logits`` is ``(B, 2)``, ``box_pred``/``box_target`` are ``(B, R)``,
    ``obj_target`` is ``(B,)`` in {0, 1}.  L_reg is a mean over positive cells
    (summed over the R regression targets) and 0 when there are none.
    """
    obj_logits, box_pred = dc.tensor(obj_logits), dc.tensor(box_pred)
    box_target = np.asarray(box_target, dtype=np.float64)
    obj_target = np.asarray(obj_target, dtype=np.int64).reshape(-1)
    if box_pred.shape != box_target.shape or obj_logits.shape[0] != len(obj_target):
        raise ValueError("head predictions and targets disagree in shape")
    l_cls = cross_entropy(dc.softmax(obj_logits, axis=1), obj_target)
    pos = np.nonzero(obj_target == 1)[0]
    if len(pos) == 0:
        return l_cls, dc.Tensor(0.0)
    resid = dc.gather(box_pred, pos) - box_target[pos]
    l_reg = dc.sum(smooth_l1(resid, delta)) * (1.0 / len(pos))
    return l_cls, l_reg
