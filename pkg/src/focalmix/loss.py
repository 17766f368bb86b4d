"""Focal losses with soft targets, smooth L1 regression, and the combined
detection objective, all with analytic gradients.

The soft-target focal loss accepts a target y anywhere in [0, 1]:

    SFL(p) = [a0 + y (a1 - a0)] * |y - p|^g * CE(y, p)
    CE(y, p) = -y ln p - (1 - y) ln(1 - p)

For binary y it reduces exactly to the classic focal loss

    FL(p_t) = -a_t (1 - p_t)^g ln(p_t),   p_t = p if y = 1 else 1 - p

with a_t the matching class weight.  Probabilities are clamped to
[eps, 1 - eps] with eps = 1e-7 before any logarithm; the non-differentiable
point p = y takes gradient 0 (the minimum sits there).

All functions are elementwise over numpy arrays and return (value, d/dp).
Computation is double precision internally so analytic gradients can be
verified against finite differences at tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AnchorTargets

__all__ = [
    "EPS",
    "FocalParams",
    "soft_focal_loss",
    "focal_loss",
    "smooth_l1",
    "DetectionLoss",
    "detection_loss",
]

EPS = 1e-7


@dataclass(frozen=True)
class FocalParams:
    """Class weights for negative/positive targets and focusing exponent."""

    alpha_neg: float = 0.05
    alpha_pos: float = 0.95
    gamma: float = 2.0

    def __post_init__(self):
        if not (0.0 < self.alpha_neg < 1.0 and 0.0 < self.alpha_pos < 1.0):
            raise ValueError(
                f"alpha weights must lie in (0, 1), got {self.alpha_neg}, {self.alpha_pos}"
            )
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")

    def weight(self, y) -> np.ndarray:
        """Linear interpolation between the class weights: a0 + y (a1 - a0)."""
        return self.alpha_neg + np.asarray(y, dtype=np.float64) * (
            self.alpha_pos - self.alpha_neg
        )

    def to_json_dict(self) -> dict:
        return {"alpha_neg": self.alpha_neg, "alpha_pos": self.alpha_pos, "gamma": self.gamma}

    @classmethod
    def from_json_dict(cls, d: dict) -> "FocalParams":
        return cls(**d)


def _check_unit_interval(name: str, x: np.ndarray) -> None:
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError(f"{name} must lie in [0, 1] before clamping")


def soft_focal_loss(p, y, params: FocalParams):
    """Soft-target focal loss and its derivative in p, elementwise."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_unit_interval("p", p)
    _check_unit_interval("y", y)
    p = np.clip(p, EPS, 1.0 - EPS)

    w = params.weight(y)
    gap = np.abs(y - p)
    ce = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    mod = gap**params.gamma  # 0**0 == 1, so gamma = 0 degrades to weighted CE
    loss = w * mod * ce

    dce = -y / p + (1.0 - y) / (1.0 - p)
    # d|y-p|^g / dp, with the p = y kink assigned gradient 0.
    safe_gap = np.where(gap > 0.0, gap, 1.0)
    dmod = params.gamma * safe_gap ** (params.gamma - 1.0) * np.sign(p - y)
    dmod = np.where(gap > 0.0, dmod, 0.0)
    grad = w * (dmod * ce + mod * dce)
    return loss, grad


def focal_loss(p, y, params: FocalParams):
    """Hard-label focal loss -a_t (1 - p_t)^g ln(p_t) and its p-derivative."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_unit_interval("p", p)
    if y.size and not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("focal_loss requires binary targets; use soft_focal_loss instead")
    p = np.clip(p, EPS, 1.0 - EPS)

    pt = np.where(y == 1.0, p, 1.0 - p)
    at = np.where(y == 1.0, params.alpha_pos, params.alpha_neg)
    one_minus = 1.0 - pt
    loss = -at * one_minus**params.gamma * np.log(pt)

    safe = np.where(one_minus > 0.0, one_minus, 1.0)
    dmod = params.gamma * safe ** (params.gamma - 1.0)
    dmod = np.where(one_minus > 0.0, dmod, 0.0)
    dloss_dpt = at * (dmod * np.log(pt) - one_minus**params.gamma / pt)
    grad = np.where(y == 1.0, dloss_dpt, -dloss_dpt)
    return loss, grad


def smooth_l1(pred, target):
    """Huber-style regression loss summed over the last axis.

    f(x) = x^2 / 2 for |x| < 1, |x| - 1/2 otherwise; returns (loss summed
    over the trailing axis, elementwise gradient in pred).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    d = pred - target
    ad = np.abs(d)
    quadratic = ad < 1.0
    loss = np.where(quadratic, 0.5 * d * d, ad - 0.5).sum(axis=-1)
    grad = np.where(quadratic, d, np.sign(d))
    return loss, grad


@dataclass
class DetectionLoss:
    """Scalar objective with per-anchor gradients of the total."""

    total: float
    cls_term: float
    reg_term: float
    dprobs: np.ndarray
    dreg: np.ndarray


def detection_loss(
    cls_probs: np.ndarray,
    reg_pred: np.ndarray,
    targets: AnchorTargets,
    params: FocalParams,
    reg_weight: float = 1.0,
) -> DetectionLoss:
    """Combined objective over one patch's anchors.

    Classification: soft-target focal loss summed over trainable anchors,
    normalized by the total target mass (floored at 1, so an all-negative
    patch is well defined).  Regression: smooth L1 averaged over anchors
    that carry regression targets and are trainable.  Ignored anchors
    contribute nothing to either term and receive zero gradient.
    """
    cls_probs = np.asarray(cls_probs, dtype=np.float64)
    reg_pred = np.asarray(reg_pred, dtype=np.float64)
    n = targets.cls.shape[0]
    if cls_probs.shape != (n,) or reg_pred.shape != (n, 4):
        raise ValueError(
            f"prediction shapes {cls_probs.shape}/{reg_pred.shape} do not match {n} anchors"
        )

    train = targets.train_mask
    loss_el, grad_el = soft_focal_loss(cls_probs[train], targets.cls[train], params)
    normalizer = max(1.0, float(targets.cls[train].sum()))
    cls_term = float(loss_el.sum()) / normalizer
    dprobs = np.zeros(n, dtype=np.float64)
    dprobs[train] = grad_el / normalizer

    sel = targets.has_reg & train
    dreg = np.zeros((n, 4), dtype=np.float64)
    if sel.any():
        row_loss, row_grad = smooth_l1(reg_pred[sel], targets.reg[sel])
        count = int(sel.sum())
        reg_term = float(row_loss.sum()) / count
        dreg[sel] = row_grad * (reg_weight / count)
    else:
        reg_term = 0.0

    total = cls_term + reg_weight * reg_term
    return DetectionLoss(
        total=total, cls_term=cls_term, reg_term=reg_term, dprobs=dprobs, dreg=dreg
    )
