"""Set-prediction losses: dice, binary cross-entropy, the matching cost
matrix, and the total loss with auxiliary deep supervision.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import heads
from .errors import ContractError, DimensionError
from .matching import hungarian

DICE_EPS = 1e-6


def dice_loss(pred, gt):
    """1 - 2*sum(p*g) / (sum(p^2) + sum(g^2) + eps); value in [0, 1]."""
    pred = pred if isinstance(pred, ad.Tensor) else ad.Tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"dice shapes disagree: {pred.shape} vs {gt.shape}")
    num = ad.sum_all(ad.mul(pred, ad.Tensor(gt)))
    den = ad.add_const(ad.sum_all(ad.mul(pred, pred)), float((gt * gt).sum() + DICE_EPS))
    return ad.add_const(ad.mul_const(ad.div(num, den), -2.0), 1.0)


def dice_loss_rows(pred, gt):
    """Per-row dice for (G, P) probability rows against (G, P) binary rows."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"dice shapes disagree: {pred.shape} vs {gt.shape}")
    num = ad.sum_axis(ad.mul(pred, ad.Tensor(gt)), 1)
    den = ad.add_const(ad.sum_axis(ad.mul(pred, pred), 1),
                       (gt * gt).sum(axis=1) + DICE_EPS)
    return ad.add_const(ad.mul_const(ad.div(num, den), -2.0), 1.0)


def bce_loss(logits, gt):
    """Mean per-pixel binary cross-entropy on logits (overflow-safe)."""
    logits = logits if isinstance(logits, ad.Tensor) else ad.Tensor(logits)
    return ad.bce_with_logits_mean(logits, np.asarray(gt, dtype=np.float64))


def pairwise_mask_costs(mask_logits, gt_masks):
    """(R, G) mean-bce and dice matrices from flat logits and binary masks."""
    logits = np.asarray(mask_logits, dtype=np.float64)
    gt = np.asarray(gt_masks, dtype=np.float64)
    p = logits.shape[1]
    softplus = np.maximum(logits, 0.0) + np.log1p(np.exp(-np.abs(logits)))
    bce = softplus.mean(axis=1)[:, None] - (logits @ gt.T) / p
    probs = heads.stable_sigmoid(logits)
    num = 2.0 * (probs @ gt.T)
    den = (probs * probs).sum(axis=1)[:, None] + (gt * gt).sum(axis=1)[None, :] + DICE_EPS
    dice = 1.0 - num / den
    return bce, dice


def matching_cost(stage1_probs, mask_logits, gt_masks, gt_classes, cfg):
    """Assignment costs: lambda_cls*(1-p_class) + lambda_ce*bce + lambda_dice*dice.

    All inputs are plain numpy (the assignment is not differentiated).
    `gt_classes` indexes the current prompt-class set; the no-object column
    is not a legal target.
    """
    probs = np.asarray(stage1_probs, dtype=np.float64)
    classes = np.asarray(gt_classes, dtype=np.intp)
    k_real = probs.shape[1] - 1
    if classes.size and (classes.min() < 0 or classes.max() >= k_real):
        raise ContractError(
            f"ground-truth class outside the prompt-class set (K={k_real})")
    if len(gt_masks) != classes.size:
        raise DimensionError("one class per ground-truth mask required")
    bce, dice = pairwise_mask_costs(mask_logits, gt_masks)
    cls = 1.0 - probs[:, classes]
    return cfg.lambda_cls * cls + cfg.lambda_ce * bce + cfg.lambda_dice * dice


def point_loss(point, gt_masks, gt_classes, cfg):
    """Matched classification + mask loss plus no-object CE, for one point.

    Returns (loss tensor, components dict of detached floats).  `gt_masks` is
    a (G, P) binary array aligned with flat mask logits; G may be zero.
    """
    probs = point["probs"]
    logits = point["mask_logits"]
    r = probs.shape[0]
    k_real = probs.shape[1] - 1
    g = len(gt_classes)

    if g:
        cost = matching_cost(probs.data, logits.data, gt_masks, gt_classes, cfg)
        rows = hungarian(cost)
        matched_logp = ad.log(ad.take_elems(probs, rows, np.asarray(gt_classes)))
        ce_matched = ad.mul_const(ad.sum_all(matched_logp), -1.0)
        pred = ad.take_rows(logits, rows)
        bce_sum = ad.mul_const(ad.bce_with_logits_mean(pred, gt_masks), float(g))
        dice_sum = ad.sum_all(dice_loss_rows(ad.sigmoid(pred), gt_masks))
        unmatched = np.setdiff1d(np.arange(r), rows)
    else:
        rows = np.empty(0, dtype=np.intp)
        ce_matched = bce_sum = dice_sum = None
        unmatched = np.arange(r)

    if unmatched.size:
        noobj_logp = ad.log(ad.take_elems(probs, unmatched,
                                          np.full(unmatched.size, k_real)))
        ce_noobj = ad.mul_const(ad.sum_all(noobj_logp), -cfg.no_object_coef)
    else:
        ce_noobj = None

    cls_term = None
    if ce_matched is not None:
        cls_term = ad.mul_const(ce_matched, cfg.lambda_cls)
    if ce_noobj is not None:
        cls_term = ce_noobj if cls_term is None else ad.add(cls_term, ce_noobj)

    total = cls_term
    components = {"cls": float(cls_term.data) if cls_term is not None else 0.0,
                  "ce": 0.0, "dice": 0.0}
    if bce_sum is not None:
        ce_term = ad.mul_const(bce_sum, cfg.lambda_ce)
        dice_term = ad.mul_const(dice_sum, cfg.lambda_dice)
        components["ce"] = float(ce_term.data)
        components["dice"] = float(dice_term.data)
        total = ad.add(ad.add(total, ce_term), dice_term)
    return total, components


def total_loss(points, gt_masks, gt_classes, cfg):
    """Mean point loss over all prediction points (or the final one only).

    Each prediction point is re-matched independently, mirroring auxiliary
    deep supervision.
    """
    use = points if cfg.aux_loss else points[-1:]
    total = None
    comps = {"cls": 0.0, "ce": 0.0, "dice": 0.0}
    for point in use:
        loss, c = point_loss(point, gt_masks, gt_classes, cfg)
        total = loss if total is None else ad.add(total, loss)
        for key in comps:
            comps[key] += c[key]
    scale = 1.0 / len(use)
    total = ad.mul_const(total, scale)
    comps = {k: v * scale for k, v in comps.items()}
    return total, comps
