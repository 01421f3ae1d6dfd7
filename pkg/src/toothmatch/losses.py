"""Scalar objectives over a matched prediction set. Evaluators only: no gradients."""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import log_softmax

from .cmr import center_loss, pseudo_mask, pseudo_mask_loss
from .exceptions import ShapeError
from .fhm import DICE_EPS
from .layers import bce_with_logits, sigmoid

MASK_WEIGHT = 2.0
LAMBDA_CENT = 0.5
W_PM = 0.2
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


@dataclass(frozen=True)
class LossBreakdown:
    l_cls: float
    l_mask: float
    l_obj: float
    l_cent: float
    l_pm: float
    l_main: float
    l_total: float
    mask_weight: float = MASK_WEIGHT
    lambda_cent: float = LAMBDA_CENT
    w_pm: float = W_PM

    def as_dict(self):
        return asdict(self)


def focal_loss(logits, labels, gamma=FOCAL_GAMMA, alpha=FOCAL_ALPHA):
    """Mean of ``-alpha * (1 - p_y)^gamma * log p_y`` with softmax probabilities."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        return 0.0
    logits = logits.reshape(labels.size, -1)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ShapeError("labels out of range for the class logits")
    logp = log_softmax(logits, axis=1)[np.arange(labels.size), labels]
    p = np.exp(logp)
    return float(np.mean(-alpha * (1.0 - p) ** gamma * logp))


def soft_dice(probs, target, eps=DICE_EPS):
    probs = np.asarray(probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return (2.0 * (probs * target).sum(axis=-1) + eps) / (probs.sum(axis=-1) + target.sum(axis=-1) + eps)


def mask_loss(logits, gt_masks):
    """Mean over pairs of ``(1 - Dice) + BCE``, both taken per mask."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt_masks, dtype=np.float64))
    if logits.shape != gt.shape:
        raise ShapeError(f"mask logits {logits.shape} vs ground truth {gt.shape}")
    if logits.shape[0] == 0:
        return 0.0
    dice = soft_dice(sigmoid(logits), gt)
    bce = bce_with_logits(logits, gt).mean(axis=1)
    return float(np.mean((1.0 - dice) + bce))


def binary_iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def objectness_targets(mask_logits, gt_masks, pairs, threshold=0.5):
    """IoU of the thresholded mask with its matched tooth; 0 for unmatched instances."""
    n = np.asarray(mask_logits).shape[0]
    t = np.zeros(n)
    probs = sigmoid(np.asarray(mask_logits, dtype=np.float64))
    for i, l in pairs:
        t[i] = binary_iou(probs[i] > threshold, gt_masks[l])
    return t


def objectness_loss(objectness_logits, targets):
    x = np.asarray(objectness_logits, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if x.shape != t.shape:
        raise ShapeError("objectness logits and targets differ in length")
    if x.size == 0:
        return 0.0
    return float(bce_with_logits(x, t).mean())


def total_loss(l_cls, l_mask, l_obj, l_cent, l_pm, mask_weight=MASK_WEIGHT, lambda_cent=LAMBDA_CENT, w_pm=W_PM):
    parts = {"l_cls": l_cls, "l_mask": l_mask, "l_obj": l_obj, "l_cent": l_cent, "l_pm": l_pm}
    for name, v in parts.items():
        if not (np.isfinite(v) and v >= 0):
            raise ValueError(f"{name} must be finite and >= 0, got {v}")
    l_main = l_cls + mask_weight * l_mask + l_obj + lambda_cent * l_cent
    return LossBreakdown(**{k: float(v) for k, v in parts.items()}, l_main=float(l_main),
                         l_total=float(l_main + w_pm * l_pm),
                         mask_weight=mask_weight, lambda_cent=lambda_cent, w_pm=w_pm)


def compute_losses(pred, gt, assignment, cmap, face_labels, threshold=0.5):
    """Evaluate every term for one scan given a matching."""
    pairs = list(assignment.pairs)
    pi = np.array([p for p, _ in pairs], dtype=np.int64)
    li = np.array([l for _, l in pairs], dtype=np.int64)
    l_cls = focal_loss(pred.class_logits[pi], gt.labels[li])
    l_mask = mask_loss(pred.mask_logits[pi], gt.masks[li]) if pairs else 0.0
    l_obj = objectness_loss(pred.objectness, objectness_targets(pred.mask_logits, gt.masks, pairs, threshold))
    l_cent = center_loss(pred.centers3d[pi], gt.centers3d[li])
    pm = pseudo_mask(pred.centers2d, pred.valid, cmap, face_labels)
    l_pm = pseudo_mask_loss(pred.mask_logits, pm)
    return total_loss(l_cls, l_mask, l_obj, l_cent, l_pm)
