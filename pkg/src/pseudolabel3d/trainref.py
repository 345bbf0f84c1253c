"""Reference targets and losses for a grouping-based instance network.

Nothing here trains anything. These are plain numpy versions of the
supervision signals so a training loop written elsewhere can be checked
against them.
"""

import logging

import numpy as np

from .scene import IGNORE, UNASSIGNED

logger = logging.getLogger(__name__)

EPS = 1e-12
SCORE_LOW = 0.25
SCORE_HIGH = 0.75


def offset_targets(xyz, instances):
    """Vector from each point to its instance centre; zero when unassigned."""
    xyz = np.asarray(getattr(xyz, "xyz", xyz), dtype=np.float64)
    instances = np.asarray(instances, dtype=np.int64)
    out = np.zeros_like(xyz)
    hit = instances >= 0
    if not hit.any():
        return out
    ids = instances[hit]
    n_inst = int(ids.max()) + 1
    counts = np.bincount(ids, minlength=n_inst)
    centre = np.stack(
        [np.bincount(ids, weights=xyz[hit, a], minlength=n_inst) for a in range(3)], axis=1
    )
    centre[counts > 0] /= counts[counts > 0, None]
    out[hit] = centre[ids] - xyz[hit]
    return out


def supervised_mask(instances):
    return np.asarray(instances) != UNASSIGNED


def loss_sem(probs, labels):
    """Mean negative log-likelihood of the target class over labelled points."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    keep = labels != IGNORE
    if not keep.any():
        return 0.0
    p = probs[np.flatnonzero(keep), labels[keep]]
    n_clamped = int((p < EPS).sum())
    if n_clamped:
        logger.warning("loss_sem: %d target probabilities clamped to %g", n_clamped, EPS)
    return float(-np.mean(np.log(np.maximum(p, EPS))))


def loss_off(pred, target, mask):
    """Mean L1 distance between predicted and target offsets on ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    diff = np.asarray(pred, dtype=np.float64)[mask] - np.asarray(target, dtype=np.float64)[mask]
    return float(np.abs(diff).sum(axis=1).mean())


def loss_dir(pred, target, mask):
    """Negative mean cosine between predicted and target offsets on ``mask``.

    Rows where either vector has zero length contribute 0 to the mean.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    a = np.asarray(pred, dtype=np.float64)[mask]
    b = np.asarray(target, dtype=np.float64)[mask]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    if not ok.all():
        logger.warning("loss_dir: %d zero-length offset rows", int((~ok).sum()))
    cos = np.zeros(len(a))
    cos[ok] = (a[ok] * b[ok]).sum(axis=1) / (na[ok] * nb[ok])
    return float(-cos.mean())


def score_target(iou, low=SCORE_LOW, high=SCORE_HIGH):
    """Soft proposal-quality target: 0 below ``low``, 1 above ``high``, linear between."""
    iou = np.asarray(iou, dtype=np.float64)
    out = np.clip((iou - low) / (high - low), 0.0, 1.0)
    out = np.where(iou < low, 0.0, np.where(iou > high, 1.0, out))
    return float(out) if out.ndim == 0 else out


def binary_cross_entropy(pred, target):
    pred = np.clip(np.asarray(pred, dtype=np.float64), EPS, 1.0 - EPS)
    target = np.asarray(target, dtype=np.float64)
    if pred.size == 0:
        return 0.0
    return float(-np.mean(target * np.log(pred) + (1.0 - target) * np.log(1.0 - pred)))


def loss_sc(pred_scores, target_scores):
    """Binary cross-entropy between predicted and target proposal scores."""
    return binary_cross_entropy(pred_scores, target_scores)


def dice_loss(pred, target, smooth=1e-6):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    inter = (pred * target).sum()
    return float(1.0 - (2.0 * inter + smooth) / (pred.sum() + target.sum() + smooth))


def mask_filter_loss(pred, target):
    """BCE + Dice, the supervision used for per-proposal point masks."""
    return binary_cross_entropy(pred, target) + dice_loss(pred, target)


def instance_mask_filter(probs, threshold=0.5):
    """Keep proposal points whose probability is at least ``threshold``.

    Returns ``(keep, kept_indices)``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    keep = probs >= threshold
    return keep, np.flatnonzero(keep)
