"""Semantic (mIoU) and instance (AP, AP50, AP25, mPrec/mRec) evaluation.

Instance matching follows the usual ScanNet-benchmark recipe: per class,
predictions are taken by descending confidence and greedily matched to the
unmatched ground-truth instance of that class with the highest IoU at or
above the threshold. AP integrates the precision envelope over all recall
points.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix

AP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True, eq=False)
class GroundTruth:
    instances: np.ndarray  # N ints, -1 = untracked
    classes: np.ndarray  # N ints, -1 = ignore

    def __post_init__(self):
        object.__setattr__(self, "instances", np.asarray(self.instances, dtype=np.int64))
        object.__setattr__(self, "classes", np.asarray(self.classes, dtype=np.int64))

    def instance_masks(self):
        """``[(mask, class)]`` for every tracked instance with a valid class."""
        out = []
        ids = self.instances
        for i in np.unique(ids[ids >= 0]):
            mask = np.flatnonzero(ids == i)
            cls = np.unique(self.classes[mask])
            if len(cls) != 1:
                raise ValueError(f"ground-truth instance {i} spans classes {cls.tolist()}")
            if cls[0] >= 0:
                out.append((mask, int(cls[0])))
        return out


@dataclass(frozen=True, eq=False)
class InstancePrediction:
    mask: np.ndarray
    label: int
    confidence: float = 1.0


@dataclass
class InstanceAPResult:
    ap: float
    ap50: float
    ap25: float
    per_class: dict = field(default_factory=dict)  # class -> {"ap", "ap50", "ap25"}


def miou(pred, gt_classes, num_classes):
    """Per-class IoU and their mean over classes seen in pred or gt.

    Only points with a valid ground-truth class count; a prediction of -1 on
    such a point is a miss for the true class.
    """
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt_classes, dtype=np.int64)
    valid = (gt >= 0) & (gt < num_classes)
    p, g = pred[valid], gt[valid]
    K = num_classes
    p_ok = (p >= 0) & (p < K)
    conf = np.bincount(g[p_ok] * K + p[p_ok], minlength=K * K).reshape(K, K)
    tp = np.diag(conf).astype(np.float64)
    gt_count = np.bincount(g, minlength=K)
    fp = conf.sum(axis=0) - np.diag(conf)
    fn = gt_count - np.diag(conf)
    denom = tp + fp + fn
    iou = np.full(K, np.nan)
    np.divide(tp, denom, out=iou, where=denom > 0)
    present = denom > 0
    mean = float(iou[present].mean()) if present.any() else float("nan")
    return iou, mean


def _order(preds):
    """Descending confidence, then larger mask, then smaller first index."""
    return sorted(
        range(len(preds)),
        key=lambda i: (-preds[i].confidence, -len(preds[i].mask),
                       int(preds[i].mask[0]) if len(preds[i].mask) else -1),
    )


def _iou_table(pred_masks, gt_masks, n):
    def inc(masks):
        cols = np.concatenate(masks) if masks else np.zeros(0, dtype=np.int64)
        rows = np.repeat(np.arange(len(masks)), [len(m) for m in masks])
        return csr_matrix((np.ones(len(cols)), (rows, cols)), shape=(len(masks), n))

    inter = np.asarray((inc(pred_masks) @ inc(gt_masks).T).todense()).reshape(
        len(pred_masks), len(gt_masks))
    ps = np.array([len(m) for m in pred_masks], dtype=np.float64)
    gs = np.array([len(m) for m in gt_masks], dtype=np.float64)
    union = ps[:, None] + gs[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def _greedy_match(iou, threshold):
    """Per prediction row (already in rank order): matched gt column or -1."""
    matched = np.full(iou.shape[0], -1, dtype=np.int64)
    taken = np.zeros(iou.shape[1], dtype=bool)
    for r in range(iou.shape[0]):
        cand = np.where(taken, -1.0, iou[r])
        if cand.size == 0:
            continue
        best = int(np.argmax(cand))
        if cand[best] >= threshold:
            matched[r] = best
            taken[best] = True
    return matched


def average_precision(tp_flags, n_gt):
    """All-point interpolated AP of a ranked list of TP/FP flags."""
    if n_gt == 0:
        return float("nan")
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if not len(tp_flags):
        return 0.0
    tp = np.cumsum(tp_flags)
    precision = tp / np.arange(1, len(tp_flags) + 1)
    recall = tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    recall_prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - recall_prev) * envelope))


def _per_class(preds, gt, n):
    gt_inst = gt.instance_masks()
    classes = sorted({c for _, c in gt_inst})
    out = {}
    for c in classes:
        gmasks = [m for m, k in gt_inst if k == c]
        cpreds = [p for p in preds if p.label == c]
        ranked = [cpreds[i] for i in _order(cpreds)]
        iou = _iou_table([p.mask for p in ranked], gmasks, n)
        out[c] = (iou, len(gmasks))
    return out


def instance_ap(preds, gt, iou_thresholds=AP_THRESHOLDS):
    """AP averaged over ``iou_thresholds`` plus AP50 and AP25.

    Classes are those carried by at least one ground-truth instance;
    predictions of other classes are not scored.
    """
    n = len(gt.instances)
    tables = _per_class(list(preds), gt, n)
    if not tables:
        nan = float("nan")
        return InstanceAPResult(nan, nan, nan, {})
    thresholds = sorted(set(iou_thresholds) | {0.5, 0.25})
    per_t = {}
    for t in thresholds:
        per_t[t] = {}
        for c, (iou, n_gt) in tables.items():
            flags = _greedy_match(iou, t) >= 0
            per_t[t][c] = average_precision(flags, n_gt)
    per_class = {
        c: {
            "ap": float(np.mean([per_t[t][c] for t in iou_thresholds])),
            "ap50": per_t[0.5][c],
            "ap25": per_t[0.25][c],
        }
        for c in tables
    }
    return InstanceAPResult(
        ap=float(np.mean([v["ap"] for v in per_class.values()])),
        ap50=float(np.mean([v["ap50"] for v in per_class.values()])),
        ap25=float(np.mean([v["ap25"] for v in per_class.values()])),
        per_class=per_class,
    )


def mprec_mrec(preds, gt, threshold=0.5):
    """Mean precision and mean recall over ground-truth classes.

    A class with no predictions has precision 0.
    """
    tables = _per_class(list(preds), gt, len(gt.instances))
    if not tables:
        return float("nan"), float("nan")
    precs, recs = [], []
    for iou, n_gt in tables.values():
        hits = int((_greedy_match(iou, threshold) >= 0).sum())
        precs.append(hits / iou.shape[0] if iou.shape[0] else 0.0)
        recs.append(hits / n_gt)
    return float(np.mean(precs)), float(np.mean(recs))


def predictions_from_labels(instances, class_of, confidence=1.0):
    """Turn a per-point instance labeling into scored predictions.

    Pseudo labels carry no confidence, so every instance gets ``confidence``.
    Instances whose class is -1 are skipped.
    """
    instances = np.asarray(instances, dtype=np.int64)
    preds = []
    for i, c in sorted(class_of.items()):
        if c < 0:
            continue
        preds.append(InstancePrediction(np.flatnonzero(instances == i), c, confidence))
    return preds


def format_report(values):
    """``key = value`` lines, keys in insertion order."""
    lines = []
    for key, val in values.items():
        if isinstance(val, float):
            val = f"{val:.6f}"
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def format_csv(rows, header):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
    return buf.getvalue()
