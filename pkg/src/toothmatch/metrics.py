"""Face-level segmentation metrics, adjacent-tooth confusion and normalised center error."""

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_labels
from .exceptions import DegenerateInputError, ShapeError
from .layers import sigmoid
from .mesh import N_CLASSES

CLASS_NAMES = ["BG"] + [f"T{i}" for i in range(1, 17)]

# (group A, group B) per side; a tooth in one group counted wrong when its
# majority label falls in the other group of the same side
PAIR_GROUPS = {
    "pair_2nd3rd": [({7}, {8}), ({15}, {16})],
    "pair_pre_mo": [({4, 5}, {6}), ({12, 13}, {14})],
    "pair_cen_lat": [({1}, {2}), ({9}, {10})],
}


@dataclass
class MetricReport:
    oa: float
    miou: float
    per_class_iou: dict
    pair_confusion: dict
    center_error: float = None
    counts: dict = field(default_factory=dict)
    losses: dict = None
    scan_id: str = ""
    flags: dict = field(default_factory=dict)

    def as_dict(self):
        out = {
            "scan_id": self.scan_id,
            "oa": self.oa,
            "miou": self.miou,
            "per_class_iou": self.per_class_iou,
            "pair_confusion": self.pair_confusion,
            "center_error": self.center_error,
            "counts": self.counts,
        }
        if self.losses is not None:
            out["losses"] = self.losses
        if self.flags:
            out["flags"] = self.flags
        return out


def _pair_labels(pred_labels, gt_labels):
    p = check_labels(pred_labels, "pred_labels", N_CLASSES)
    g = check_labels(gt_labels, "gt_labels", N_CLASSES)
    if p.shape != g.shape:
        raise ShapeError(f"prediction has {p.size} faces, ground truth {g.size}")
    if p.size == 0:
        raise ShapeError("no faces to evaluate")
    return p, g


def overall_accuracy(pred_labels, gt_labels):
    p, g = _pair_labels(pred_labels, gt_labels)
    return float(np.count_nonzero(p == g) / p.size)


def class_counts(pred_labels, gt_labels):
    """TP, FP, FN arrays of length 17."""
    p, g = _pair_labels(pred_labels, gt_labels)
    cm = np.bincount(g * N_CLASSES + p, minlength=N_CLASSES * N_CLASSES).reshape(N_CLASSES, N_CLASSES)
    tp = np.diag(cm)
    return tp, cm.sum(axis=0) - tp, cm.sum(axis=1) - tp


def mean_iou(pred_labels, gt_labels):
    """Return ``(miou, per_class_iou)``; classes absent from both sides are NaN and left out of the mean."""
    tp, fp, fn = class_counts(pred_labels, gt_labels)
    denom = tp + fp + fn
    iou = np.full(N_CLASSES, np.nan)
    present = denom > 0
    iou[present] = tp[present] / denom[present]
    return float(np.mean(iou[present])), iou


def majority_label(labels):
    return int(np.argmax(np.bincount(np.asarray(labels), minlength=N_CLASSES)))


def pairwise_confusion(pred_labels, gt_labels, pair, gt_instance_ids=None):
    """Fraction of ground-truth teeth in ``pair`` whose majority predicted label is the pair's other side.

    ``pair`` is a key of :data:`PAIR_GROUPS` or a list of ``(group_a, group_b)``.
    Returns ``None`` when no tooth of the pair is present.
    """
    p, g = _pair_labels(pred_labels, gt_labels)
    groups = PAIR_GROUPS[pair] if isinstance(pair, str) else pair
    inst = g if gt_instance_ids is None else np.asarray(gt_instance_ids)
    total = wrong = 0
    for iid in np.unique(inst[g > 0]):
        faces = inst == iid
        cls = int(g[faces][0])
        for a, b in groups:
            if cls in a or cls in b:
                other = b if cls in a else a
                total += 1
                wrong += majority_label(p[faces]) in other
    if total == 0:
        return None
    return wrong / total


def center_error(pred_centers, gt_centers, scene):
    """Mean L1 distance between matched centers over the bounding-box diagonal."""
    diag = scene.diagonal if hasattr(scene, "diagonal") else float(scene)
    if not diag > 0:
        raise DegenerateInputError("scene diagonal must be positive")
    p = np.asarray(pred_centers, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 3)
    if p.shape != q.shape:
        raise ShapeError("center arrays differ in length")
    if p.shape[0] == 0:
        return 0.0
    return float(np.mean(np.abs(p - q).sum(axis=1) / diag))


def labels_from_prediction(pred, threshold=0.5):
    """Face labels from instances: each face takes the class of the valid instance with the
    highest mask probability above ``threshold``; uncovered faces are gingiva."""
    m = pred.n_faces
    labels = np.zeros(m, dtype=np.int64)
    vidx = np.flatnonzero(pred.valid)
    if vidx.size == 0:
        return labels
    probs = sigmoid(pred.mask_logits[vidx])
    best = np.argmax(probs, axis=0)
    covered = probs[best, np.arange(m)] > threshold
    cls = np.argmax(pred.class_logits[vidx], axis=1)
    labels[covered] = cls[best[covered]]
    return labels


def _iou_table(iou):
    return {name: (None if np.isnan(v) else float(v)) for name, v in zip(CLASS_NAMES, iou)}


def evaluate_labels(pred_labels, gt_labels, gt_instance_ids=None, scan_id=""):
    oa = overall_accuracy(pred_labels, gt_labels)
    miou, iou = mean_iou(pred_labels, gt_labels)
    tp, fp, fn = class_counts(pred_labels, gt_labels)
    counts = {name: {"tp": int(a), "fp": int(b), "fn": int(c)} for name, a, b, c in zip(CLASS_NAMES, tp, fp, fn)}
    pairs = {k: pairwise_confusion(pred_labels, gt_labels, k, gt_instance_ids) for k in PAIR_GROUPS}
    return MetricReport(oa=oa, miou=miou, per_class_iou=_iou_table(iou), pair_confusion=pairs,
                        counts=counts, scan_id=scan_id)


def aggregate_reports(reports):
    """Macro aggregate: mean of per-scan OA and mIoU; per-class IoU averaged over scans where the class occurs."""
    if not reports:
        raise ValueError("no reports to aggregate")
    per_class = {}
    for name in CLASS_NAMES:
        vals = [r.per_class_iou[name] for r in reports if r.per_class_iou.get(name) is not None]
        per_class[name] = float(np.mean(vals)) if vals else None
    pairs = {}
    for k in PAIR_GROUPS:
        vals = [r.pair_confusion[k] for r in reports if r.pair_confusion.get(k) is not None]
        pairs[k] = float(np.mean(vals)) if vals else None
    errs = [r.center_error for r in reports if r.center_error is not None]
    return {
        "n_scans": len(reports),
        "miou_aggregation": "macro",
        "oa": float(np.mean([r.oa for r in reports])),
        "miou": float(np.mean([r.miou for r in reports])),
        "per_class_iou": per_class,
        "pair_confusion": pairs,
        "center_error": float(np.mean(errs)) if errs else None,
    }
