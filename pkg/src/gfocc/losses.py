"""Training losses and occupancy metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import CLASS_NAMES
from .diff import ops
from .diff.tensor import DiffTensor, ShapeError, as_tensor, record

BCE_EPS = 1e-7


def bce_occupancy(alpha, gt_labels) -> DiffTensor:
    """Mean binary cross-entropy of occupancy against (label != 0)."""
    alpha = as_tensor(alpha)
    gt = np.asarray(gt_labels)
    if alpha.shape != gt.shape:
        raise ShapeError("bce_occupancy", alpha.shape, gt.shape)
    y = (gt != 0).astype(np.float64)
    pos = ops.mul(ops.log(ops.add(alpha, BCE_EPS)), y)
    neg = ops.mul(ops.log(ops.add(ops.sub(1.0, alpha), BCE_EPS)), 1.0 - y)
    return ops.neg(ops.mean(ops.add(pos, neg)))


def lovasz_grad(fg_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss at sorted errors."""
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    if len(fg_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def _class_terms(p: np.ndarray, labels: np.ndarray, classes):
    """Per-class loss values and d loss / d p columns for the given classes."""
    V = len(labels)
    losses = np.zeros(len(classes))
    grads = np.zeros((V, len(classes)))
    for i, c in enumerate(classes):
        fg = (labels == c).astype(np.float64)
        err = np.abs(fg - p[:, c])
        order = np.argsort(-err, kind="stable")
        g = lovasz_grad(fg[order])
        losses[i] = float(err[order] @ g)
        dv = np.empty(V)
        dv[order] = g
        grads[:, i] = dv * np.where(fg > 0, -1.0, 1.0)
    return losses, grads


def lovasz_class_losses(probs, gt_labels, classes=None) -> np.ndarray:
    """Per-class Lovasz-softmax losses (numpy, no tape) for inspection and tests."""
    p = np.asarray(probs, dtype=np.float64)
    p = p.reshape(-1, p.shape[-1])
    labels = np.asarray(gt_labels).reshape(-1)
    if classes is None:
        classes = range(p.shape[1])
    return _class_terms(p, labels, list(classes))[0]


def lovasz_softmax(probs, gt_labels, classes: str = "present") -> DiffTensor:
    """Lovasz-softmax over all voxels, averaged over classes.

    ``classes="present"`` averages over classes present in the ground truth
    (the empty class included); ``"all"`` averages over every class.
    Sorting uses a stable order, so ties resolve by voxel index.
    """
    probs = as_tensor(probs)
    C = probs.shape[-1]
    labels = np.asarray(gt_labels).reshape(-1)
    if labels.size == 0:
        raise ValueError("lovasz_softmax needs at least one voxel")
    p = probs.values.reshape(-1, C).astype(np.float64)
    if len(p) != len(labels):
        raise ShapeError("lovasz_softmax", probs.shape, np.shape(gt_labels))
    if classes == "present":
        cls = [c for c in range(C) if np.any(labels == c)]
    elif classes == "all":
        cls = list(range(C))
    else:
        raise ValueError(f"unknown class selection {classes!r}")
    if not cls:
        return DiffTensor(0.0, dtype=probs.dtype)
    losses, grads = _class_terms(p, labels, cls)
    out = DiffTensor(losses.mean(), dtype=probs.dtype)

    def vjp(g):
        full = np.zeros_like(p)
        full[:, cls] = grads / len(cls)
        return (float(g) * full.reshape(probs.shape),)

    record("lovasz_softmax", (probs,), out, vjp)
    return out


def occupancy_class_probs(alpha, class_probs) -> DiffTensor:
    """Occupancy-aware class distribution fed to the Lovasz loss.

    Unoccupied mass goes to the empty class: p(0) = (1 - a) + a q(0) and
    p(c) = a q(c) for c >= 1, where q is the splatted semantic mixture.
    """
    alpha, class_probs = as_tensor(alpha), as_tensor(class_probs)
    a = alpha.reshape(alpha.shape + (1,))
    mixed = ops.mul(a, class_probs)
    C = class_probs.shape[-1]
    empty = np.zeros(C)
    empty[0] = 1.0
    return ops.add(mixed, ops.mul(ops.sub(1.0, a), empty))


def block_loss(alpha, class_probs, gt_labels, classes: str = "present"):
    """(lovasz, bce) for one block's splatted output."""
    probs = occupancy_class_probs(alpha, class_probs)
    return lovasz_softmax(probs, gt_labels, classes), bce_occupancy(alpha, gt_labels)


def total_loss(block_outputs, gt_labels, classes: str = "present", return_parts=False):
    """Sum over blocks of lovasz + bce, equally weighted.

    ``block_outputs`` is a sequence of (alpha, class_probs) pairs or objects
    carrying ``alpha`` and ``class_probs``.
    """
    total = None
    parts = []
    for blk in block_outputs:
        alpha, cp = (blk.alpha, blk.class_probs) if hasattr(blk, "alpha") else blk
        lz, bce = block_loss(alpha, cp, gt_labels, classes)
        parts.append((lz.item(), bce.item()))
        term = ops.add(lz, bce)
        total = term if total is None else ops.add(total, term)
    if total is None:
        raise ValueError("total_loss needs at least one block output")
    return (total, parts) if return_parts else total


@dataclass
class ConfusionTable:
    num_classes: int
    tp: np.ndarray = None
    fp: np.ndarray = None
    fn: np.ndarray = None
    bin_tp: int = 0
    bin_fp: int = 0
    bin_fn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.num_classes, dtype=np.int64))

    def __add__(self, other: "ConfusionTable") -> "ConfusionTable":
        return ConfusionTable(self.num_classes, self.tp + other.tp, self.fp + other.fp,
                              self.fn + other.fn, self.bin_tp + other.bin_tp,
                              self.bin_fp + other.bin_fp, self.bin_fn + other.bin_fn)

    def to_dict(self) -> dict:
        return {"tp": self.tp.tolist(), "fp": self.fp.tolist(), "fn": self.fn.tolist(),
                "binary": {"tp": self.bin_tp, "fp": self.bin_fp, "fn": self.bin_fn}}

    @classmethod
    def from_dict(cls, d: dict) -> "ConfusionTable":
        b = d["binary"]
        return cls(len(d["tp"]), np.array(d["tp"]), np.array(d["fp"]), np.array(d["fn"]),
                   b["tp"], b["fp"], b["fn"])


def confusion(pred_labels, gt_labels, num_classes: int) -> ConfusionTable:
    pred = np.asarray(pred_labels).reshape(-1).astype(np.int64)
    gt = np.asarray(gt_labels).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ShapeError("evaluate", np.shape(pred_labels), np.shape(gt_labels))
    joint = np.bincount(gt * num_classes + pred, minlength=num_classes ** 2)
    joint = joint.reshape(num_classes, num_classes)
    tp = np.diag(joint).copy()
    fp = joint.sum(axis=0) - tp
    fn = joint.sum(axis=1) - tp
    po, go = pred != 0, gt != 0
    return ConfusionTable(num_classes, tp, fp, fn, int(np.sum(po & go)),
                          int(np.sum(po & ~go)), int(np.sum(~po & go)))


@dataclass
class Metrics:
    iou: float
    miou: float
    per_class: dict
    counts: ConfusionTable
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"iou": self.iou, "miou": self.miou, "per_class": self.per_class,
                "counts": self.counts.to_dict(), **self.extra}


def metrics_from_counts(table: ConfusionTable, mode: str = "present",
                        class_names=CLASS_NAMES) -> Metrics:
    """IoU over occupied-vs-empty and mIoU over non-empty classes.

    ``mode="present"`` skips classes absent from both prediction and ground
    truth; ``mode="literal"`` divides by the number of non-empty classes.
    """
    denom = table.bin_tp + table.bin_fp + table.bin_fn
    iou = table.bin_tp / denom if denom else 1.0
    per_class = {}
    vals = []
    for c in range(1, table.num_classes):
        d = int(table.tp[c] + table.fp[c] + table.fn[c])
        name = class_names[c] if c < len(class_names) else f"class_{c}"
        if d == 0:
            per_class[name] = None
            if mode == "literal":
                vals.append(0.0)
            continue
        v = table.tp[c] / d
        per_class[name] = float(v)
        vals.append(v)
    if mode not in ("present", "literal"):
        raise ValueError(f"unknown mIoU mode {mode!r}")
    miou = float(np.mean(vals)) if vals else 1.0
    return Metrics(float(iou), miou, per_class, table)


def evaluate(pred_labels, gt_labels, num_classes: int = None, mode: str = "present") -> Metrics:
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
    return metrics_from_counts(confusion(pred, gt, num_classes), mode)


__all__ = [
    "bce_occupancy", "lovasz_softmax", "lovasz_class_losses", "lovasz_grad",
    "occupancy_class_probs", "block_loss", "total_loss", "ConfusionTable", "confusion",
    "Metrics", "metrics_from_counts", "evaluate",
]
