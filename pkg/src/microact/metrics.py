"""Frame-level and boundary-level evaluation against ground truth.

All counting is hand-rolled from the confusion matrix so the numbers are
auditable.  Ratios with an empty denominator are reported as 0 and the
affected quantity is listed in ``undefined``, which keeps report shapes
stable across degenerate inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .records import ActionClass


@dataclass
class FrameMetrics:
    accuracy: float
    precision: float          # macro over present classes
    recall: float
    f1: float
    jaccard: float            # mean per-class frame IoU
    classes: list             # classes present in pred or gt, report order
    confusion: np.ndarray     # rows gt, cols pred
    per_class: dict = field(default_factory=dict)
    undefined: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "jaccard": self.jaccard,
            "classes": [str(c) for c in self.classes],
            "confusion": self.confusion.tolist(),
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "undefined": list(self.undefined),
        }


def frame_metrics(pred: Sequence, gt: Sequence) -> FrameMetrics:
    """Accuracy, macro precision/recall/F1, and mean frame IoU.

    Classes absent from both streams are excluded from the macro averages
    and the report; a class missing from just one side still counts (its
    undefined ratios become 0 and are flagged).
    """
    pred = list(pred)
    gt = list(gt)
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: pred {len(pred)} vs gt {len(gt)}")
    if not gt:
        raise ValueError("empty streams")
    canonical = list(ActionClass)
    seen = set(pred) | set(gt)
    classes = [c for c in canonical if c in seen]
    classes += sorted((c for c in seen if c not in canonical), key=str)
    index = {c: i for i, c in enumerate(classes)}
    K = len(classes)
    confusion = np.zeros((K, K), dtype=np.int64)
    for p, g in zip(pred, gt):
        confusion[index[g], index[p]] += 1

    total = len(gt)
    accuracy = float(np.trace(confusion)) / total
    per_class = {}
    undefined = []
    precs, recs, f1s, jacs = [], [], [], []
    for c in classes:
        i = index[c]
        tp = int(confusion[i, i])
        fp = int(confusion[:, i].sum() - tp)
        fn = int(confusion[i, :].sum() - tp)
        if tp + fp:
            prec = tp / (tp + fp)
        else:
            prec = 0.0
            undefined.append(f"precision[{c}]")
        if tp + fn:
            rec = tp / (tp + fn)
        else:
            rec = 0.0
            undefined.append(f"recall[{c}]")
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        jac = tp / (tp + fp + fn)  # union nonempty: c occurs in pred or gt
        per_class[c] = {"precision": prec, "recall": rec, "f1": f1,
                        "jaccard": jac, "support": tp + fn}
        precs.append(prec)
        recs.append(rec)
        f1s.append(f1)
        jacs.append(jac)
    return FrameMetrics(
        accuracy=accuracy,
        precision=float(np.mean(precs)),
        recall=float(np.mean(recs)),
        f1=float(np.mean(f1s)),
        jaccard=float(np.mean(jacs)),
        classes=classes,
        confusion=confusion,
        per_class=per_class,
        undefined=undefined,
    )


@dataclass
class BoundaryMetrics:
    precision: float
    recall: float
    f1: float
    n_matched: int
    n_pred: int
    n_gt: int
    tolerance: int
    undefined: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "n_matched": self.n_matched, "n_pred": self.n_pred,
            "n_gt": self.n_gt, "tolerance": self.tolerance,
            "undefined": list(self.undefined),
        }


def match_boundaries(pred: Sequence[int], gt: Sequence[int],
                     tolerance: int) -> list[tuple[int, int]]:
    """Greedy one-to-one matching of sorted boundary lists.

    Two-pointer sweep: a pair within tolerance is matched and both advance,
    otherwise the smaller value advances.  On sorted lists this achieves
    the maximum matching cardinality.
    """
    matches = []
    i = j = 0
    while i < len(pred) and j < len(gt):
        if abs(pred[i] - gt[j]) <= tolerance:
            matches.append((i, j))
            i += 1
            j += 1
        elif pred[i] < gt[j]:
            i += 1
        else:
            j += 1
    return matches


def boundary_metrics(pred: Sequence[int], gt: Sequence[int],
                     tolerance: int) -> BoundaryMetrics:
    """Detection precision/recall/F1 of boundary placement.

    Inputs must be sorted ascending.  Empty-side ratios are reported as 0
    with a flag rather than omitted.
    """
    pred = [int(t) for t in pred]
    gt = [int(t) for t in gt]
    if pred != sorted(pred) or gt != sorted(gt):
        raise ValueError("boundary lists must be sorted ascending")
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    matched = len(match_boundaries(pred, gt, tolerance))
    undefined = []
    if pred:
        precision = matched / len(pred)
    else:
        precision = 0.0
        undefined.append("precision")
    if gt:
        recall = matched / len(gt)
    else:
        recall = 0.0
        undefined.append("recall")
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return BoundaryMetrics(precision=precision, recall=recall, f1=f1,
                           n_matched=matched, n_pred=len(pred), n_gt=len(gt),
                           tolerance=int(tolerance), undefined=undefined)
