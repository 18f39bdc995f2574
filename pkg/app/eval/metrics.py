# app/eval/metrics.py
"""
IoU metrics. Counts come from sklearn's confusion matrix (rows = ground truth, columns =
prediction) and are pooled per class across episodes before dividing.
"""
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import confusion_matrix


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} must share a shape")
    return pred.astype(np.int64).ravel(), gt.astype(np.int64).ravel()


def class_counts(pred: np.ndarray, gt: np.ndarray, n_labels: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-label (intersection, union) integer counts for labels 0 .. n_labels - 1."""
    p, g = _check_pair(pred, gt)
    for name, arr in (("prediction", p), ("ground truth", g)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_labels):
            raise ValueError(f"{name} labels must lie in [0, {n_labels - 1}]")
    if p.size == 0:
        zeros = np.zeros(n_labels, dtype=np.int64)
        return zeros, zeros.copy()
    cm = confusion_matrix(g, p, labels=np.arange(n_labels))
    inter = np.diag(cm).astype(np.int64)
    union = (cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)).astype(np.int64)
    return inter, union


def iou(pred: np.ndarray, gt: np.ndarray, cls: int) -> Optional[float]:
    """IoU of one label; None when neither mask contains it."""
    p, g = _check_pair(pred, gt)
    inter = int(np.count_nonzero((p == cls) & (g == cls)))
    union = int(np.count_nonzero((p == cls) | (g == cls)))
    if union == 0:
        return None
    return inter / union


def _binary_counts(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    p, g = _check_pair(pred, gt)
    return class_counts((p > 0).astype(np.int64), (g > 0).astype(np.int64), 2)


def _mean_defined(inter: np.ndarray, union: np.ndarray) -> float:
    defined = union > 0
    if not defined.any():
        raise ValueError("IoU is undefined: every union is empty")
    return float(np.mean(inter[defined] / union[defined]))


def binary_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean of the foreground-as-one-class IoU and the background IoU."""
    return _mean_defined(*_binary_counts(pred, gt))


@dataclass
class IoUAccumulator:
    """
    Pooled intersection/union counts keyed by global class id, plus pooled foreground/background
    counts for binary IoU. Sums are commutative, so episode order never changes the result.
    """
    intersection: Dict[int, int] = field(default_factory=dict)
    union: Dict[int, int] = field(default_factory=dict)
    binary_intersection: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=np.int64))
    binary_union: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=np.int64))
    n_episodes: int = 0

    def add(self, pred: np.ndarray, gt: np.ndarray, class_ids: Sequence[int]) -> None:
        """Add one query; task label c (1..N) counts toward global class class_ids[c - 1]."""
        inter, union = class_counts(pred, gt, len(class_ids) + 1)
        for label, cid in enumerate(class_ids, start=1):
            cid = int(cid)
            self.intersection[cid] = self.intersection.get(cid, 0) + int(inter[label])
            self.union[cid] = self.union.get(cid, 0) + int(union[label])
        b_inter, b_union = _binary_counts(pred, gt)
        self.binary_intersection += b_inter
        self.binary_union += b_union

    def merge(self, other: "IoUAccumulator") -> "IoUAccumulator":
        for cid, v in other.intersection.items():
            self.intersection[cid] = self.intersection.get(cid, 0) + v
        for cid, v in other.union.items():
            self.union[cid] = self.union.get(cid, 0) + v
        self.binary_intersection += other.binary_intersection
        self.binary_union += other.binary_union
        self.n_episodes += other.n_episodes
        return self

    def per_class_iou(self) -> Dict[int, float]:
        return {cid: self.intersection[cid] / u for cid, u in sorted(self.union.items()) if u > 0}

    def mean_iou(self) -> float:
        per_class = self.per_class_iou()
        if not per_class:
            raise ValueError("mean IoU is undefined: no class has a nonempty pooled union")
        return float(np.mean(list(per_class.values())))

    def binary_iou(self) -> float:
        return _mean_defined(self.binary_intersection, self.binary_union)


def mean_iou(results: Iterable[Tuple[np.ndarray, np.ndarray, Sequence[int]]]) -> float:
    """Pooled mean IoU over (pred, gt, class_ids) episode results."""
    acc = IoUAccumulator()
    for pred, gt, class_ids in results:
        acc.add(pred, gt, class_ids)
        acc.n_episodes += 1
    if acc.n_episodes == 0:
        raise ValueError("mean_iou needs at least one episode")
    return acc.mean_iou()
