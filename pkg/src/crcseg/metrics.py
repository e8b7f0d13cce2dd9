"""Pixel-overlap metrics: per-class IoU, mIoU, and category-agnostic FBIoU.

Confusion counts are pooled over all evaluated episodes per class before the
ratio is taken (the standard convention); ledgers merge associatively so
evaluation can shard.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricsLedger:
    """tp/fp/fn per class plus a global fg/bg pair for FBIoU."""
    per_class: dict[int, np.ndarray] = field(default_factory=dict)
    fg: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))

    def update(self, pred_mask: np.ndarray, gt_mask: np.ndarray,
               class_id: int) -> None:
        confusion_update(self, pred_mask, gt_mask, class_id)

    def merge(self, other: "MetricsLedger") -> "MetricsLedger":
        for cid, counts in other.per_class.items():
            if cid in self.per_class:
                self.per_class[cid] = self.per_class[cid] + counts
            else:
                self.per_class[cid] = counts.copy()
        self.fg += other.fg
        self.bg += other.bg
        return self


def confusion_update(ledger: MetricsLedger, pred_mask: np.ndarray,
                     gt_mask: np.ndarray, class_id: int) -> MetricsLedger:
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    pred = pred_mask > 0
    gt = gt_mask > 0
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    counts = np.array([tp, fp, fn], dtype=np.int64)
    if class_id in ledger.per_class:
        ledger.per_class[class_id] = ledger.per_class[class_id] + counts
    else:
        ledger.per_class[class_id] = counts
    ledger.fg += counts
    # background confusion is the foreground one with roles swapped
    ledger.bg += np.array([int(np.count_nonzero(~pred & ~gt)), fn, fp],
                          dtype=np.int64)
    return ledger


def iou(tp: int, fp: int, fn: int) -> float:
    """tp / (tp+fp+fn); the empty-vs-empty degenerate case counts as 1."""
    denom = tp + fp + fn
    return tp / denom if denom > 0 else 1.0


def miou(ledger: MetricsLedger, class_set=None) -> float:
    """Unweighted mean of per-class IoU."""
    classes = sorted(ledger.per_class) if class_set is None else sorted(class_set)
    if not classes:
        raise ValueError("mIoU over an empty class set")
    vals = []
    for cid in classes:
        if cid not in ledger.per_class:
            raise ValueError(f"class {cid} has no evaluated episodes")
        vals.append(iou(*ledger.per_class[cid]))
    return float(np.mean(vals))


def fbiou(ledger: MetricsLedger) -> float:
    """Mean of foreground and background IoU, ignoring categories."""
    if not ledger.per_class:
        raise ValueError("FBIoU over an empty ledger")
    return 0.5 * (iou(*ledger.fg) + iou(*ledger.bg))
