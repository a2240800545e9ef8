"""Segmentation metrics and directional ablation comparisons."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


class ConfusionAccumulator:
    """Per-class intersection/union/correct counts; merges are exact."""

    def __init__(self, class_count: int):
        if class_count < 1:
            raise ContractError("need at least one class")
        self.class_count = class_count
        self.intersection = np.zeros(class_count, dtype=np.int64)
        self.union = np.zeros(class_count, dtype=np.int64)
        self.correct = np.zeros(class_count, dtype=np.int64)
        self.total = np.zeros(class_count, dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ContractError(f"label maps differ in shape: {pred.shape} vs {gt.shape}")
        valid = gt >= 0      # pixels without ground truth are ignored outright
        p = pred[valid]
        g = gt[valid]
        c = self.class_count
        for cls in range(c):
            pc = p == cls
            gc = g == cls
            inter = int(np.sum(pc & gc))
            self.intersection[cls] += inter
            self.union[cls] += int(np.sum(pc | gc))
            self.correct[cls] += inter
            self.total[cls] += int(np.sum(gc))

    def merge(self, other: "ConfusionAccumulator") -> None:
        if other.class_count != self.class_count:
            raise ContractError("cannot merge accumulators of different sizes")
        self.intersection += other.intersection
        self.union += other.union
        self.correct += other.correct
        self.total += other.total

    def summary(self) -> dict:
        present = self.total > 0
        if not present.any():
            raise ContractError("no class appears in the ground truth")
        iou = np.zeros(self.class_count)
        acc = np.zeros(self.class_count)
        nz = self.union > 0
        iou[nz] = self.intersection[nz] / self.union[nz]
        acc[present] = self.correct[present] / self.total[present]
        return {
            "iou": iou.tolist(),
            "acc": acc.tolist(),
            "present": present.tolist(),
            "miou": float(iou[present].mean()),
            "macc": float(acc[present].mean()),
        }


def miou_macc(pred: np.ndarray, gt: np.ndarray, class_count: int) -> dict:
    """Per-class IoU and accuracy plus their means over classes present in gt."""
    acc = ConfusionAccumulator(class_count)
    acc.add(pred, gt)
    return acc.summary()


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def object_selection_eval(query_masks: dict, gt_masks: dict,
                          iou_gate: float = 0.25) -> dict:
    """Per-query IoU of rendered selection masks against ground truth.

    Accuracy counts queries whose IoU strictly exceeds the gate. Queries
    without ground truth are skipped and reported.
    """
    per_query = {}
    skipped = []
    for q, mask in query_masks.items():
        gt = gt_masks.get(q)
        if gt is None:
            skipped.append(q)
            continue
        per_query[q] = mask_iou(np.asarray(mask, dtype=bool),
                                np.asarray(gt, dtype=bool))
    ious = list(per_query.values())
    return {
        "per_query": per_query,
        "miou": float(np.mean(ious)) if ious else 0.0,
        "acc_at_25": float(np.mean([i > iou_gate for i in ious])) if ious else 0.0,
        "skipped": skipped,
    }


def run_ablation(bundle, variants: list[str], stage1_cfg=None, cluster_cfg=None,
                 stage3_cfg=None) -> dict:
    """Train each requested variant on the same scene/seed and tabulate
    held-out semantic mIoU/mAcc. See pipeline.ablation_variants for names."""
    from . import pipeline  # local import; pipeline depends on this module
    return pipeline.run_ablation_variants(bundle, variants, stage1_cfg,
                                          cluster_cfg, stage3_cfg)
