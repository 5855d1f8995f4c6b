"""IoU-threshold label assignment and minibatch sampling.

A proposal is positive under threshold ``u`` when its max-IoU ground
truth overlaps it by at least ``u``; it then inherits that ground
truth's class and a regression target pointing at its box. Everything
below ``u`` is background (class 0). There is no ignore band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geom


@dataclass
class Assignment:
    """Per-proposal labels under one IoU threshold (array-of-fields form).

    labels: (P,) int, 0 = background.
    matched_gt: (P,) int, index of the argmax-IoU ground truth, -1 for
        background.
    matched_iou: (P,) float, IoU against the matched ground truth (0 when
        there are no ground truths).
    reg_targets: (P, 4) float, encode(proposal, matched gt) for positives,
        zeros for background rows.
    """

    labels: np.ndarray
    matched_gt: np.ndarray
    matched_iou: np.ndarray
    reg_targets: np.ndarray

    @property
    def positive_mask(self) -> np.ndarray:
        return self.labels > 0


def assign_labels(prop_boxes: np.ndarray, gt_classes: np.ndarray,
                  gt_boxes: np.ndarray, u: float) -> Assignment:
    """Label each proposal against its argmax-IoU ground truth.

    Ties on max IoU break toward the lowest ground-truth index, so the
    result is independent of proposal order.
    """
    if not 0.0 < u < 1.0:
        raise ValueError(f"threshold u must lie in (0, 1), got {u}")
    prop_boxes = np.asarray(prop_boxes, dtype=np.float64).reshape(-1, 4)
    n = prop_boxes.shape[0]
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)

    if gt_boxes.shape[0] == 0 or n == 0:
        return Assignment(
            labels=np.zeros(n, dtype=np.int64),
            matched_gt=np.full(n, -1, dtype=np.int64),
            matched_iou=np.zeros(n),
            reg_targets=np.zeros((n, 4)),
        )

    ious = geom.iou_matrix(prop_boxes, gt_boxes)
    best = np.argmax(ious, axis=1)  # lowest index wins ties
    best_iou = ious[np.arange(n), best]
    pos = best_iou >= u

    labels = np.where(pos, gt_classes[best], 0)
    matched_gt = np.where(pos, best, -1)
    reg_targets = np.zeros((n, 4))
    if pos.any():
        reg_targets[pos] = geom.encode(prop_boxes[pos], gt_boxes[best[pos]])
    return Assignment(labels, matched_gt, best_iou, reg_targets)


def select_regression_indices(assignment: Assignment) -> np.ndarray:
    """Indices of samples used for regression: exactly the positives.

    Raising the threshold therefore removes the large-delta outliers from
    the regression set.
    """
    return np.flatnonzero(assignment.positive_mask)


def sample_minibatch(labels: np.ndarray, size: int, pos_fraction: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Sample a class-balanced minibatch of proposal indices.

    Positives are capped at ceil(size * pos_fraction); the shortfall is
    filled with negatives. If the pool is smaller than ``size`` every
    index is returned. Output is sorted for determinism.
    """
    if not 0.0 < pos_fraction < 1.0:
        raise ValueError(f"pos_fraction must lie in (0, 1), got {pos_fraction}")
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n <= size:
        return np.arange(n)

    pos_idx = np.flatnonzero(labels > 0)
    neg_idx = np.flatnonzero(labels == 0)
    n_pos = min(len(pos_idx), math.ceil(size * pos_fraction))
    n_neg = min(len(neg_idx), size - n_pos)
    picked = []
    if n_pos:
        picked.append(rng.choice(pos_idx, size=n_pos, replace=False))
    if n_neg:
        picked.append(rng.choice(neg_idx, size=n_neg, replace=False))
    if not picked:
        return np.arange(0)
    return np.sort(np.concatenate(picked))
