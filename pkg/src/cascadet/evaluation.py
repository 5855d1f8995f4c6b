"""COCO-style evaluation: NMS, greedy matching, AP over IoU 0.50:0.05:0.95.

AP uses 101-point interpolation (precision envelope sampled at recalls
0, 0.01, ..., 1.00). Matching is the standard protocol: detections in
score order greedily claim the highest-IoU unmatched ground truth of
their class at or above the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
NMS_THRESHOLD = 0.5
MAX_DETECTIONS = 100


@dataclass
class Detections:
    """Detections for one scene, parallel arrays sorted however produced."""

    boxes: np.ndarray    # (N, 4)
    classes: np.ndarray  # (N,) int in {1..M}
    scores: np.ndarray   # (N,) float in [0, 1]

    def __len__(self) -> int:
        return len(self.scores)

    @staticmethod
    def empty() -> "Detections":
        return Detections(np.zeros((0, 4)), np.zeros(0, dtype=np.int64),
                          np.zeros(0))


@dataclass
class APReport:
    ap_per_threshold: dict[float, float]
    mean_ap: float
    per_class: dict[int, dict[float, float]]
    ap_by_area: dict[str, float] = field(default_factory=dict)
    ar_at_k: dict[int, float] = field(default_factory=dict)

    def alias(self, threshold: float) -> float:
        return self.ap_per_threshold[round(threshold, 2)]

    @property
    def ap50(self) -> float:
        return self.alias(0.50)

    @property
    def ap60(self) -> float:
        return self.alias(0.60)

    @property
    def ap70(self) -> float:
        return self.alias(0.70)

    @property
    def ap75(self) -> float:
        return self.alias(0.75)

    @property
    def ap80(self) -> float:
        return self.alias(0.80)

    @property
    def ap90(self) -> float:
        return self.alias(0.90)


def nms(dets: Detections, iou_thresh: float = NMS_THRESHOLD,
        max_keep: int = MAX_DETECTIONS) -> Detections:
    """Greedy class-wise NMS, then keep the top ``max_keep`` by score.

    Ties in score break toward earlier insertion order (stable sort), so
    the result is deterministic.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("NMS threshold must lie in (0, 1)")
    if len(dets) == 0:
        return dets
    order = np.argsort(-dets.scores, kind="stable")
    keep: list[int] = []
    kept_boxes: dict[int, list[np.ndarray]] = {}
    for i in order:
        cls = int(dets.classes[i])
        same = kept_boxes.get(cls, [])
        box = dets.boxes[i]
        if same and geom.iou(np.array(same), box[None, :]).max() >= iou_thresh:
            continue
        keep.append(i)
        kept_boxes.setdefault(cls, []).append(box)
    keep = keep[:max_keep]
    idx = np.array(keep, dtype=np.int64)
    return Detections(dets.boxes[idx], dets.classes[idx], dets.scores[idx])


def match_detections(dets: Detections, gt_classes: np.ndarray,
                     gt_boxes: np.ndarray, iou_thresh: float,
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching at one IoU threshold.

    ``dets`` must already be in descending score order. Returns
    (det_matched (N,) bool, gt_matched (G,) bool); each ground truth is
    claimed at most once, by the highest-IoU eligible detection of its
    class that reaches it first in score order.
    """
    n, g = len(dets), len(gt_classes)
    det_matched = np.zeros(n, dtype=bool)
    gt_matched = np.zeros(g, dtype=bool)
    if n == 0 or g == 0:
        return det_matched, gt_matched
    ious = geom.iou_matrix(dets.boxes, gt_boxes)
    for i in range(n):
        eligible = (~gt_matched) & (np.asarray(gt_classes) == dets.classes[i]) \
            & (ious[i] >= iou_thresh)
        if eligible.any():
            cand = np.flatnonzero(eligible)
            j = cand[np.argmax(ious[i, cand])]
            det_matched[i] = True
            gt_matched[j] = True
    return det_matched, gt_matched


def average_precision(scores: np.ndarray, matched: np.ndarray,
                      num_gt: int) -> float | None:
    """101-point interpolated AP from pooled detections of one class.

    ``scores``/``matched`` cover the whole dataset; ``num_gt`` is the
    total ground-truth count for the class. Returns None when there are
    no ground truths (AP undefined).
    """
    if num_gt == 0:
        return None
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.asarray(matched, dtype=np.float64)[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / num_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # precision envelope: max precision at recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(sampled.mean())


def _area_band(areas: np.ndarray, size_range: tuple[float, float]) -> np.ndarray:
    """Small/medium/large bands by terciles of the generator's size range."""
    lo, hi = size_range
    cut1, cut2 = (lo + (hi - lo) / 3) ** 2, (lo + 2 * (hi - lo) / 3) ** 2
    return np.digitize(areas, [cut1, cut2])  # 0=S, 1=M, 2=L


def coco_map(dets_per_scene: list[Detections],
             gts_per_scene: list[tuple[np.ndarray, np.ndarray]],
             size_range: tuple[float, float] | None = None) -> APReport:
    """Dataset-level AP per IoU threshold, per class, and their means.

    ``gts_per_scene`` holds (gt_classes, gt_boxes) pairs. Detections are
    sorted per scene by score before matching; pooled ranking for the PR
    curve breaks ties by (score, scene index, detection index) so results
    are independent of scene order.
    """
    classes = sorted({int(c) for gc, _ in gts_per_scene for c in gc})
    per_class: dict[int, dict[float, float]] = {c: {} for c in classes}
    ap_per_threshold: dict[float, float] = {}

    sorted_dets = []
    for dets in dets_per_scene:
        order = np.argsort(-dets.scores, kind="stable")
        sorted_dets.append(Detections(dets.boxes[order], dets.classes[order],
                                      dets.scores[order]))

    for thresh in IOU_THRESHOLDS:
        matched_per_scene = [
            match_detections(d, gc, gb, thresh)[0]
            for d, (gc, gb) in zip(sorted_dets, gts_per_scene)
        ]
        vals = []
        for c in classes:
            scores, matched = [], []
            num_gt = 0
            for d, m, (gc, _) in zip(sorted_dets, matched_per_scene,
                                     gts_per_scene):
                sel = d.classes == c
                scores.append(d.scores[sel])
                matched.append(m[sel])
                num_gt += int((np.asarray(gc) == c).sum())
            ap = average_precision(np.concatenate(scores),
                                   np.concatenate(matched), num_gt)
            if ap is not None:
                per_class[c][thresh] = ap
                vals.append(ap)
        ap_per_threshold[thresh] = float(np.mean(vals)) if vals else 0.0

    mean_ap = float(np.mean(list(ap_per_threshold.values())))
    report = APReport(ap_per_threshold, mean_ap, per_class)
    if size_range is not None:
        report.ap_by_area = _ap_by_area(sorted_dets, gts_per_scene, size_range)
    return report


def _ap_by_area(sorted_dets, gts_per_scene, size_range) -> dict[str, float]:
    """Approximate AP_S/M/L: both ground truths and detections filtered to
    the band before evaluation. Reported only, never asserted."""
    out = {}
    for band, name in enumerate("SML"):
        gts_b, dets_b = [], []
        for d, (gc, gb) in zip(sorted_dets, gts_per_scene):
            gsel = _area_band(geom.box_area(gb), size_range) == band if len(gc) \
                else np.zeros(0, dtype=bool)
            dsel = _area_band(geom.box_area(d.boxes), size_range) == band \
                if len(d) else np.zeros(0, dtype=bool)
            gts_b.append((np.asarray(gc)[gsel], np.asarray(gb).reshape(-1, 4)[gsel]))
            dets_b.append(Detections(d.boxes[dsel], d.classes[dsel],
                                     d.scores[dsel]))
        if any(len(gc) for gc, _ in gts_b):
            out[name] = coco_map(dets_b, gts_b).mean_ap
    return out


def average_recall(proposals_per_scene: list[np.ndarray],
                   gts_per_scene: list[tuple[np.ndarray, np.ndarray]],
                   k: int) -> float:
    """AR@k: recall of the first k proposals per scene, averaged over the
    IoU thresholds 0.50:0.05:0.95 and over all ground truths.

    Proposals are score-less, so "top k" means the first k in order.
    Matching is class-agnostic and greedy in proposal order.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    total_gt = sum(len(gc) for gc, _ in gts_per_scene)
    if total_gt == 0:
        return 0.0
    recalls = []
    for thresh in IOU_THRESHOLDS:
        hit = 0
        for props, (gc, gb) in zip(proposals_per_scene, gts_per_scene):
            props = np.asarray(props, dtype=np.float64).reshape(-1, 4)[:k]
            if len(props) == 0 or len(gc) == 0:
                continue
            ious = geom.iou_matrix(props, gb)
            gt_matched = np.zeros(len(gc), dtype=bool)
            for i in range(len(props)):
                free = (~gt_matched) & (ious[i] >= thresh)
                if free.any():
                    cand = np.flatnonzero(free)
                    gt_matched[cand[np.argmax(ious[i, cand])]] = True
            hit += int(gt_matched.sum())
        recalls.append(hit / total_gt)
    return float(np.mean(recalls))
