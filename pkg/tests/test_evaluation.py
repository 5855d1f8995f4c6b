import numpy as np
import pytest

from cascadet import evaluation, geom
from cascadet.evaluation import Detections, IOU_THRESHOLDS


# ---------------------------------------------------------------------------
# Independent reference implementations (pure Python, no shared code paths)
# ---------------------------------------------------------------------------

def ref_nms(dets, iou_thresh, max_keep=100):
    order = sorted(range(len(dets)), key=lambda i: (-dets.scores[i], i))
    kept = []
    for i in order:
        ok = True
        for j in kept:
            if dets.classes[j] == dets.classes[i] and \
                    geom.iou(dets.boxes[j], dets.boxes[i]) >= iou_thresh:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept[:max_keep]


def ref_match(dets, gt_classes, gt_boxes, thresh):
    """Greedy matching oracle; dets already score-descending."""
    taken = set()
    matched = [False] * len(dets)
    for i in range(len(dets)):
        best, best_iou = None, -1.0
        for j in range(len(gt_classes)):
            if j in taken or gt_classes[j] != dets.classes[i]:
                continue
            v = geom.iou(dets.boxes[i], gt_boxes[j])
            if v >= thresh and v > best_iou:
                best, best_iou = j, v
        if best is not None:
            taken.add(best)
            matched[i] = True
    return matched


def ref_ap(scores, matched, num_gt):
    if num_gt == 0:
        return None
    if not len(scores):
        return 0.0
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    tp = fp = 0
    precs, recs = [], []
    for i in order:
        tp, fp = tp + bool(matched[i]), fp + (not matched[i])
        precs.append(tp / (tp + fp))
        recs.append(tp / num_gt)
    pts = [k / 100 for k in range(101)]
    total = 0.0
    for r in pts:
        cands = [p for p, rr in zip(precs, recs) if rr >= r - 1e-12]
        total += max(cands) if cands else 0.0
    return total / 101


def ref_coco_map(dets_per_scene, gts_per_scene):
    classes = sorted({int(c) for gc, _ in gts_per_scene for c in gc})
    sorted_dets = []
    for d in dets_per_scene:
        order = sorted(range(len(d)), key=lambda i: (-d.scores[i], i))
        idx = np.array(order, dtype=int)
        sorted_dets.append(Detections(d.boxes[idx], d.classes[idx],
                                      d.scores[idx]))
    thr_aps = []
    for thresh in IOU_THRESHOLDS:
        matched = [ref_match(d, gc, gb, thresh)
                   for d, (gc, gb) in zip(sorted_dets, gts_per_scene)]
        vals = []
        for c in classes:
            scores, hits, num_gt = [], [], 0
            for d, m, (gc, _) in zip(sorted_dets, matched, gts_per_scene):
                for i in range(len(d)):
                    if d.classes[i] == c:
                        scores.append(float(d.scores[i]))
                        hits.append(m[i])
                num_gt += sum(1 for x in gc if x == c)
            ap = ref_ap(scores, hits, num_gt)
            if ap is not None:
                vals.append(ap)
        thr_aps.append(sum(vals) / len(vals) if vals else 0.0)
    return sum(thr_aps) / len(thr_aps)


def random_dets(rng, n, lo=0, hi=60):
    x1 = rng.uniform(lo, hi, n)
    y1 = rng.uniform(lo, hi, n)
    boxes = np.stack([x1, y1, x1 + rng.uniform(5, 30, n),
                      y1 + rng.uniform(5, 30, n)], axis=1)
    return Detections(boxes, rng.integers(1, 4, n),
                      np.round(rng.random(n), 2))  # rounded: exercises ties


class TestNms:
    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(50):
            dets = random_dets(rng, int(rng.integers(0, 40)))
            got = evaluation.nms(dets, 0.5)
            want = ref_nms(dets, 0.5)
            np.testing.assert_array_equal(got.boxes, dets.boxes[want])
            np.testing.assert_array_equal(got.scores, dets.scores[want])

    def test_different_classes_never_suppress(self):
        boxes = np.array([[0, 0, 10, 10.0], [0, 0, 10, 10.0]])
        dets = Detections(boxes, np.array([1, 2]), np.array([0.9, 0.8]))
        assert len(evaluation.nms(dets, 0.5)) == 2

    def test_duplicates_suppressed_keep_highest_score(self):
        boxes = np.array([[0, 0, 10, 10.0], [1, 1, 10, 10.0]])
        dets = Detections(boxes, np.array([1, 1]), np.array([0.5, 0.9]))
        out = evaluation.nms(dets, 0.5)
        assert len(out) == 1 and out.scores[0] == 0.9

    def test_max_keep_truncates(self):
        rng = np.random.default_rng(1)
        dets = random_dets(rng, 300, hi=2000)
        assert len(evaluation.nms(dets, 0.99, max_keep=100)) == 100

    def test_rejects_bad_threshold(self):
        with pytest.raises(ValueError):
            evaluation.nms(Detections.empty(), 1.0)


class TestMatching:
    def test_matches_oracle_on_random_scenes(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            dets = random_dets(rng, int(rng.integers(0, 15)))
            order = np.argsort(-dets.scores, kind="stable")
            dets = Detections(dets.boxes[order], dets.classes[order],
                              dets.scores[order])
            g = int(rng.integers(0, 6))
            gts = random_dets(rng, g)
            for thresh in (0.5, 0.75):
                got, _ = evaluation.match_detections(
                    dets, gts.classes, gts.boxes, thresh)
                assert list(got) == ref_match(dets, gts.classes, gts.boxes,
                                              thresh)

    def test_each_gt_claimed_once(self):
        gt = np.array([[0, 0, 10, 10.0]])
        dets = Detections(np.array([[0, 0, 10, 10.0], [0, 0, 10, 10.0]]),
                          np.array([1, 1]), np.array([0.9, 0.8]))
        det_m, gt_m = evaluation.match_detections(dets, np.array([1]), gt, 0.5)
        assert list(det_m) == [True, False] and gt_m[0]

    def test_class_mismatch_never_matches(self):
        gt = np.array([[0, 0, 10, 10.0]])
        dets = Detections(gt.copy(), np.array([2]), np.array([0.9]))
        det_m, _ = evaluation.match_detections(dets, np.array([1]), gt, 0.5)
        assert not det_m[0]


class TestAveragePrecision:
    def test_hand_cases(self):
        # one GT claimed by the highest-scoring det: a later FP cannot
        # reduce AP because recall 1.0 is reached at precision 1.0
        assert evaluation.average_precision(
            np.array([0.9, 0.8]), np.array([True, False]), 1) == pytest.approx(1.0)
        # FP outranking the TP halves the precision everywhere
        assert evaluation.average_precision(
            np.array([0.9, 0.8]), np.array([False, True]), 1) == pytest.approx(0.5)
        assert evaluation.average_precision(np.zeros(0), np.zeros(0, bool), 3) == 0.0
        assert evaluation.average_precision(np.array([0.9]),
                                            np.array([True]), 0) is None

    def test_missed_gt_caps_recall(self):
        # 2 GT, only one found: sampled recall points above 0.5 contribute 0
        ap = evaluation.average_precision(np.array([0.9]), np.array([True]), 2)
        assert ap == pytest.approx(51 / 101)

    def test_matches_reference_on_random_inputs(self):
        rng = np.random.default_rng(3)
        for _ in range(300):
            n = int(rng.integers(0, 12))
            scores = np.round(rng.random(n), 1)
            matched = rng.random(n) < 0.5
            num_gt = int(max(matched.sum(), rng.integers(0, 6)))
            got = evaluation.average_precision(scores, matched, num_gt)
            want = ref_ap(list(scores), list(matched), num_gt)
            if want is None:
                assert got is None
            else:
                assert got == pytest.approx(want, abs=1e-9)


class TestCocoMap:
    def test_perfect_detections_score_one(self):
        rng = np.random.default_rng(4)
        gts = [random_dets(rng, 5) for _ in range(3)]
        dets = [Detections(g.boxes.copy(), g.classes.copy(),
                           np.full(len(g), 0.9)) for g in gts]
        report = evaluation.coco_map(dets, [(g.classes, g.boxes) for g in gts])
        assert report.mean_ap == pytest.approx(1.0)
        assert report.ap50 == report.ap90 == pytest.approx(1.0)

    def test_matches_reference_evaluator_on_random_instances(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            n_scenes = int(rng.integers(1, 3))
            gts, dets = [], []
            for _ in range(n_scenes):
                g = random_dets(rng, int(rng.integers(1, 5)))
                gts.append((g.classes, g.boxes))
                d = random_dets(rng, int(rng.integers(0, 8)))
                # mix in noisy copies of GT so some detections match
                take = rng.random(len(g)) < 0.5
                near = g.boxes[take] + rng.normal(0, 1.0, (take.sum(), 4))
                d = Detections(
                    np.concatenate([d.boxes, near]),
                    np.concatenate([d.classes, g.classes[take]]),
                    np.concatenate([d.scores,
                                    np.round(rng.random(take.sum()), 2)]))
                dets.append(d)
            got = evaluation.coco_map(dets, gts).mean_ap
            assert got == pytest.approx(ref_coco_map(dets, gts), abs=1e-9)

    def test_ap_nonincreasing_in_threshold(self):
        rng = np.random.default_rng(6)
        gts, dets = [], []
        for _ in range(10):
            g = random_dets(rng, 6)
            gts.append((g.classes, g.boxes))
            noisy = g.boxes + rng.normal(0, 2.0, g.boxes.shape)
            dets.append(Detections(noisy, g.classes, rng.random(6)))
        report = evaluation.coco_map(dets, gts)
        aps = [report.ap_per_threshold[t] for t in IOU_THRESHOLDS]
        assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))

    def test_area_bands_reported(self):
        rng = np.random.default_rng(7)
        g = random_dets(rng, 10, hi=500)
        report = evaluation.coco_map(
            [Detections(g.boxes, g.classes, np.full(10, 0.9))],
            [(g.classes, g.boxes)], size_range=(5.0, 35.0))
        assert set(report.ap_by_area) <= {"S", "M", "L"}
        assert report.ap_by_area


class TestAverageRecall:
    def test_perfect_proposals(self):
        rng = np.random.default_rng(8)
        g = random_dets(rng, 5)
        assert evaluation.average_recall([g.boxes], [(g.classes, g.boxes)],
                                         k=5) == 1.0

    def test_partial_overlap_counts_matching_thresholds_only(self):
        gt = np.array([[0.0, 0.0, 10.0, 10.0]])
        prop = np.array([[0.0, 0.0, 10.0, 5.5]])  # IoU exactly 0.55
        ar = evaluation.average_recall([prop], [(np.array([1]), gt)], k=1)
        assert ar == pytest.approx(2 / 10)

    def test_k_truncates_proposal_list(self):
        gt = np.array([[0.0, 0.0, 10.0, 10.0]])
        props = np.array([[50, 50, 60, 60.0], gt[0]])
        assert evaluation.average_recall([props], [(np.array([1]), gt)], k=1) == 0.0
        assert evaluation.average_recall([props], [(np.array([1]), gt)], k=2) == 1.0

    def test_rejects_bad_k(self):
        with pytest.raises(ValueError):
            evaluation.average_recall([], [], k=0)
