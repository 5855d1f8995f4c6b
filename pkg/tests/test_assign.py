import numpy as np
import pytest

from cascadet import assign, geom


def brute_force_assign(props, gt_classes, gt_boxes, u):
    """Python-loop oracle: argmax GT per proposal, ties to lowest index."""
    labels, matched, best_ious = [], [], []
    for p in props:
        ious = [geom.iou(p, g) for g in gt_boxes]
        best, best_iou = 0, -1.0
        for j, v in enumerate(ious):
            if v > best_iou:
                best, best_iou = j, v
        if best_iou >= u:
            labels.append(int(gt_classes[best]))
            matched.append(best)
        else:
            labels.append(0)
            matched.append(-1)
        best_ious.append(best_iou)
    return np.array(labels), np.array(matched), np.array(best_ious)


def random_scene(rng, n_props=40, n_gt=5):
    def boxes(n):
        x1 = rng.uniform(0, 80, n)
        y1 = rng.uniform(0, 80, n)
        return np.stack([x1, y1, x1 + rng.uniform(5, 30, n),
                         y1 + rng.uniform(5, 30, n)], axis=1)
    return boxes(n_props), rng.integers(1, 4, n_gt), boxes(n_gt)


class TestAssignLabels:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for u in (0.3, 0.5, 0.7):
            for _ in range(20):
                props, cls, gts = random_scene(rng)
                got = assign.assign_labels(props, cls, gts, u)
                labels, matched, ious = brute_force_assign(props, cls, gts, u)
                np.testing.assert_array_equal(got.labels, labels)
                np.testing.assert_array_equal(got.matched_gt, matched)
                np.testing.assert_allclose(got.matched_iou, ious, atol=1e-12)

    def test_regression_targets_point_at_matched_gt(self):
        rng = np.random.default_rng(1)
        props, cls, gts = random_scene(rng)
        a = assign.assign_labels(props, cls, gts, 0.3)
        pos = a.positive_mask
        decoded = geom.decode(props[pos], a.reg_targets[pos])
        np.testing.assert_allclose(decoded, gts[a.matched_gt[pos]], atol=1e-9)
        np.testing.assert_array_equal(a.reg_targets[~pos], 0.0)

    def test_positive_count_monotone_in_threshold(self):
        rng = np.random.default_rng(2)
        props, cls, gts = random_scene(rng, n_props=200)
        counts = [assign.assign_labels(props, cls, gts, u).positive_mask.sum()
                  for u in (0.3, 0.4, 0.5, 0.6, 0.7, 0.8)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_proposal_permutation_invariance(self):
        rng = np.random.default_rng(3)
        props, cls, gts = random_scene(rng)
        perm = rng.permutation(len(props))
        a = assign.assign_labels(props, cls, gts, 0.5)
        b = assign.assign_labels(props[perm], cls, gts, 0.5)
        np.testing.assert_array_equal(a.labels[perm], b.labels)
        np.testing.assert_array_equal(a.matched_gt[perm], b.matched_gt)

    def test_tie_breaks_to_lowest_gt_index(self):
        # two identical GTs with different classes: lowest index wins
        gts = np.array([[0.0, 0, 10, 10], [0.0, 0, 10, 10]])
        a = assign.assign_labels(np.array([[0.0, 0, 10, 10]]),
                                 np.array([2, 3]), gts, 0.5)
        assert a.matched_gt[0] == 0 and a.labels[0] == 2

    def test_no_gt_means_all_background(self):
        a = assign.assign_labels(np.array([[0.0, 0, 10, 10]]),
                                 np.zeros(0, dtype=int), np.zeros((0, 4)), 0.5)
        assert a.labels[0] == 0 and a.matched_gt[0] == -1

    def test_rejects_threshold_out_of_range(self):
        props = np.array([[0.0, 0, 1, 1]])
        for u in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(ValueError):
                assign.assign_labels(props, np.array([1]), props, u)

    def test_select_regression_indices_are_positives(self):
        rng = np.random.default_rng(4)
        props, cls, gts = random_scene(rng)
        a = assign.assign_labels(props, cls, gts, 0.4)
        np.testing.assert_array_equal(assign.select_regression_indices(a),
                                      np.flatnonzero(a.labels > 0))


class TestSampleMinibatch:
    def test_positive_cap(self):
        labels = np.concatenate([np.ones(100, dtype=int), np.zeros(100, dtype=int)])
        rng = np.random.default_rng(0)
        idx = assign.sample_minibatch(labels, 64, 0.25, rng)
        assert len(idx) == 64
        assert (labels[idx] > 0).sum() == 16  # ceil(64 * 0.25)

    def test_scarce_positives_backfilled_with_negatives(self):
        labels = np.concatenate([np.ones(3, dtype=int), np.zeros(200, dtype=int)])
        idx = assign.sample_minibatch(labels, 64, 0.25, np.random.default_rng(1))
        assert len(idx) == 64
        assert (labels[idx] > 0).sum() == 3

    def test_small_pool_returned_whole(self):
        labels = np.array([1, 0, 0, 1])
        np.testing.assert_array_equal(
            assign.sample_minibatch(labels, 64, 0.25, np.random.default_rng(2)),
            np.arange(4))

    def test_deterministic_given_rng_state(self):
        labels = (np.random.default_rng(3).random(500) < 0.2).astype(int)
        a = assign.sample_minibatch(labels, 64, 0.25, np.random.default_rng(9))
        b = assign.sample_minibatch(labels, 64, 0.25, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_output_sorted_unique(self):
        labels = (np.random.default_rng(4).random(500) < 0.2).astype(int)
        idx = assign.sample_minibatch(labels, 64, 0.25, np.random.default_rng(5))
        assert np.all(np.diff(idx) > 0)
