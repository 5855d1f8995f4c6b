"""Comparison systems: single-stage detector, iterative BBox, integral loss.

All three reuse the cascade machinery. The single-stage detector is a
one-stage cascade. Iterative BBox applies that one regressor repeatedly
at inference only. The integral-loss detector trains one classifier per
IoU threshold on the *same unresampled* samples, sharing a single
regressor, and averages the classifier probabilities at inference.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import assign, evaluation as ev, synth
from .cascade import (CascadeConfig, CascadeModel, StageConfig,
                      default_norm_stats, resample_stage, train_cascade)
from .losses import NormStats, normalize, softmax
from .model import Backbone, HeadParams, backward, forward, init_backbone, \
    init_head, sgd_step

logger = logging.getLogger(__name__)


@dataclass
class IntegralLossModel:
    """Shared backbone + one classifier head per threshold, one regressor.

    ``heads[0]`` carries the shared regressor (trained at min(U)); the
    regressor weights of the other heads are unused.
    """

    backbone: Backbone
    heads: list[HeadParams]
    thresholds: list[float]
    norm_stats: NormStats
    variant: str = "integral"


def single_stage_config(u: float = 0.5, **kwargs) -> CascadeConfig:
    stats = default_norm_stats(1)[0]
    return CascadeConfig(stages=[StageConfig(u, stats, 1.0)], **kwargs)


def train_single(scenes: list[synth.Scene], scene_cfg: synth.SceneConfig,
                 u: float, rng: np.random.Generator,
                 **kwargs) -> tuple[CascadeModel, list[dict]]:
    """Single-head detector at threshold u: exactly a one-stage cascade."""
    cfg = single_stage_config(u, **kwargs)
    model, history = train_cascade(scenes, scene_cfg, cfg, rng)
    model.variant = "single"
    return model, history


def iterative_bbox_infer(model: CascadeModel, scene: synth.Scene,
                         scene_cfg: synth.SceneConfig,
                         rng: np.random.Generator, iterations: int = 3,
                         nms_thresh: float = 0.5,
                         max_dets: int = 100) -> ev.Detections:
    """Apply a single-stage model's regressor ``iterations`` times.

    Features are re-encoded between applications; classifier scores are
    taken once, from the final boxes. With iterations=1 this is exactly
    single-stage inference.
    """
    if model.num_stages != 1:
        raise ValueError("iterative BBox applies to single-stage models")
    stage, head = model.stages[0], model.heads[0]
    boxes, feats = scene.prop_boxes, scene.prop_feats
    for _ in range(iterations):
        boxes, feats = resample_stage(boxes, feats, model.backbone, head,
                                      stage, scene, scene_cfg, rng)
    if boxes.shape[0] == 0:
        return ev.Detections.empty()
    logits, _ = forward(model.backbone, head, feats)
    probs = softmax(logits)
    cls = np.argmax(probs, axis=1)
    fg = cls > 0
    dets = ev.Detections(boxes[fg], cls[fg].astype(np.int64), probs[fg, cls[fg]])
    return ev.nms(dets, nms_thresh, max_dets)


def train_integral_loss(scenes: list[synth.Scene],
                        scene_cfg: synth.SceneConfig,
                        thresholds: tuple[float, ...],
                        cfg: CascadeConfig,
                        rng: np.random.Generator,
                        log_every: int = 100,
                        ) -> tuple[IntegralLossModel, list[dict]]:
    """Train |U| classifiers on identical samples plus one shared regressor.

    Per batch: classification loss sums cross-entropy under each
    threshold's labels; the regressor trains at min(U) on the same boxes.
    With |U| = 1 this reduces to the single-stage detector.
    """
    thresholds = sorted(thresholds)
    d, m = scene_cfg.feature_dim, scene_cfg.num_classes
    backbone = init_backbone(d, cfg.shared_backbone)
    heads = [init_head(d, m, rng, cfg.hidden) for _ in thresholds]
    stats = default_norm_stats(1)[0]
    n = len(scenes)
    order = rng.permutation(n)
    history: list[dict] = []
    loss_acc = np.zeros(len(thresholds))

    for it in range(cfg.iterations):
        if it % n == 0 and it > 0:
            order = rng.permutation(n)
        lr = cfg.lr * (0.1 if it >= (2 * cfg.iterations) // 3 else 1.0)
        scene = scenes[order[it % n]]
        base = assign.assign_labels(scene.prop_boxes, scene.gt_classes,
                                    scene.gt_boxes, thresholds[0])
        idx = assign.sample_minibatch(base.labels, cfg.batch_size,
                                      cfg.pos_fraction, rng)
        feats = scene.prop_feats[idx]
        boxes = scene.prop_boxes[idx]
        targets = normalize(base.reg_targets[idx], stats)

        backbone_acc = None
        for h, (u, head) in enumerate(zip(thresholds, heads)):
            if h == 0:
                labels = base.labels[idx]
                lam = 1.0  # regressor trains with the lowest-threshold head
            else:
                a = assign.assign_labels(boxes, scene.gt_classes,
                                         scene.gt_boxes, u)
                labels = a.labels
                lam = 0.0  # higher-threshold heads are classification-only
            loss, hg, bg = backward(backbone, head, feats, labels, targets, lam)
            loss_acc[h] += loss
            sgd_step(head.tensors(), hg.tensors(), lr)
            if backbone.enabled:
                if backbone_acc is None:
                    backbone_acc = bg.tensors()
                else:
                    backbone_acc = [a_ + g for a_, g in zip(backbone_acc,
                                                            bg.tensors())]
        if backbone.enabled and backbone_acc is not None:
            sgd_step(backbone.tensors(), backbone_acc, lr)

        if (it + 1) % log_every == 0:
            row = {"iteration": it + 1, "lr": lr}
            for h in range(len(thresholds)):
                row[f"loss_head{h + 1}"] = loss_acc[h] / log_every
            history.append(row)
            loss_acc[:] = 0.0

    return IntegralLossModel(backbone, heads, list(thresholds), stats), history


def integral_infer(model: IntegralLossModel, scene: synth.Scene,
                   scene_cfg: synth.SceneConfig, rng: np.random.Generator,
                   nms_thresh: float = 0.5,
                   max_dets: int = 100) -> ev.Detections:
    """Regress once with the shared regressor, then average all classifier
    probabilities on the regressed boxes."""
    stage = StageConfig(model.thresholds[0], model.norm_stats, 1.0)
    boxes, feats = resample_stage(scene.prop_boxes, scene.prop_feats,
                                  model.backbone, model.heads[0], stage,
                                  scene, scene_cfg, rng)
    if boxes.shape[0] == 0:
        return ev.Detections.empty()
    probs = np.mean([softmax(forward(model.backbone, h, feats)[0])
                     for h in model.heads], axis=0)
    cls = np.argmax(probs, axis=1)
    fg = cls > 0
    dets = ev.Detections(boxes[fg], cls[fg].astype(np.int64), probs[fg, cls[fg]])
    return ev.nms(dets, nms_thresh, max_dets)
