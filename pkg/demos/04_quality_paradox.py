"""The training-threshold paradox, and why it is a mismatch problem.

Training a detector at a high IoU threshold (u=0.7) *hurts* overall AP
on ordinary proposals: almost nothing in the pool clears the bar, so the
detector starves and overfits. But the same detector is not bad -- it is
mismatched. Feed it high-quality candidates (here: inject the ground
truth boxes into the proposal pool at eval time) and it wins at AP90.

Run: python demos/04_quality_paradox.py   (about a minute)
"""

import numpy as np

from cascadet import cli, synth
from cascadet.cli import ExperimentConfig

cfg = ExperimentConfig(train_scenes=500, test_scenes=150, iterations=6000)
seed = 7

train = cli.gen_scenes(cfg, seed, cli.STREAM_TRAIN_DATA, cfg.train_scenes)
test = cli.gen_scenes(cfg, seed, cli.STREAM_TEST_DATA, cfg.test_scenes)

# eval set with ground truths injected as proposals
injected = []
for i, s in enumerate(test):
    rng = np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(cli.STREAM_EVAL, 10_000 + i)))
    gt_feats = synth.encode_features(s.gt_boxes, s.gt_classes, s.gt_boxes,
                                     cfg.scene, rng)
    injected.append(synth.Scene(
        s.gt_classes, s.gt_boxes,
        np.concatenate([s.gt_boxes, s.prop_boxes]),
        np.concatenate([gt_feats, s.prop_feats])))

print(f"{'detector':<10}{'AP (plain)':>12}{'AP90 (plain)':>14}"
      f"{'AP90 (+GT)':>12}")
for i, u in enumerate((0.5, 0.6, 0.7)):
    model, _ = cli.train_variant(cfg, train, seed, "single",
                                 thresholds=(u,), rng_offset=i)
    plain = cli.evaluate_model(model, cfg, test, seed)
    boosted = cli.evaluate_model(model, cfg, injected, seed)
    print(f"u = {u:<6}{plain.mean_ap:>12.3f}{plain.ap90:>14.3f}"
          f"{boosted.ap90:>12.3f}")

print("\nplain: AP falls as u rises (the paradox).")
print("with GT injected: the u=0.7 detector takes the high-IoU crown --")
print("the cascade exists to manufacture those high-quality inputs.")
