"""Tour of the box algebra: IoU, delta encoding, decoding, NMS.

Run: python demos/01_box_toolkit.py
"""

import numpy as np

from cascadet import evaluation, geom

# Two overlapping unit-grid boxes: intersection is 1 cell, union is 7.
a = np.array([0.0, 0.0, 2.0, 2.0])
b = np.array([1.0, 1.0, 3.0, 3.0])
print(f"IoU of the textbook pair: {geom.iou(a, b):.6f}  (exactly 1/7)")

# Delta encoding is translation- and scale-invariant: the regression
# target describes *relative* displacement, so identical layouts at any
# position or scale share a target.
box = np.array([8.0, 8.0, 12.0, 12.0])
gt = np.array([7.0, 11.0, 15.0, 13.0])
delta = geom.encode(box, gt)
print(f"delta (dx, dy, dw, dh) = {np.round(delta, 4)}")
print(f"same delta at 10x scale: {np.round(geom.encode(10 * box, 10 * gt), 4)}")

# decode inverts encode to machine precision
recovered = geom.decode(box, delta)
print(f"decode round-trip error: {np.abs(recovered - gt).max():.2e}")

# Greedy class-wise NMS: the highest-scoring box of each class survives,
# near-duplicates of the same class are suppressed, other classes pass.
boxes = np.array([[0, 0, 10, 10.0], [1, 1, 10, 10.0], [0, 0, 10, 10.0]])
dets = evaluation.Detections(boxes, np.array([1, 1, 2]),
                             np.array([0.9, 0.8, 0.7]))
kept = evaluation.nms(dets, iou_thresh=0.5)
print(f"NMS kept {len(kept)} of {len(dets)} boxes "
      f"(classes {kept.classes.tolist()}, scores {kept.scores.tolist()})")
