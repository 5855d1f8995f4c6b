"""Axis-aligned box algebra: IoU, delta encoding/decoding, clipping.

Boxes are stored in corner form ``(x1, y1, x2, y2)`` as float arrays of
shape ``(..., 4)``. Center form is derived on demand. All functions are
pure and operate on numpy arrays.
"""

from __future__ import annotations

import numpy as np

# Boxes thinner than this after clipping are flagged degenerate.
DEGENERATE_EPS = 1e-6

# Cap on exp(dw), exp(dh) during decode: 1e4x growth per application.
SCALE_CLAMP = float(np.log(1e4))


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def to_center_form(boxes: np.ndarray) -> np.ndarray:
    """Convert corner-form boxes to (cx, cy, w, h)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    cx = boxes[..., 0] + 0.5 * w
    cy = boxes[..., 1] + 0.5 * h
    return np.stack([cx, cy, w, h], axis=-1)


def from_center_form(cboxes: np.ndarray) -> np.ndarray:
    """Convert (cx, cy, w, h) boxes to corner form."""
    cboxes = np.asarray(cboxes, dtype=np.float64)
    cx, cy, w, h = (cboxes[..., i] for i in range(4))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h,
                     cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of two broadcast-compatible box arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a) + box_area(b) - inter
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU matrix of shape (N, M) for boxes a (N,4) and b (M,4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return iou(a[:, None, :], b[None, :, :])


def encode(boxes: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Encode target boxes as deltas (dx, dy, dw, dh) relative to boxes.

    dx = (g_cx - b_cx) / b_w, dy = (g_cy - b_cy) / b_h,
    dw = log(g_w / b_w),      dh = log(g_h / b_h).
    """
    b = to_center_form(boxes)
    g = to_center_form(targets)
    dx = (g[..., 0] - b[..., 0]) / b[..., 2]
    dy = (g[..., 1] - b[..., 1]) / b[..., 3]
    dw = np.log(g[..., 2] / b[..., 2])
    dh = np.log(g[..., 3] / b[..., 3])
    return np.stack([dx, dy, dw, dh], axis=-1)


def decode(boxes: np.ndarray, deltas: np.ndarray,
           scale_clamp: float = SCALE_CLAMP) -> np.ndarray:
    """Apply deltas to boxes; the inverse of :func:`encode`.

    dw/dh are clamped at ``scale_clamp`` so exp cannot overflow; a box
    hitting the clamp ends up oversized and is dropped by :func:`clip`.
    """
    b = to_center_form(boxes)
    d = np.asarray(deltas, dtype=np.float64)
    dw = np.minimum(d[..., 2], scale_clamp)
    dh = np.minimum(d[..., 3], scale_clamp)
    cx = b[..., 0] + d[..., 0] * b[..., 2]
    cy = b[..., 1] + d[..., 1] * b[..., 3]
    w = b[..., 2] * np.exp(dw)
    h = b[..., 3] * np.exp(dh)
    return from_center_form(np.stack([cx, cy, w, h], axis=-1))


def clip(boxes: np.ndarray, canvas_w: float, canvas_h: float,
         eps: float = DEGENERATE_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Clamp boxes to the canvas.

    Returns ``(clipped, valid)`` where ``valid`` is False for boxes whose
    clipped width or height fell below ``eps``; those must be dropped.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    out = np.empty_like(boxes)
    out[..., 0] = np.clip(boxes[..., 0], 0.0, canvas_w)
    out[..., 1] = np.clip(boxes[..., 1], 0.0, canvas_h)
    out[..., 2] = np.clip(boxes[..., 2], 0.0, canvas_w)
    out[..., 3] = np.clip(boxes[..., 3], 0.0, canvas_h)
    valid = ((out[..., 2] - out[..., 0]) >= eps) & \
            ((out[..., 3] - out[..., 1]) >= eps)
    return out, valid
