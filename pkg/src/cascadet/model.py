"""Trainable heads and shared feature transform, with manual backprop.

A head is classifier + class-agnostic regressor on top of an optional
rectified hidden layer; the optional shared backbone is one rectified
affine layer applied before every head. Sizes are tiny, so everything
is plain numpy matrix arithmetic with hand-written gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import loc_loss, softmax_xent

DEFAULT_HIDDEN = 32
INIT_STD = 0.01

# The hidden layer sits behind the backbone rectifier, so its inputs are
# all non-negative; tiny weights with zero bias leave units one SGD step
# from permanent death. A wider init plus a positive bias keeps them alive.
HIDDEN_INIT_STD = 0.1
HIDDEN_BIAS_INIT = 0.5

# The backbone starts as a (shifted) identity so features pass its
# rectifier unclipped from the first step; heads learn around the shift.
BACKBONE_BIAS_INIT = 3.0


@dataclass
class HeadParams:
    """One detection head: optional hidden layer, classifier, regressor."""

    w_hidden: np.ndarray | None  # (H, D) or None for a linear head
    b_hidden: np.ndarray | None  # (H,)
    w_cls: np.ndarray            # (M+1, D') with D' = H or D
    b_cls: np.ndarray            # (M+1,)
    w_reg: np.ndarray            # (4, D')
    b_reg: np.ndarray            # (4,)

    def copy(self) -> "HeadParams":
        return HeadParams(
            None if self.w_hidden is None else self.w_hidden.copy(),
            None if self.b_hidden is None else self.b_hidden.copy(),
            self.w_cls.copy(), self.b_cls.copy(),
            self.w_reg.copy(), self.b_reg.copy())

    def tensors(self) -> list[np.ndarray]:
        out = [] if self.w_hidden is None else [self.w_hidden, self.b_hidden]
        return out + [self.w_cls, self.b_cls, self.w_reg, self.b_reg]


@dataclass
class Backbone:
    """Optional shared rectified affine transform; identity when disabled."""

    w: np.ndarray | None  # (D, D)
    b: np.ndarray | None  # (D,)

    @property
    def enabled(self) -> bool:
        return self.w is not None

    def copy(self) -> "Backbone":
        if not self.enabled:
            return Backbone(None, None)
        return Backbone(self.w.copy(), self.b.copy())

    def tensors(self) -> list[np.ndarray]:
        return [] if not self.enabled else [self.w, self.b]


@dataclass
class HeadGrads:
    w_hidden: np.ndarray | None
    b_hidden: np.ndarray | None
    w_cls: np.ndarray
    b_cls: np.ndarray
    w_reg: np.ndarray
    b_reg: np.ndarray

    def tensors(self) -> list[np.ndarray]:
        out = [] if self.w_hidden is None else [self.w_hidden, self.b_hidden]
        return out + [self.w_cls, self.b_cls, self.w_reg, self.b_reg]


@dataclass
class BackboneGrads:
    w: np.ndarray | None
    b: np.ndarray | None

    def tensors(self) -> list[np.ndarray]:
        return [] if self.w is None else [self.w, self.b]


def init_head(feature_dim: int, num_classes: int,
              rng: np.random.Generator,
              hidden: int | None = DEFAULT_HIDDEN) -> HeadParams:
    """Gaussian(0, 0.01) output weights, zero output biases; the hidden
    layer gets the wider, positively biased init described above."""
    d = feature_dim if hidden is None else hidden
    w_hidden = b_hidden = None
    if hidden is not None:
        w_hidden = rng.normal(0.0, HIDDEN_INIT_STD, (hidden, feature_dim))
        b_hidden = np.full(hidden, HIDDEN_BIAS_INIT)
    return HeadParams(
        w_hidden, b_hidden,
        rng.normal(0.0, INIT_STD, (num_classes + 1, d)), np.zeros(num_classes + 1),
        rng.normal(0.0, INIT_STD, (4, d)), np.zeros(4))


def init_backbone(feature_dim: int, enabled: bool) -> Backbone:
    if not enabled:
        return Backbone(None, None)
    return Backbone(np.eye(feature_dim),
                    np.full(feature_dim, BACKBONE_BIAS_INIT))


def backbone_forward(backbone: Backbone, x: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Returns (output, pre-activation); pre-activation is None when disabled."""
    if not backbone.enabled:
        return x, None
    pre = x @ backbone.w.T + backbone.b
    return np.maximum(pre, 0.0), pre


def _head_forward(head: HeadParams, z: np.ndarray):
    if head.w_hidden is not None:
        pre_h = z @ head.w_hidden.T + head.b_hidden
        h = np.maximum(pre_h, 0.0)
    else:
        pre_h, h = None, z
    logits = h @ head.w_cls.T + head.b_cls
    deltas = h @ head.w_reg.T + head.b_reg
    return logits, deltas, pre_h, h


def forward(backbone: Backbone, head: HeadParams,
            x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch forward pass: features (B, D) -> (logits (B, M+1), deltas (B, 4)).

    Regressor output lives in normalized delta space; callers denormalize
    with the stage's statistics before decoding boxes.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z, _ = backbone_forward(backbone, x)
    logits, deltas, _, _ = _head_forward(head, z)
    return logits, deltas


def backward(backbone: Backbone, head: HeadParams, x: np.ndarray,
             labels: np.ndarray, targets_norm: np.ndarray,
             lam: float = 1.0) -> tuple[float, HeadGrads, BackboneGrads]:
    """Loss and exact gradients for one labeled batch.

    loss = mean_i [ xent_i + lam * [y_i >= 1] * smooth_l1_sum_i ], with
    the localization term gated off for background rows. Empty batches
    yield zero loss and zero gradients.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    if n == 0:
        zh = HeadGrads(*[None if t is None else np.zeros_like(t)
                         for t in (head.w_hidden, head.b_hidden)],
                       np.zeros_like(head.w_cls), np.zeros_like(head.b_cls),
                       np.zeros_like(head.w_reg), np.zeros_like(head.b_reg))
        zb = BackboneGrads(*[None if t is None else np.zeros_like(t)
                             for t in (backbone.w, backbone.b)])
        return 0.0, zh, zb

    z, pre_b = backbone_forward(backbone, x)
    logits, deltas, pre_h, h = _head_forward(head, z)

    xent, d_logits = softmax_xent(logits, labels)
    pos = (labels >= 1).astype(np.float64)
    loc, d_loc = loc_loss(deltas, targets_norm)
    loss = float(np.mean(xent + lam * pos * loc))

    d_logits = d_logits / n
    d_deltas = (lam / n) * pos[:, None] * d_loc

    g_wc = d_logits.T @ h
    g_bc = d_logits.sum(axis=0)
    g_wr = d_deltas.T @ h
    g_br = d_deltas.sum(axis=0)
    dh = d_logits @ head.w_cls + d_deltas @ head.w_reg

    if head.w_hidden is not None:
        d_pre_h = dh * (pre_h > 0)
        g_wh = d_pre_h.T @ z
        g_bh = d_pre_h.sum(axis=0)
        dz = d_pre_h @ head.w_hidden
    else:
        g_wh = g_bh = None
        dz = dh

    if backbone.enabled:
        d_pre_b = dz * (pre_b > 0)
        g_bw = d_pre_b.T @ x
        g_bb = d_pre_b.sum(axis=0)
    else:
        g_bw = g_bb = None

    return loss, HeadGrads(g_wh, g_bh, g_wc, g_bc, g_wr, g_br), \
        BackboneGrads(g_bw, g_bb)


def sgd_step(tensors: list[np.ndarray], grads: list[np.ndarray],
             lr: float) -> None:
    """In-place SGD update; aborts on non-finite gradients."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for t, g in zip(tensors, grads):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient; training aborted")
        t -= lr * g


def head_to_dict(head: HeadParams) -> dict:
    return {
        "w_hidden": None if head.w_hidden is None else head.w_hidden.tolist(),
        "b_hidden": None if head.b_hidden is None else head.b_hidden.tolist(),
        "w_cls": head.w_cls.tolist(), "b_cls": head.b_cls.tolist(),
        "w_reg": head.w_reg.tolist(), "b_reg": head.b_reg.tolist(),
    }


def head_from_dict(d: dict) -> HeadParams:
    def arr(v):
        return None if v is None else np.array(v, dtype=np.float64)
    try:
        head = HeadParams(arr(d["w_hidden"]), arr(d["b_hidden"]),
                          arr(d["w_cls"]), arr(d["b_cls"]),
                          arr(d["w_reg"]), arr(d["b_reg"]))
    except KeyError as e:
        raise ValueError(f"head record missing field {e}") from e
    d_prime = head.w_cls.shape[1]
    for w in (head.w_reg,) + (() if head.w_hidden is None else ()):
        if w.shape[1] != d_prime:
            raise ValueError("head weight shapes are inconsistent")
    return head


def backbone_to_dict(backbone: Backbone) -> dict:
    if not backbone.enabled:
        return {"w": None, "b": None}
    return {"w": backbone.w.tolist(), "b": backbone.b.tolist()}


def backbone_from_dict(d: dict) -> Backbone:
    if d.get("w") is None:
        return Backbone(None, None)
    w = np.array(d["w"], dtype=np.float64)
    b = np.array(d["b"], dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1] or b.shape != (w.shape[0],):
        raise ValueError("backbone weight shapes are inconsistent")
    return Backbone(w, b)
