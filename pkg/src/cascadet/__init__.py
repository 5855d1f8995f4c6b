"""Desk-scale study of multi-stage, IoU-threshold-increasing detection
heads on a synthetic proposal benchmark, with a COCO-style evaluator."""

from . import assign, baselines, cascade, evaluation, geom, losses, model, \
    storage, synth

__all__ = ["assign", "baselines", "cascade", "evaluation", "geom", "losses",
           "model", "storage", "synth"]

__version__ = "0.1.0"
