"""File formats: dataset JSON Lines, model JSON, metrics JSON/CSV.

All emission is deterministic (sorted keys, fixed separators, repr-exact
floats) so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from .baselines import IntegralLossModel
from .cascade import CascadeModel, StageConfig
from .evaluation import APReport
from .losses import NormStats
from .model import (backbone_from_dict, backbone_to_dict, head_from_dict,
                    head_to_dict)
from .synth import Scene, SceneConfig

FORMAT_VERSION = 1


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(obj) -> str:
    """Stable sha256 digest of any JSON-serializable config."""
    return hashlib.sha256(_dumps(obj).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- datasets

def scene_config_to_dict(cfg: SceneConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["objects_per_scene"] = list(d["objects_per_scene"])
    d["size_range"] = list(d["size_range"])
    return d


def scene_config_from_dict(d: dict) -> SceneConfig:
    known = {f.name for f in dataclasses.fields(SceneConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
    d = dict(d)
    for key in ("objects_per_scene", "size_range"):
        if key in d:
            d[key] = tuple(d[key])
    return SceneConfig(**d)


def write_dataset(path: str | Path, scenes: list[Scene], cfg: SceneConfig,
                  seed: int) -> None:
    """JSON Lines: a header record, then one scene per line."""
    header = {"format_version": FORMAT_VERSION,
              "scene_config": scene_config_to_dict(cfg), "seed": seed}
    with open(path, "w", encoding="utf-8") as f:
        f.write(_dumps(header) + "\n")
        for scene in scenes:
            rec = {
                "gts": [{"class": int(c), "box": list(b)}
                        for c, b in zip(scene.gt_classes, scene.gt_boxes.tolist())],
                "proposals": [{"box": list(b), "feat": list(ft)}
                              for b, ft in zip(scene.prop_boxes.tolist(),
                                               scene.prop_feats.tolist())],
            }
            f.write(_dumps(rec) + "\n")


def read_dataset(path: str | Path) -> tuple[list[Scene], SceneConfig, int]:
    with open(path, encoding="utf-8") as f:
        header = json.loads(f.readline())
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format version "
                             f"{header.get('format_version')}")
        cfg = scene_config_from_dict(header["scene_config"])
        scenes = []
        for line in f:
            rec = json.loads(line)
            gts = rec["gts"]
            props = rec["proposals"]
            scenes.append(Scene(
                gt_classes=np.array([g["class"] for g in gts], dtype=np.int64),
                gt_boxes=np.array([g["box"] for g in gts]).reshape(-1, 4),
                prop_boxes=np.array([p["box"] for p in props]).reshape(-1, 4),
                prop_feats=np.array([p["feat"] for p in props])
                    .reshape(-1, cfg.feature_dim),
            ))
    return scenes, cfg, header["seed"]


# ------------------------------------------------------------------ models

def _stage_to_dict(stage: StageConfig, head) -> dict:
    return {"u": stage.u, "lambda": stage.lam, "loss_weight": stage.loss_weight,
            "norm_stats": {"mu": stage.norm_stats.mu.tolist(),
                           "sigma": stage.norm_stats.sigma.tolist()},
            "head": head_to_dict(head)}


def _stage_from_dict(d: dict) -> tuple[StageConfig, object]:
    stats = NormStats(np.array(d["norm_stats"]["mu"]),
                      np.array(d["norm_stats"]["sigma"]))
    stage = StageConfig(d["u"], stats, d["loss_weight"], d["lambda"])
    return stage, head_from_dict(d["head"])


def save_model(path: str | Path,
               model: CascadeModel | IntegralLossModel) -> None:
    if isinstance(model, IntegralLossModel):
        stages = [_stage_to_dict(StageConfig(u, model.norm_stats, 1.0), h)
                  for u, h in zip(model.thresholds, model.heads)]
    else:
        stages = [_stage_to_dict(s, h)
                  for s, h in zip(model.stages, model.heads)]
    doc = {"format_version": FORMAT_VERSION, "variant": model.variant,
           "backbone": backbone_to_dict(model.backbone), "stages": stages}
    Path(path).write_text(_dumps(doc) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> CascadeModel | IntegralLossModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"model file {path} is corrupt or truncated: {e}") from e
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version "
                         f"{doc.get('format_version')}")
    pairs = [_stage_from_dict(s) for s in doc["stages"]]
    stages = [p[0] for p in pairs]
    heads = [p[1] for p in pairs]
    backbone = backbone_from_dict(doc["backbone"])
    if doc["variant"] == "integral":
        return IntegralLossModel(backbone, heads, [s.u for s in stages],
                                 stages[0].norm_stats)
    return CascadeModel(backbone, heads, stages, variant=doc["variant"])


# ----------------------------------------------------------------- metrics

CSV_COLUMNS = ("AP", "AP50", "AP60", "AP70", "AP80", "AP90")


def report_to_dict(report: APReport) -> dict:
    return {
        "mean_ap": report.mean_ap,
        "ap_per_threshold": {f"{t:.2f}": v
                             for t, v in report.ap_per_threshold.items()},
        "per_class": {str(c): {f"{t:.2f}": v for t, v in d.items()}
                      for c, d in report.per_class.items()},
        "ap_by_area": report.ap_by_area,
        "ar_at_k": {str(k): v for k, v in report.ar_at_k.items()},
    }


def report_csv_row(report: APReport) -> list[float]:
    return [report.mean_ap, report.ap50, report.ap60, report.ap70,
            report.ap80, report.ap90]


def write_metrics(path_json: str | Path, payload: dict) -> None:
    Path(path_json).write_text(_dumps(payload) + "\n", encoding="utf-8")


def write_csv(path: str | Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(
            f"{v:.6f}" if isinstance(v, float) else str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
