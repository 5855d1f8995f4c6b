"""Config-driven experiment runner.

Subcommands: gen | train | eval | experiment | inspect. Configuration is
an INI file with [dataset], [train] and [eval] sections; every key has a
default, so presets run with no config at all. All randomness derives
from one master seed through named sub-streams, and every output embeds
the seed plus a config digest.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, cascade, evaluation, storage, synth

# Sub-stream ids for named rng streams derived from the master seed.
STREAM_TRAIN_DATA = 0
STREAM_TEST_DATA = 1
STREAM_TRAINING = 2
STREAM_EVAL = 3

PRESETS = ("paradox", "mismatch", "histograms", "compare", "stages", "recall")


@dataclass
class ExperimentConfig:
    scene: synth.SceneConfig = field(default_factory=synth.SceneConfig)
    train_scenes: int = 2000
    test_scenes: int = 500
    variant: str = "cascade"          # single | iterative | integral | cascade
    thresholds: tuple[float, ...] = cascade.DEFAULT_THRESHOLDS
    weighting: str = "decay"
    schedule: str = "joint"
    shared_backbone: bool = True
    iterations: int = 6000
    lr: float = 0.05
    batch_size: int = 64
    pos_fraction: float = 0.25
    hidden: int = 32
    stats_mode: str = "fixed"
    iterative_steps: int = 3
    test_stage: str = "ensemble"
    nms_thresh: float = 0.5
    max_dets: int = 100
    ar_ks: tuple[int, ...] = (100,)

    def __post_init__(self) -> None:
        if self.variant not in ("single", "iterative", "integral", "cascade"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.train_scenes < 1 or self.test_scenes < 1:
            raise ValueError("scene counts must be positive")

    def digest(self) -> str:
        d = dataclasses.asdict(self)
        d["scene"] = storage.scene_config_to_dict(self.scene)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return storage.config_digest(d)


_DATASET_KEYS = {
    "canvas_w": float, "canvas_h": float, "objects_min": int,
    "objects_max": int, "num_classes": int, "size_min": float,
    "size_max": float, "proposals_per_gt": int, "background_proposals": int,
    "jitter_scale": float, "feature_noise": float,
    "train_scenes": int, "test_scenes": int,
}
_TRAIN_KEYS = {
    "variant": str, "thresholds": str, "weighting": str, "schedule": str,
    "shared_backbone": bool, "iterations": int, "lr": float,
    "batch_size": int, "pos_fraction": float, "hidden": int,
    "stats_mode": str, "iterative_steps": int,
}
_EVAL_KEYS = {
    "test_stage": str, "nms_thresh": float, "max_dets": int, "ar_ks": str,
}


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Parse an INI config; unknown sections or keys are rejected."""
    cfg = ExperimentConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ValueError(f"cannot read config file {path}")

    unknown = set(parser.sections()) - {"dataset", "train", "eval"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")

    scene_kwargs = dataclasses.asdict(cfg.scene)
    for section, keys in (("dataset", _DATASET_KEYS), ("train", _TRAIN_KEYS),
                          ("eval", _EVAL_KEYS)):
        if not parser.has_section(section):
            continue
        bad = set(parser[section]) - set(keys)
        if bad:
            raise ValueError(f"unknown keys in [{section}]: {sorted(bad)}")
        for key, conv in keys.items():
            if key not in parser[section]:
                continue
            raw = parser[section][key]
            val = parser[section].getboolean(key) if conv is bool else conv(raw)
            if section == "dataset" and key not in ("train_scenes", "test_scenes"):
                scene_kwargs[key] = val
            else:
                setattr(cfg, key, val)

    scene_kwargs["objects_per_scene"] = (
        scene_kwargs.pop("objects_min", cfg.scene.objects_per_scene[0]),
        scene_kwargs.pop("objects_max", cfg.scene.objects_per_scene[1]))
    scene_kwargs["size_range"] = (
        scene_kwargs.pop("size_min", cfg.scene.size_range[0]),
        scene_kwargs.pop("size_max", cfg.scene.size_range[1]))
    cfg.scene = synth.SceneConfig(**scene_kwargs)
    if isinstance(cfg.thresholds, str):
        cfg.thresholds = tuple(float(x) for x in cfg.thresholds.split(","))
    if isinstance(cfg.ar_ks, str):
        cfg.ar_ks = tuple(int(x) for x in cfg.ar_ks.split(","))
    cfg.__post_init__()
    return cfg


# ------------------------------------------------------------- primitives

def gen_scenes(cfg: ExperimentConfig, seed: int, stream: int,
               count: int) -> list[synth.Scene]:
    return [synth.gen_scene(cfg.scene, np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(stream, i))))
        for i in range(count)]


def training_rng(seed: int, offset: int = 0) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(STREAM_TRAINING, offset)))


def eval_rng(seed: int, scene_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(STREAM_EVAL, scene_index)))


def cascade_config(cfg: ExperimentConfig, thresholds=None,
                   scenes=None) -> cascade.CascadeConfig:
    return cascade.make_cascade_config(
        thresholds=thresholds or cfg.thresholds, stats_mode=cfg.stats_mode,
        scenes=scenes, weighting=cfg.weighting, schedule=cfg.schedule,
        shared_backbone=cfg.shared_backbone, iterations=cfg.iterations,
        lr=cfg.lr, batch_size=cfg.batch_size, pos_fraction=cfg.pos_fraction,
        hidden=cfg.hidden or None)


def train_variant(cfg: ExperimentConfig, scenes: list[synth.Scene],
                  seed: int, variant: str | None = None, thresholds=None,
                  rng_offset: int = 0):
    """Train one model of the requested variant; returns (model, history)."""
    variant = variant or cfg.variant
    rng = training_rng(seed, rng_offset)
    if variant in ("single", "iterative"):
        u = (thresholds or cfg.thresholds)[0]
        model, hist = baselines.train_single(
            scenes, cfg.scene, u, rng, weighting=cfg.weighting,
            schedule=cfg.schedule, shared_backbone=cfg.shared_backbone,
            iterations=cfg.iterations, lr=cfg.lr, batch_size=cfg.batch_size,
            pos_fraction=cfg.pos_fraction, hidden=cfg.hidden or None)
        model.variant = variant
        return model, hist
    if variant == "integral":
        ccfg = cascade_config(cfg, thresholds=(0.5,), scenes=scenes)
        return baselines.train_integral_loss(
            scenes, cfg.scene, thresholds or cfg.thresholds, ccfg, rng)
    ccfg = cascade_config(cfg, thresholds=thresholds, scenes=scenes)
    return cascade.train_cascade(scenes, cfg.scene, ccfg, rng)


def evaluate_model(model, cfg: ExperimentConfig, scenes: list[synth.Scene],
                   seed: int, test_stage: str | int | None = None,
                   ) -> evaluation.APReport:
    """Run inference on every scene and compute the COCO-style report."""
    dets = []
    for i, scene in enumerate(scenes):
        rng = eval_rng(seed, i)
        if isinstance(model, baselines.IntegralLossModel):
            d = baselines.integral_infer(model, scene, cfg.scene, rng,
                                         cfg.nms_thresh, cfg.max_dets)
        elif getattr(model, "variant", "") == "iterative":
            d = baselines.iterative_bbox_infer(model, scene, cfg.scene, rng,
                                               cfg.iterative_steps,
                                               cfg.nms_thresh, cfg.max_dets)
        else:
            spec = test_stage if test_stage is not None else cfg.test_stage
            if isinstance(spec, str) and spec.isdigit():
                spec = int(spec)
            if model.num_stages == 1:
                spec = 1
            d = cascade.infer(model, scene, cfg.scene, rng, spec,
                              cfg.nms_thresh, cfg.max_dets)
        dets.append(d)
    gts = [(s.gt_classes, s.gt_boxes) for s in scenes]
    report = evaluation.coco_map(dets, gts, size_range=cfg.scene.size_range)
    for k in cfg.ar_ks:
        report.ar_at_k[k] = evaluation.average_recall(
            [s.prop_boxes for s in scenes], gts, k)
    return report


# ------------------------------------------------------------- subcommands

def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    scenes = gen_scenes(cfg, args.seed, STREAM_TRAIN_DATA, cfg.train_scenes)
    storage.write_dataset(args.out, scenes, cfg.scene, args.seed)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    scenes, scene_cfg, _ = storage.read_dataset(args.dataset)
    cfg.scene = scene_cfg
    model, history = train_variant(cfg, scenes, args.seed)
    for row in history:
        for key, val in row.items():
            if key.startswith("loss") and not np.isfinite(val):
                raise SystemExit(f"NaN loss in training log ({key}); aborted")
    storage.save_model(args.out, model)
    log_path = Path(args.out).with_suffix(".log.csv")
    if history:
        header = list(history[0])
        storage.write_csv(log_path, header,
                          [[r[k] for k in header] for r in history])
    print(f"trained {cfg.variant} model -> {args.out} (log: {log_path})")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    scenes, scene_cfg, _ = storage.read_dataset(args.dataset)
    cfg.scene = scene_cfg
    model = storage.load_model(args.model)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    stage_specs: list[str | int]
    if args.stage_sweep and not isinstance(model, baselines.IntegralLossModel):
        stage_specs = list(range(1, model.num_stages + 1)) + \
            [f"ensemble:{k}" for k in range(2, model.num_stages + 1)]
    else:
        stage_specs = [args.test_stage or cfg.test_stage]

    rows, payload_stages = [], []
    for spec in stage_specs:
        report = evaluate_model(model, cfg, scenes, args.seed, spec)
        rows.append([str(spec)] + storage.report_csv_row(report))
        payload_stages.append({"test_stage": str(spec),
                               **storage.report_to_dict(report)})
    payload = {"config_digest": cfg.digest(), "seed": args.seed,
               "variant": getattr(model, "variant", "cascade"),
               "per_stage": payload_stages,
               "ap": payload_stages[-1]["ap_per_threshold"],
               "mean_ap": payload_stages[-1]["mean_ap"],
               "ar": payload_stages[-1]["ar_at_k"]}
    storage.write_metrics(outdir / "metrics.json", payload)
    storage.write_csv(outdir / "metrics.csv",
                      ["test_stage", *storage.CSV_COLUMNS], rows)
    print(f"mean AP = {payload['mean_ap']:.4f} -> {outdir}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    head = path.open(encoding="utf-8").readline()
    doc = json.loads(head)
    if "scene_config" in doc:
        scenes, cfg, seed = storage.read_dataset(path)
        n_props = sum(len(s.prop_boxes) for s in scenes)
        print(f"dataset: {len(scenes)} scenes, {n_props} proposals, "
              f"seed {seed}, D={cfg.feature_dim}")
    elif "stages" in doc:
        model = storage.load_model(path)
        if isinstance(model, baselines.IntegralLossModel):
            print(f"model: integral, thresholds {model.thresholds}")
        else:
            print(f"model: {model.variant}, stages "
                  f"{[s.u for s in model.stages]}")
    else:
        print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------- presets

def _summary(outdir: Path, preset: str, seed: int, digest: str,
             assertions: dict[str, bool], extra: dict | None = None) -> int:
    payload = {"preset": preset, "seed": seed, "config_digest": digest,
               "assertions": assertions, **(extra or {})}
    storage.write_metrics(outdir / "summary.json", payload)
    ok = all(assertions.values())
    for name, passed in assertions.items():
        print(f"  [{'PASS' if passed else 'FAIL'}] {name}")
    return 0 if ok else 1


def _train_eval_single(cfg, train, test, seed, u, offset):
    model, _ = train_variant(cfg, train, seed, "single", thresholds=(u,),
                             rng_offset=offset)
    return model, evaluate_model(model, cfg, test, seed)


def preset_paradox(cfg, train, test, seed, outdir: Path) -> int:
    """Single-stage detectors at u in {0.5, 0.6, 0.7}: raising the training
    threshold should lower overall AP on ordinary proposals."""
    rows, reports = [], {}
    for i, u in enumerate((0.5, 0.6, 0.7)):
        _, report = _train_eval_single(cfg, train, test, seed, u, i)
        reports[u] = report
        rows.append([f"u={u}"] + storage.report_csv_row(report))
    storage.write_csv(outdir / "paradox.csv",
                      ["detector", *storage.CSV_COLUMNS], rows)
    assertions = {"ap_u05_above_u07":
                  reports[0.5].mean_ap > reports[0.7].mean_ap}
    return _summary(outdir, "paradox", seed, cfg.digest(), assertions)


def preset_mismatch(cfg, train, test, seed, outdir: Path) -> int:
    """Same detectors evaluated with ground-truth boxes injected into the
    proposal pool: the high-threshold detector should win at high IoU."""
    injected = []
    for i, s in enumerate(test):
        rng = np.random.default_rng(
            np.random.SeedSequence(seed, spawn_key=(STREAM_EVAL, 10_000 + i)))
        gt_feats = synth.encode_features(s.gt_boxes, s.gt_classes, s.gt_boxes,
                                         cfg.scene, rng)
        injected.append(synth.Scene(
            s.gt_classes, s.gt_boxes,
            np.concatenate([s.gt_boxes, s.prop_boxes]),
            np.concatenate([gt_feats, s.prop_feats])))
    rows, reports = [], {}
    for i, u in enumerate((0.5, 0.6, 0.7)):
        model, _ = train_variant(cfg, train, seed, "single", thresholds=(u,),
                                 rng_offset=i)
        report = evaluate_model(model, cfg, injected, seed)
        reports[u] = report
        rows.append([f"u={u}"] + storage.report_csv_row(report))
    storage.write_csv(outdir / "mismatch.csv",
                      ["detector", *storage.CSV_COLUMNS], rows)
    assertions = {
        "u07_best_ap80_with_gt": reports[0.7].ap80 ==
            max(r.ap80 for r in reports.values()),
        "u07_best_ap90_with_gt": reports[0.7].ap90 ==
            max(r.ap90 for r in reports.values()),
    }
    return _summary(outdir, "mismatch", seed, cfg.digest(), assertions)


def preset_histograms(cfg, train, test, seed, outdir: Path) -> int:
    """Max-IoU histograms (bin width 0.05) of the boxes entering each
    cascade stage, before and after its regressor."""
    model, _ = train_variant(cfg, train, seed, "cascade")
    bins = np.arange(0.0, 1.0001, 0.05)
    counts = [np.zeros(len(bins) - 1, dtype=np.int64)
              for _ in range(model.num_stages + 1)]
    for i, scene in enumerate(test):
        _, _, snaps = cascade.propagate_boxes(model, scene, cfg.scene,
                                              eval_rng(seed, i))
        for level, boxes in enumerate(snaps):
            if len(boxes) and len(scene.gt_boxes):
                best = evaluation.geom.iou_matrix(boxes, scene.gt_boxes).max(axis=1)
                counts[level] += np.histogram(best, bins=bins)[0]
    rows = []
    for b in range(len(bins) - 1):
        rows.append([f"{bins[b]:.2f}"] + [int(c[b]) for c in counts])
    storage.write_csv(outdir / "histograms.csv",
                      ["iou_bin_lo", "input",
                       *[f"stage{t + 1}_out" for t in range(model.num_stages)]],
                      rows)
    # resampling should tilt the distribution toward high quality
    assertions = {}
    for t, u_next in enumerate(u.u for u in model.stages[1:]):
        lo = np.searchsorted(bins, u_next) - 1
        frac_in = counts[t][lo:].sum() / max(counts[t].sum(), 1)
        frac_out = counts[t + 1][lo:].sum() / max(counts[t + 1].sum(), 1)
        assertions[f"stage{t + 1}_shift_at_{u_next}"] = frac_out > frac_in
    return _summary(outdir, "histograms", seed, cfg.digest(), assertions)


def preset_compare(cfg, train, test, seed, outdir: Path) -> int:
    """Table of single-stage, iterative BBox, integral loss, cascade."""
    single, _ = train_variant(cfg, train, seed, "single", thresholds=(0.5,),
                              rng_offset=0)
    integral, _ = train_variant(cfg, train, seed, "integral", rng_offset=1)
    casc, _ = train_variant(cfg, train, seed, "cascade", rng_offset=2)

    reports = {"baseline": evaluate_model(single, cfg, test, seed)}
    single.variant = "iterative"
    reports["iterative"] = evaluate_model(single, cfg, test, seed)
    single.variant = "single"
    reports["integral"] = evaluate_model(integral, cfg, test, seed)
    reports["cascade"] = evaluate_model(casc, cfg, test, seed)

    rows = [[name] + storage.report_csv_row(r) for name, r in reports.items()]
    storage.write_csv(outdir / "compare.csv",
                      ["method", *storage.CSV_COLUMNS], rows)
    r = reports
    assertions = {
        "cascade_above_iterative": r["cascade"].mean_ap > r["iterative"].mean_ap,
        "iterative_above_integral": r["iterative"].mean_ap > r["integral"].mean_ap,
        "integral_above_baseline": r["integral"].mean_ap > r["baseline"].mean_ap,
        "high_iou_margin_dominates":
            (r["cascade"].ap90 - r["baseline"].ap90) >
            (r["cascade"].ap50 - r["baseline"].ap50),
    }
    extra = {"mean_ap": {k: v.mean_ap for k, v in reports.items()}}
    return _summary(outdir, "compare", seed, cfg.digest(), assertions, extra)


def preset_stages(cfg, train, test, seed, outdir: Path) -> int:
    """Effect of the number of cascade stages."""
    all_thresholds = (0.5, 0.6, 0.7, 0.75)
    rows, reports = [], {}
    for i, t in enumerate((1, 2, 3)):
        model, _ = train_variant(cfg, train, seed, "cascade",
                                 thresholds=all_thresholds[:t], rng_offset=i)
        report = evaluate_model(model, cfg, test, seed)
        reports[t] = report
        rows.append([t] + storage.report_csv_row(report))
    storage.write_csv(outdir / "stages.csv",
                      ["num_stages", *storage.CSV_COLUMNS], rows)
    assertions = {"two_stages_beat_one":
                  reports[2].mean_ap > reports[1].mean_ap}
    extra = {"t3_minus_t2": reports[3].mean_ap - reports[2].mean_ap}
    return _summary(outdir, "stages", seed, cfg.digest(), assertions, extra)


def preset_recall(cfg, train, test, seed, outdir: Path) -> int:
    """Average recall of resampled boxes vs the input proposals."""
    model, _ = train_variant(cfg, train, seed, "cascade")
    per_level = [[] for _ in range(model.num_stages + 1)]
    for i, scene in enumerate(test):
        _, _, snaps = cascade.propagate_boxes(model, scene, cfg.scene,
                                              eval_rng(seed, i))
        for level, boxes in enumerate(snaps):
            per_level[level].append(boxes)
    gts = [(s.gt_classes, s.gt_boxes) for s in test]
    rows = []
    ar = []
    for level, props in enumerate(per_level):
        name = "input" if level == 0 else f"stage{level}"
        vals = [evaluation.average_recall(props, gts, k) for k in cfg.ar_ks]
        ar.append(vals[0])
        rows.append([name] + vals)
    storage.write_csv(outdir / "recall.csv",
                      ["boxes", *[f"AR@{k}" for k in cfg.ar_ks]], rows)
    assertions = {"stage1_ar_gain_5pts": ar[1] >= ar[0] + 0.05}
    return _summary(outdir, "recall", seed, cfg.digest(), assertions)


def cmd_experiment(args) -> int:
    cfg = load_config(args.config)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    train = gen_scenes(cfg, args.seed, STREAM_TRAIN_DATA, cfg.train_scenes)
    test = gen_scenes(cfg, args.seed, STREAM_TEST_DATA, cfg.test_scenes)
    runner = {"paradox": preset_paradox, "mismatch": preset_mismatch,
              "histograms": preset_histograms, "compare": preset_compare,
              "stages": preset_stages, "recall": preset_recall}[args.preset]
    return runner(cfg, train, test, args.seed, outdir)


# ------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cascadet",
                                description="cascaded detection-head benchmark")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", default=None, help="INI config path")
        sp.add_argument("--seed", type=int, default=0, help="master seed")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--threads", type=int, default=1,
                        help="worker hint; outputs are identical regardless")

    sp = sub.add_parser("gen", help="generate a dataset")
    common(sp, "output dataset (.jsonl)")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train a model on a dataset")
    common(sp, "output model (.json)")
    sp.add_argument("--dataset", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a model")
    common(sp, "output directory")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--test-stage", dest="test_stage", default=None)
    sp.add_argument("--stage-sweep", action="store_true",
                    help="emit one row per stage and ensemble")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("experiment", help="run a named preset")
    common(sp, "output directory")
    sp.add_argument("--preset", required=True, choices=PRESETS)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("inspect", help="summarize a dataset/model/metrics file")
    sp.add_argument("path")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
