"""Command-line entry point.

Subcommands: generate, train, eval, gradcheck, ablate. Every report path
writes the delimited outputs (key = value text plus a CSV table) and a
matplotlib figure next to them. Exit status: 0 success, 1 contract or
acceptance failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import plots
from .config import RunConfig, load_config, save_config
from .evalmetrics import (
    AP_THRESHOLDS,
    average_precision,
    match_detections,
    range_breakdown,
    write_report,
    write_table,
)
from .gradcheck import GATE, run_suite
from .model import FusionDetector
from .simulator import generate_scene, read_dataset, write_dataset
from .train import (
    TrainingDiverged,
    evaluate_detector,
    load_checkpoint,
    save_checkpoint,
    scene_gt_entries,
    train,
)

VAL_SEED_BASE = 1_000_000  # keeps validation scene seeds disjoint from training


def _ensure_out(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "figures"), exist_ok=True)
    return out_dir


def _load_run_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def cmd_generate(args) -> int:
    cfg = _load_run_config(args)
    out = _ensure_out(args.out)
    scene_cfg = cfg.scene_config()
    train_scenes = [
        generate_scene(scene_cfg, i) for i in range(cfg.train_scenes)
    ]
    val_scenes = [
        generate_scene(scene_cfg, VAL_SEED_BASE + i) for i in range(cfg.eval_scenes)
    ]
    write_dataset(os.path.join(out, "train.ndjson"), train_scenes)
    write_dataset(os.path.join(out, "val.ndjson"), val_scenes)
    save_config(cfg, os.path.join(out, "config.txt"))

    counts = [len(s.ground_truth) for s in train_scenes + val_scenes]
    hit_objects = sum(len(s.objects_with_radar_hits())
                      for s in train_scenes + val_scenes)
    items = [
        ("train_scenes", len(train_scenes)),
        ("val_scenes", len(val_scenes)),
        ("objects_total", int(np.sum(counts))),
        ("objects_mean", float(np.mean(counts))),
        ("objects_with_radar_hits", hit_objects),
        ("radar_hit_fraction", hit_objects / max(int(np.sum(counts)), 1)),
    ]
    write_report(os.path.join(out, "dataset_summary.txt"), items)
    _plot_scene_overview(os.path.join(out, "figures", "sample_scene.png"),
                         train_scenes[0] if train_scenes else val_scenes[0])
    print(f"wrote {len(train_scenes)} train / {len(val_scenes)} val scenes to {out}")
    return 0


def _plot_scene_overview(path, scene):
    import matplotlib.pyplot as plt

    from .radar import accumulate, filter_points

    fig, ax = plt.subplots(figsize=(5, 5))
    pts = filter_points(accumulate(scene.radar))
    if pts:
        xy = np.array([p.position[:2] for p in pts])
        clutter = np.array([p.source_index < 0 for p in pts])
        ax.scatter(xy[~clutter, 0], xy[~clutter, 1], s=12, c="tab:blue",
                   label="radar hits")
        ax.scatter(xy[clutter, 0], xy[clutter, 1], s=12, c="tab:gray",
                   marker="x", label="clutter")
    for b in scene.ground_truth:
        color = "tab:green" if b.cls == 0 else "tab:orange"
        ax.plot(b.center[0], b.center[1], "s", ms=7, mfc="none", mec=color)
        ax.arrow(b.center[0], b.center[1], b.velocity[0] * 0.4,
                 b.velocity[1] * 0.4, head_width=0.4, color=color, alpha=0.6)
    ax.plot(0, 0, "k^", ms=9, label="ego")
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_title("sample scene (BEV)")
    ax.legend(fontsize=7, loc="upper right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=plots.DPI)
    plt.close(fig)


def _dataset_paths(dataset):
    train_path = os.path.join(dataset, "train.ndjson")
    val_path = os.path.join(dataset, "val.ndjson")
    for p in (train_path, val_path):
        if not os.path.exists(p):
            raise FileNotFoundError(p)
    return train_path, val_path


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = _ensure_out(args.out)
    train_path, val_path = _dataset_paths(args.dataset)
    train_data = read_dataset(train_path)
    val_data = read_dataset(val_path)

    rows = []
    if args.resume:
        detector, optimizer, cfg, start, rng = load_checkpoint(args.resume)
        detector, optimizer, rng, history = train(
            cfg, train_data, val_data, log=rows.append,
            detector=detector, optimizer=optimizer, rng=rng, start_step=start,
        )
    else:
        detector, optimizer, rng, history = train(
            cfg, train_data, val_data, log=rows.append
        )
    save_checkpoint(os.path.join(out, "checkpoint.json"), detector, optimizer,
                    cfg, cfg.steps, rng)
    save_config(cfg, os.path.join(out, "config.txt"))
    header = ["step", "loss", "classification", "box_l1", "val_map",
              "val_ate", "val_ave"]
    table_rows = [[r.get(k, "") for k in header] for r in rows]
    write_table(os.path.join(out, "train_log.csv"), header, table_rows)
    plots.save_loss_curve(os.path.join(out, "figures", "loss_curve.png"), history)
    print(f"trained {cfg.steps} steps; checkpoint and logs in {out}")
    return 0


def _pr_curve_points(dets, gts, threshold):
    labels, _ = match_detections(dets, gts, threshold)
    if not labels or not gts:
        return np.array([0.0]), np.array([0.0])
    tp = np.cumsum(np.asarray(labels, dtype=np.float64))
    fp = np.cumsum(~np.asarray(labels, dtype=bool))
    return tp / len(gts), tp / (tp + fp)


def cmd_eval(args) -> int:
    out = _ensure_out(args.out)
    detector, _, cfg, _, _ = load_checkpoint(args.checkpoint)
    _, val_path = _dataset_paths(args.dataset)
    scenes = read_dataset(val_path)

    dets, gts = [], []
    for sid, scene in enumerate(scenes):
        dets.extend(detector.detect(scene, scene_id=sid))
        gts.extend(scene_gt_entries(scene, sid))
    from .evalmetrics import evaluate

    report = evaluate(dets, gts)
    report.buckets = range_breakdown(dets, gts)
    write_report(os.path.join(out, "metrics.txt"), report.flat_items())

    rows = []
    for cls in sorted(report.ap):
        for t in sorted(report.ap[cls]):
            v = report.ap[cls][t]
            rows.append(["ap", cls, t, "" if v is None else v])
    rows.append(["map", "", "", report.mean_ap])
    rows.append(["ate", "", "", "" if report.ate is None else report.ate])
    rows.append(["ave", "", "", "" if report.ave is None else report.ave])
    write_table(os.path.join(out, "metrics.csv"),
                ["metric", "class", "threshold", "value"], rows)

    pr_data = {}
    for cls in sorted({g.cls for g in gts}):
        cls_dets = [d for d in dets if d.cls == cls]
        cls_gts = [g for g in gts if g.cls == cls]
        for t in AP_THRESHOLDS:
            recall, precision = _pr_curve_points(cls_dets, cls_gts, t)
            pr_data[f"class {cls} @ {t:g} m"] = (recall, precision)
    plots.save_pr_curves(os.path.join(out, "figures", "pr_curves.png"), pr_data)
    plots.save_range_breakdown(
        os.path.join(out, "figures", "range_metrics.png"), report.buckets
    )
    print(f"mAP {report.mean_ap:.4f}  ATE {report.ate}  AVE {report.ave}")
    return 0


def cmd_gradcheck(args) -> int:
    out = _ensure_out(args.out)
    cfg = _load_run_config(args)
    rows = run_suite(seed=cfg.seed, primitive_seeds=args.primitive_seeds)
    failed = [name for name, err in rows if not (err < GATE)]
    items = [(name, err) for name, err in rows]
    items.append(("gate", GATE))
    items.append(("status", "fail" if failed else "pass"))
    write_report(os.path.join(out, "gradcheck.txt"), items)
    plots.save_gradcheck_chart(os.path.join(out, "figures", "gradcheck.png"), rows)
    for name, err in rows:
        flag = "PASS" if err < GATE else "FAIL"
        print(f"{flag} {name}: max relative error {err:.3e}")
    if failed:
        print(f"gradient check FAILED for: {', '.join(failed)}")
        return 1
    return 0


ABLATION_VARIANTS = (
    "vision_only",
    "fusion",
    "no_velocity",
    "no_mask",
    "stages_1",
    "stages_2",
    "frames_1",
    "frames_3",
    "frames_10",
)


def _variant_config(base: RunConfig, variant: str, seed: int) -> RunConfig:
    cfg = load_config(overrides=base.to_flat_dict())
    cfg.seed = seed
    if variant == "fusion":
        pass
    elif variant == "vision_only":
        cfg.vision_only = True
    elif variant == "no_velocity":
        cfg.use_velocity_channels = False
    elif variant == "no_mask":
        cfg.use_mask = False
    elif variant.startswith("stages_"):
        k = int(variant.split("_")[1])
        cfg.fusion_radii = tuple(list(base.fusion_radii)[:k])
    elif variant.startswith("frames_"):
        cfg.frames = int(variant.split("_")[1])
    else:
        raise ValueError(f"unknown ablation variant {variant!r}")
    return cfg


def run_variant(cfg: RunConfig, train_data=None, val_data=None):
    """Train one variant at the matched budget and evaluate it.

    When the variant changes the data distribution (radar frame count), the
    datasets are regenerated from the same scene seeds.
    """
    if train_data is None or val_data is None:
        scene_cfg = cfg.scene_config()
        train_data = [generate_scene(scene_cfg, i) for i in range(cfg.train_scenes)]
        val_data = [
            generate_scene(scene_cfg, VAL_SEED_BASE + i)
            for i in range(cfg.eval_scenes)
        ]
    detector, _, _, history = train(cfg, train_data, val_data)
    report = evaluate_detector(detector, val_data)
    return detector, report, history


def cmd_ablate(args) -> int:
    base = _load_run_config(args)
    out = _ensure_out(args.out)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise ValueError(f"unknown ablation variant {v!r}")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]

    base_train = base_val = None
    if not any(v.startswith("frames_") for v in variants):
        pass  # every variant regenerates only when it must

    rows = []
    items = []
    for variant in variants:
        per_seed = []
        for seed in seeds:
            cfg = _variant_config(base, variant, seed)
            needs_own_data = variant.startswith("frames_")
            if needs_own_data:
                _, report, _ = run_variant(cfg)
            else:
                if base_train is None:
                    scene_cfg = _variant_config(base, "fusion", seeds[0]).scene_config()
                    base_train = [
                        generate_scene(scene_cfg, i) for i in range(base.train_scenes)
                    ]
                    base_val = [
                        generate_scene(scene_cfg, VAL_SEED_BASE + i)
                        for i in range(base.eval_scenes)
                    ]
                _, report, _ = run_variant(cfg, base_train, base_val)
            per_seed.append(report)
            rows.append(
                {
                    "variant": f"{variant}/s{seed}",
                    "map": report.mean_ap,
                    "ate": report.ate,
                    "ave": report.ave,
                }
            )

        def _mean(values):
            vals = [v for v in values if v is not None]
            return float(np.mean(vals)) if vals else None

        mean_row = {
            "variant": variant,
            "map": _mean([r.mean_ap for r in per_seed]),
            "ate": _mean([r.ate for r in per_seed]),
            "ave": _mean([r.ave for r in per_seed]),
            "ate_radar": _mean([r.ate_radar for r in per_seed]),
            "ave_radar": _mean([r.ave_radar for r in per_seed]),
        }
        for key in ("map", "ate", "ave", "ate_radar", "ave_radar"):
            value = mean_row[key]
            items.append((f"{variant}_{key}",
                          "absent" if value is None else value))
        rows.append(mean_row)

    write_report(os.path.join(out, "ablation.txt"), items)
    header = ["variant", "map", "ate", "ave"]
    table = [
        [r["variant"],
         "" if r["map"] is None else r["map"],
         "" if r["ate"] is None else r["ate"],
         "" if r["ave"] is None else r["ave"]]
        for r in rows
    ]
    write_table(os.path.join(out, "ablation.csv"), header, table)
    mean_rows = [r for r in rows if "/" not in r["variant"]]
    plots.save_ablation_chart(os.path.join(out, "figures", "ablation.png"),
                              mean_rows)
    for r in mean_rows:
        print(f"{r['variant']}: mAP {r['map']:.4f} ATE {r['ate']} AVE {r['ave']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crfusion",
        description="desk-scale camera-radar fusion detection pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=False, checkpoint=False):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--out", required=True, help="output directory")
        if dataset:
            p.add_argument("--dataset", required=True,
                           help="dataset directory (train.ndjson / val.ndjson)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="checkpoint file from train")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train a detector")
    common(p, dataset=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the validation split")
    common(p, dataset=True, checkpoint=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(p)
    p.add_argument("--primitive-seeds", type=int, default=100)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and compare component ablations")
    common(p)
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    p.add_argument("--seeds", default="0",
                   help="comma-separated training seeds to average over")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
