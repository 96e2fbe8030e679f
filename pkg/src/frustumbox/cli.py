"""Command-line entry points wiring the pipeline end to end.

One executable, seven subcommands:

    synth      generate a synthetic dataset in the standard layout
    train      fit the annotator on a dataset split
    annotate   write pseudo-label files for a dataset with a checkpoint
    eval       score a prediction directory against a ground-truth directory
    gradcheck  finite-difference check of the full model's backward pass
    attn       dump one object's ranked attention rows for plotting
    ablate     train and score the architecture-toggle variants

Every command resolves its configuration (file, then key=value overrides,
then --seed) and validates it before touching the filesystem. All
randomness flows from the single seed. Failures exit non-zero with a
machine-parseable ``error category=<cat>:`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, CheckpointMismatch, load_checkpoint
from .config import ConfigError, load_run_config, resolved_text
from .evaluate import (
    EvalError,
    FrameMismatch,
    UnmatchedObject,
    ablation_config,
    evaluate_boxes,
    run_ablation,
)
from .frustums import (
    EmptyCloud,
    build_dataset_samples,
    build_frustum_sample,
    dataset_sampling_rng,
    filter_samples,
)
from .gradcheck import model_gradient_check
from .geometry import Box3D, GeometryError
from .inference import object_key, predict_samples, prediction_record
from .kitti import (
    KittiFormatError,
    lidar_box_from_label,
    load_frame,
    manifest_frames,
    parse_kitti_calib,
    parse_kitti_label,
    serialize_kitti_label,
)
from .loss import InvalidBox
from .model import BoxAnnotator, IndexOutOfRange, InvalidMode, export_attention
from .synthetic import SceneSpec, write_synthetic_dataset
from .train import NonFiniteLoss, TrainConfig, train
from .tensor import TensorError

_ERROR_CATEGORIES = [
    ((ConfigError, InvalidMode, ValueError), "config", 2),
    ((KittiFormatError,), "format", 3),
    ((EvalError, EmptyCloud, UnmatchedObject, FrameMismatch, IndexOutOfRange), "data", 4),
    ((CheckpointError, CheckpointMismatch), "checkpoint", 5),
    ((NonFiniteLoss, InvalidBox, TensorError, GeometryError), "numeric", 6),
    ((OSError,), "io", 7),
]


def _classify(err):
    for types, category, code in _ERROR_CATEGORIES:
        if isinstance(err, types):
            return category, code
    return "internal", 1


def _resolve_config(args):
    overrides = list(getattr(args, "overrides", []) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return load_run_config(getattr(args, "config", None), overrides)


def _log_config(cfg, out_dir=None):
    text = resolved_text(cfg)
    print("resolved configuration:")
    print(text, end="")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "resolved_config.txt").write_text(text)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    cfg = _resolve_config(args)
    out = Path(args.out)
    _log_config(cfg, out)
    if cfg.n_scenes == 0:
        write_synthetic_dataset(out, cfg.scene, 0, np.random.default_rng(cfg.seed),
                                val_every=cfg.val_every)
        print("warning: n_scenes=0, wrote an empty manifest")
        return 0
    splits = write_synthetic_dataset(
        out, cfg.scene, cfg.n_scenes, np.random.default_rng(cfg.seed),
        val_every=cfg.val_every,
    )
    n_val = sum(1 for s in splits.values() if s == "val")
    print(f"wrote {len(splits)} frames ({n_val} val) to {out}")
    return 0


def cmd_train(args):
    cfg = _resolve_config(args)
    model_cfg = cfg.model
    if args.ablation:
        model_cfg = ablation_config(model_cfg, args.ablation)
    out = Path(args.out)
    samples = build_dataset_samples(args.dataset, model_cfg.n_points, cfg.seed,
                                    split=args.split)
    kept, rejections = filter_samples(samples)
    for frame, obj, reason in rejections:
        print(f"filtered out {obj}: {reason}")
    if len(kept) < cfg.train.batch_size:
        raise ValueError(
            f"filtered dataset holds {len(kept)} samples, smaller than one "
            f"batch of {cfg.train.batch_size}"
        )
    _log_config(cfg, out)
    model = BoxAnnotator(model_cfg, rng=np.random.default_rng([cfg.seed, 271]))
    result = train(model, kept, cfg.train, out_dir=out, resume_from=args.resume)
    print(f"final train mIoU {result.final_train_miou:.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    return 0


def _annotatable(records):
    return [(i, r) for i, r in enumerate(records) if r.is_care and r.has_box3d]


def cmd_annotate(args):
    cfg = _resolve_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    model = BoxAnnotator.from_checkpoint(ckpt)
    out = Path(args.out)
    _log_config(cfg, out)
    rng = dataset_sampling_rng(cfg.seed)
    frames = manifest_frames(args.dataset, split=args.split)
    label_dir = out / "label_2"
    label_dir.mkdir(parents=True, exist_ok=True)

    all_samples = []
    frame_rows = {f: [] for f in frames}
    for frame in frames:
        try:
            points, _, calib, records = load_frame(args.dataset, frame)
        except FileNotFoundError as err:
            print(f"skipping frame {frame}: {err}")
            frame_rows.pop(frame)
            continue
        for i, rec in _annotatable(records):
            sample = build_frustum_sample(
                points, rec.box2d, calib,
                lidar_box_from_label(rec, calib),
                frame_id=frame, object_id=f"{frame}:{i}",
                n_points=model.config.n_points, rng=rng, cls=rec.cls,
            )
            if sample is None:
                print(f"skipping object {frame}:{i}: empty frustum")
                continue
            all_samples.append(sample)

    start = time.perf_counter()
    preds = predict_samples(model, all_samples, cfg.train.batch_size)
    elapsed = time.perf_counter() - start
    per_object_ms = 1000.0 * elapsed / max(len(all_samples), 1)
    print(f"annotated {len(all_samples)} objects in {elapsed:.3f}s "
          f"({per_object_ms:.1f} ms per object)")

    for p in preds:
        frame_rows[p.sample.frame_id].append(prediction_record(p))
    for frame, rows in frame_rows.items():
        (label_dir / f"{frame}.txt").write_text(serialize_kitti_label(rows))
    print(f"wrote {len(frame_rows)} label files to {label_dir}")
    return 0


def _label_frames(root):
    label_dir = Path(root) / "label_2"
    if not label_dir.is_dir():
        raise FrameMismatch(f"{root} has no label_2 directory")
    return sorted(p.stem for p in label_dir.glob("*.txt"))


def _boxes_from_labels(root, frame, calib, with_scores):
    text = (Path(root) / "label_2" / f"{frame}.txt").read_text()
    out = {}
    for rec in parse_kitti_label(text):
        if not rec.is_care or not rec.has_box3d:
            continue
        box = lidar_box_from_label(rec, calib)
        key = object_key(frame, rec.box2d)
        out[key] = (box, 1.0 if rec.score is None else rec.score) if with_scores else box
    return out


def cmd_eval(args):
    pred_frames = _label_frames(args.pred)
    gt_frames = _label_frames(args.gt)
    if pred_frames != gt_frames:
        missing = sorted(set(gt_frames) ^ set(pred_frames))
        raise FrameMismatch(f"frame ids disagree; unmatched: {missing}")
    preds = {}
    gts = {}
    for frame in gt_frames:
        calib = parse_kitti_calib(
            (Path(args.gt) / "calib" / f"{frame}.txt").read_text()
        )
        preds.update(_boxes_from_labels(args.pred, frame, calib, with_scores=True))
        gts.update(_boxes_from_labels(args.gt, frame, calib, with_scores=False))
    report = evaluate_boxes(preds, gts)
    print(report.format_row())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
        out.with_suffix(".txt").write_text(report.format_row() + "\n")
        print(f"report: {out}")
    return 0


def cmd_gradcheck(args):
    cfg = _resolve_config(args)
    model = BoxAnnotator(cfg.model, rng=np.random.default_rng([cfg.seed, 271]))
    rng = np.random.default_rng([cfg.seed, 997])
    b = args.batch
    points = rng.normal(size=(b, cfg.model.n_points, 3))
    gts = [
        Box3D(*rng.uniform(-0.5, 0.5, 3), rng.uniform(1.5, 1.9),
              rng.uniform(3.2, 4.8), rng.uniform(1.3, 1.8),
              rng.uniform(-np.pi, np.pi))
        for _ in range(b)
    ]
    report = model_gradient_check(
        model, points, gts, probes=args.probes, step=args.step, seed=cfg.seed,
    )
    for line in report.format_lines():
        print(line)
    return 0 if report.passed else 1


def cmd_attn(args):
    cfg = _resolve_config(args)
    model = BoxAnnotator.from_checkpoint(load_checkpoint(args.checkpoint))
    rng = dataset_sampling_rng(cfg.seed)
    points, _, calib, records = load_frame(args.dataset, args.frame)
    samples = []
    for i, rec in _annotatable(records):
        sample = build_frustum_sample(
            points, rec.box2d, calib, lidar_box_from_label(rec, calib),
            frame_id=args.frame, object_id=f"{args.frame}:{i}",
            n_points=model.config.n_points, rng=rng, cls=rec.cls,
        )
        if sample is not None:
            samples.append(sample)
    if not samples:
        raise EmptyCloud(f"frame {args.frame} has no annotatable objects")
    if not 0 <= args.object < len(samples):
        raise IndexOutOfRange(
            f"object {args.object} outside 0..{len(samples) - 1} for frame {args.frame}"
        )
    batch = np.stack([s.points for s in samples])
    out = model.forward(batch, capture_attention=True)
    export = export_attention(
        out.attention, args.object, args.point, top_k=args.top_k, layer=args.layer,
    )
    sample = samples[args.object]
    original = sample.points + sample.centroid

    def row_entry(rank, seq_index, score):
        seq_index = int(seq_index)
        if seq_index < 7:
            return {"rank": rank, "seq_index": seq_index, "kind": "token",
                    "token_index": seq_index, "coordinate": None,
                    "score": float(score)}
        pi = seq_index - 7
        return {"rank": rank, "seq_index": seq_index, "kind": "point",
                "point_index": pi, "coordinate": [float(v) for v in original[pi]],
                "score": float(score)}

    token_rows = []
    for t in range(7):
        row = export.token_rows[t]
        order = np.argsort(-row, kind="stable")[: args.top_k]
        token_rows.append(
            {
                "token_index": t,
                "row_sum": float(row.sum()),
                "top": [row_entry(r, idx, row[idx]) for r, idx in enumerate(order)],
            }
        )
    payload = {
        "frame": args.frame,
        "object_index": args.object,
        "object_id": sample.object_id,
        "reference_point_index": args.point,
        "layer": args.layer,
        "top_k": args.top_k,
        "reference_row_sum": float(export.full_row.sum()),
        "rows": [row_entry(r, idx, score)
                 for r, (idx, score) in enumerate(zip(export.indices, export.scores))],
        "box_token_rows": token_rows,
    }
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    print(f"wrote {len(payload['rows'])} ranked rows to {out_path}")
    return 0


def cmd_ablate(args):
    cfg = _resolve_config(args)
    seeds = [int(tok) for tok in args.seeds.split(",") if tok.strip() != ""]
    if not seeds:
        raise ConfigError("ablate needs at least one seed")
    out = Path(args.out)
    _log_config(cfg, out)
    train_samples, _ = filter_samples(
        build_dataset_samples(args.dataset, cfg.model.n_points, cfg.seed,
                              split=args.train_split)
    )
    eval_samples, _ = filter_samples(
        build_dataset_samples(args.dataset, cfg.model.n_points, cfg.seed,
                              split=args.eval_split)
    )
    if len(train_samples) < cfg.train.batch_size:
        raise ValueError("filtered train split smaller than one batch")
    if not eval_samples:
        raise ValueError("eval split is empty after filtering")
    rows = run_ablation(train_samples, eval_samples, cfg.model, cfg.train, seeds,
                        log=print)
    table_lines = [row.format_row() for row in rows]
    print("\n".join(table_lines))
    (out / "ablation.txt").write_text("\n".join(table_lines) + "\n")
    (out / "ablation.json").write_text(
        json.dumps(
            {
                row.name: {
                    "toggles": row.toggles,
                    "mean": row.mean,
                    "spread": row.spread,
                    "per_seed": [r.to_dict() for r in row.reports],
                }
                for row in rows
            },
            sort_keys=True,
            indent=1,
        )
        + "\n"
    )
    print(f"ablation results in {out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="frustumbox",
        description="3D box auto-annotation from 2D boxes and LiDAR frustums",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("overrides", nargs="*", metavar="key=value",
                       help="configuration overrides")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the annotator")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--ablation", choices=["A", "B", "C", "D", "full"])
    p.add_argument("--resume", help="checkpoint to continue from")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("annotate", help="write pseudo-labels with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None)
    common(p)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", help="report file (JSON; .txt twin written too)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference backward check")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--probes", type=int, default=2)
    p.add_argument("--step", type=float, default=1e-4)
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("attn", help="dump ranked attention rows")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--object", type=int, required=True)
    p.add_argument("--point", type=int, required=True)
    p.add_argument("--top-k", type=int, default=500, dest="top_k")
    p.add_argument("--layer", type=int, default=-1)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("ablate", help="train and score the toggle variants")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--train-split", default="train", dest="train_split")
    p.add_argument("--eval-split", default="val", dest="eval_split")
    common(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:  # noqa: BLE001 - single reporting point
        category, code = _classify(err)
        print(f"error category={category}: {err}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
