"""The optimization loop: batching, augmentation, schedule, checkpoints.

Training is a pure function of (samples, config, seed): the shuffle, the
augmentation draws, and the optimizer all run off one seeded generator whose
state is persisted in every checkpoint, so a resumed run continues the exact
stream an uninterrupted run would have produced.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import augment
from .checkpoint import CheckpointMismatch, load_checkpoint
from .evaluate import evaluate_boxes
from .inference import object_key, predict_samples, quantize_prediction
from .loss import total_loss
from .optim import Adam, cosine_lr


class NonFiniteLoss(Exception):
    """A training step produced a non-finite objective."""


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 40
    lr_max: float = 1e-4
    lr_min: float = 0.0
    weight_decay: float = 0.05
    lambda_box: float = 5.0
    seed: int = 0
    augment: bool = True
    shift_range: float = 0.25
    scale_low: float = 0.95
    scale_high: float = 1.05
    flip_prob: float = 0.5
    checkpoint_every: int = 0  # epochs between mid-run checkpoints; 0 = final only

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be a probability")
        if self.scale_low > self.scale_high:
            raise ValueError("scale range is empty")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainResult:
    checkpoint_path: str | None
    metrics_path: str | None
    history: list
    final_train_miou: float


def train_step(model, points, gt_boxes, optimizer, lr, lambda_box=5.0,
               sample_ids=None):
    """One optimization step; gradients are cleared here before use."""
    optimizer.zero_grad()
    out = model.forward(points)
    breakdown = total_loss(out.boxes, out.direction_logits, gt_boxes, lambda_box)
    if not math.isfinite(breakdown.total.item()):
        ids = list(sample_ids) if sample_ids else []
        raise NonFiniteLoss(f"non-finite loss {breakdown.total.item()} on batch {ids}")
    T.backward(breakdown.total)
    optimizer.step(lr)
    return breakdown


def _epoch_batches(n, batch_size, order, drop_last):
    batches = []
    for lo in range(0, n, batch_size):
        idx = order[lo : lo + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        batches.append(idx)
    return batches


def train_set_miou(model, samples, batch_size):
    """Training-set mIoU through the quantized export path.

    Predictions are serialized to label lines and parsed back before
    scoring, so this number is exactly what an external evaluation of the
    exported annotations computes.
    """
    preds = {}
    gts = {}
    for p in predict_samples(model, samples, batch_size):
        box, record = quantize_prediction(p)
        key = object_key(p.sample.frame_id, p.sample.box2d)
        preds[key] = (box, record.score)
        gts[key] = p.sample.gt_box.translated(p.sample.centroid)
    return evaluate_boxes(preds, gts).miou


def _save_train_checkpoint(model, optimizer, config, rng, epoch, step, path,
                           final_train_miou=None):
    extras = {
        "train": config.to_dict(),
        "epoch": int(epoch),
        "step": int(step),
        "rng_state": rng.bit_generator.state,
        "final_train_miou": final_train_miou,
    }
    opt_state = optimizer.state_dict()
    extras["optimizer"] = {
        "step_count": opt_state["step_count"],
        "lr": opt_state["lr"],
        "betas": list(opt_state["betas"]),
        "eps": opt_state["eps"],
        "weight_decay": opt_state["weight_decay"],
    }
    extra_arrays = {}
    for name, arr in opt_state["m"].items():
        extra_arrays[f"opt.m.{name}"] = arr
    for name, arr in opt_state["v"].items():
        extra_arrays[f"opt.v.{name}"] = arr
    model.save(path, extras=extras, extra_arrays=extra_arrays)
    return str(path)


def _restore(model, optimizer, rng, resume_from):
    ckpt = load_checkpoint(resume_from)
    stored_model = ckpt.config.get("model")
    if stored_model != model.config.to_dict():
        raise CheckpointMismatch(
            f"resume model config {stored_model} differs from {model.config.to_dict()}"
        )
    model.load_state(ckpt.params)
    meta = ckpt.extras["optimizer"]
    optimizer.load_state_dict(
        {
            "step_count": meta["step_count"],
            "lr": meta["lr"],
            "betas": tuple(meta["betas"]),
            "eps": meta["eps"],
            "weight_decay": meta["weight_decay"],
            "m": {k[len("opt.m."):]: v for k, v in ckpt.extra_arrays.items()
                  if k.startswith("opt.m.")},
            "v": {k[len("opt.v."):]: v for k, v in ckpt.extra_arrays.items()
                  if k.startswith("opt.v.")},
        }
    )
    rng.bit_generator.state = ckpt.extras["rng_state"]
    return int(ckpt.extras["epoch"]), int(ckpt.extras["step"])


def train(model, samples, config, out_dir=None, resume_from=None, log=None):
    """Run the optimization; returns checkpoint path, metrics, and history.

    Requires every sample to carry ground truth and the dataset to hold at
    least one full batch. When the cross-object encoder is on, the batch
    size must be at least 2 and each epoch's trailing partial batch is
    dropped (peer attention wants a stable group size); otherwise partial
    batches train too.
    """
    n = len(samples)
    if n < config.batch_size:
        raise ValueError(
            f"dataset holds {n} samples, smaller than one batch of {config.batch_size}"
        )
    if model.config.use_global and config.batch_size < 2:
        raise ValueError("batch_size must be >= 2 when the cross-object encoder is on")
    for s in samples:
        if s.gt_box is None:
            raise ValueError(f"sample {s.object_id} has no ground truth")

    drop_last = model.config.use_global
    steps_per_epoch = n // config.batch_size if drop_last else math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    lr_span = max(total_steps - 1, 1)

    optimizer = Adam(
        model.params,
        lr=config.lr_max,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)
    start_epoch, step = 0, 0
    if resume_from is not None:
        start_epoch, step = _restore(model, optimizer, rng, resume_from)

    metrics_path = None
    metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        metrics_fh = open(metrics_path, "w")

    history = []

    def emit(record):
        history.append(record)
        if metrics_fh:
            metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
        if log:
            log(json.dumps(record, sort_keys=True))

    try:
        for epoch in range(start_epoch, config.epochs):
            order = rng.permutation(n)
            for idx in _epoch_batches(n, config.batch_size, order, drop_last):
                batch = [samples[i] for i in idx]
                if config.augment:
                    batch = [
                        augment(
                            s,
                            rng,
                            shift_range=config.shift_range,
                            scale_low=config.scale_low,
                            scale_high=config.scale_high,
                            flip_prob=config.flip_prob,
                        )
                        for s in batch
                    ]
                points = np.stack([s.points for s in batch])
                gts = [s.gt_box for s in batch]
                lr = cosine_lr(min(step, lr_span), lr_span, config.lr_max, config.lr_min)
                breakdown = train_step(
                    model, points, gts, optimizer, lr, config.lambda_box,
                    sample_ids=[s.object_id for s in batch],
                )
                emit(
                    {
                        "step": step,
                        "lr": lr,
                        "box_loss": breakdown.box_loss.item(),
                        "dir_loss": breakdown.dir_loss.item(),
                        "total": breakdown.total.item(),
                        "batch_miou": float(np.mean(breakdown.per_object_iou)),
                    }
                )
                step += 1
            done = epoch + 1
            if (
                out_dir is not None
                and config.checkpoint_every
                and done % config.checkpoint_every == 0
                and done < config.epochs
            ):
                _save_train_checkpoint(
                    model, optimizer, config, rng, done, step,
                    out_dir / f"ckpt_epoch{done:04d}.bin",
                )

        final_miou = train_set_miou(model, samples, config.batch_size)
        emit({"final_train_miou": final_miou, "n_train": n, "total_steps": total_steps})
    finally:
        if metrics_fh:
            metrics_fh.close()

    checkpoint_path = None
    if out_dir is not None:
        checkpoint_path = _save_train_checkpoint(
            model, optimizer, config, rng, config.epochs, step,
            out_dir / "ckpt_final.bin", final_train_miou=final_miou,
        )
    return TrainResult(
        checkpoint_path=checkpoint_path,
        metrics_path=str(metrics_path) if metrics_path else None,
        history=history,
        final_train_miou=final_miou,
    )
