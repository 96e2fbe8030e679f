"""Batched prediction and the quantized export path.

The annotator's output boxes live in KITTI label files at two-decimal
precision. Any metric that must agree with a file-based evaluation therefore
goes through :func:`quantize_prediction`, which is exactly the
serialize-then-parse path, so in-memory numbers and on-disk numbers can
never drift apart.

Batch composition matters when the cross-object encoder is on, so inference
batching is pinned: samples are processed in their given order in chunks of
``batch_size`` with the final partial chunk kept.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kitti import label_from_lidar_box, lidar_box_from_label, parse_kitti_label, serialize_kitti_label
from .model import decode_prediction, direction_score


@dataclass
class Prediction:
    sample: object
    raw: np.ndarray  # (7,)
    logits: np.ndarray  # (2,)
    box: object  # Box3D in the original sensor frame
    score: float


def predict_samples(model, samples, batch_size):
    """Forward every sample once; deterministic chunking in list order."""
    out = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        points = np.stack([s.points for s in chunk])
        fwd = model.forward(points)
        raws = fwd.boxes.data
        logits = fwd.direction_logits.data
        for s, raw, logit in zip(chunk, raws, logits):
            box = decode_prediction(raw, logit, centroid=s.centroid)
            out.append(
                Prediction(sample=s, raw=raw.copy(), logits=logit.copy(), box=box,
                           score=direction_score(logit))
            )
    return out


# Smallest extent the two-decimal label format can represent.
_MIN_EXPORT_EXTENT = 0.01


def prediction_record(pred, cls=None):
    """The label record a prediction exports as (pre-quantization).

    Extents are floored at the smallest value the label format can carry so
    a degenerate prediction still round-trips as a valid (if tiny) box.
    """
    s = pred.sample
    box = pred.box
    if min(box.width, box.length, box.height) < _MIN_EXPORT_EXTENT:
        from .geometry import Box3D

        box = Box3D(
            box.cx, box.cy, box.cz,
            max(box.width, _MIN_EXPORT_EXTENT),
            max(box.length, _MIN_EXPORT_EXTENT),
            max(box.height, _MIN_EXPORT_EXTENT),
            box.yaw,
        )
    return label_from_lidar_box(cls or s.cls, box, s.box2d, s.calib, score=pred.score)


def quantize_prediction(pred, cls=None):
    """Round-trip a prediction through its label line.

    Returns (sensor-frame box, record) exactly as a reader of the exported
    file would see them.
    """
    record = prediction_record(pred, cls=cls)
    (parsed,) = parse_kitti_label(serialize_kitti_label([record]))
    return lidar_box_from_label(parsed, pred.sample.calib), parsed


def object_key(frame_id, box2d):
    """Stable cross-file object identity: the frame plus its 2D box at the
    serialized precision."""
    return (
        f"{frame_id}:{box2d.u_min:.2f},{box2d.v_min:.2f},"
        f"{box2d.u_max:.2f},{box2d.v_max:.2f}"
    )
