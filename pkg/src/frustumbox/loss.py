"""Training objective: rotated-3D distance-IoU plus direction cross-entropy.

The box term is computed per object on autodiff scalars through the same
polygon-clipping arithmetic the analytic geometry uses. Which vertices
survive the clip is decided on plain float values, so within one backward
pass the clip structure is a fixed piecewise region and the gradient is the
exact derivative of the surviving expression.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import (
    DEGENERATE_AREA,
    box_corners,
    bev_corners,
    clip_polygon,
    direction_label,
    polygon_area,
)
from .tensor import Tensor

DEFAULT_LAMBDA_BOX = 5.0

# The raw extent channel carries a smoothly bounded log extent:
# extent = exp(CAP * tanh(raw / CAP)). Near zero this is exp(raw); the bound
# (extents in [e^-2, e^2] meters, a car-scale bound) removes the degenerate optimum where an
# unbounded box inflates the penalty's enclosing-diagonal denominator.
LOG_EXTENT_CAP = 2.0


class InvalidBox(Exception):
    """Predicted box decoded to non-positive or non-finite extents."""


def squash_log_extent(raw):
    """Bounded log extent of a raw channel value (numpy or float)."""
    return LOG_EXTENT_CAP * np.tanh(np.asarray(raw, dtype=np.float64) / LOG_EXTENT_CAP)


def extent_to_raw(extent):
    """Inverse of the bounded decode: the raw value whose decode is `extent`.

    Defined for extents strictly inside (e^-CAP, e^CAP).
    """
    log = math.log(extent)
    if not -LOG_EXTENT_CAP < log < LOG_EXTENT_CAP:
        raise ValueError(f"extent {extent} outside the representable range")
    return LOG_EXTENT_CAP * math.atanh(log / LOG_EXTENT_CAP)


@dataclass
class LossBreakdown:
    box_loss: Tensor
    dir_loss: Tensor
    total: Tensor
    per_object_iou: list


def _decode_extent(raw_scalar):
    return T.exp(T.tanh(raw_scalar * (1.0 / LOG_EXTENT_CAP)) * LOG_EXTENT_CAP)


def _decoded_scalars(pred_raw, index):
    """Slice one object's raw prediction into named autodiff scalars."""
    cx = pred_raw[index, 0]
    cy = pred_raw[index, 1]
    cz = pred_raw[index, 2]
    w = _decode_extent(pred_raw[index, 3])
    l = _decode_extent(pred_raw[index, 4])
    h = _decode_extent(pred_raw[index, 5])
    yaw = pred_raw[index, 6]
    for dim in (w, l, h):
        v = dim.item()
        if not (math.isfinite(v) and v > 0):
            raise InvalidBox(f"object {index}: decoded extent {v!r}")
    return cx, cy, cz, w, l, h, yaw


def _bev_rect(cx, cy, half_w, half_l, c, s):
    """Footprint corners, counter-clockwise from (+w/2, +l/2), symbolic."""
    out = []
    for sx, sy in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        lx = half_w * sx
        ly = half_l * sy
        out.append((cx + lx * c - ly * s, cy + lx * s + ly * c))
    return out


def _iou3d_symbolic(cx, cy, cz, hw, hl, hh, c, s, gt):
    """Differentiable 3D IoU of the symbolic box against a fixed Box3D."""
    pred_rect = _bev_rect(cx, cy, hw, hl, c, s)
    gt_rect = [(float(x), float(y)) for x, y in bev_corners(gt)]
    inter = clip_polygon(pred_rect, gt_rect)
    if len(inter) < 3:
        return Tensor(0.0)
    area = polygon_area(inter)
    if area.item() < DEGENERATE_AREA:
        return Tensor(0.0)
    z_top = T.minimum(cz + hh, gt.cz + gt.height / 2)
    z_bot = T.maximum(cz - hh, gt.cz - gt.height / 2)
    dz = T.relu(z_top - z_bot)
    inter_vol = area * dz
    vol_pred = (hw * hl * hh) * 8.0
    return inter_vol / (vol_pred + gt.volume - inter_vol)


def _penalty_symbolic(cx, cy, cz, hw, hl, hh, c, s, gt):
    """Differentiable center-distance penalty against the joint corner hull."""
    rho2 = (cx - gt.cx) ** 2 + (cy - gt.cy) ** 2 + (cz - gt.cz) ** 2
    rect = _bev_rect(cx, cy, hw, hl, c, s)
    pred_xyz = [
        (x, y, z) for (x, y) in rect for z in (cz - hh, cz + hh)
    ]
    gt_xyz = [tuple(float(v) for v in row) for row in box_corners(gt)]
    c2 = None
    for axis in range(3):
        gt_vals = [p[axis] for p in gt_xyz]
        hi = functools.reduce(T.maximum, (p[axis] for p in pred_xyz), Tensor(max(gt_vals)))
        lo = functools.reduce(T.minimum, (p[axis] for p in pred_xyz), Tensor(min(gt_vals)))
        ext2 = (hi - lo) ** 2
        c2 = ext2 if c2 is None else c2 + ext2
    return rho2 / c2


def diou_loss(pred_raw, gt_boxes):
    """Mean over the batch of 1 - IoU + center penalty, direction-invariant.

    pred_raw: (B, 7) tensor of raw head outputs. gt_boxes: one Box3D per
    object in the same (frustum) frame. The IoU is evaluated at the
    regressed yaw and at yaw + pi and the larger value is used, so a heading
    flip cannot be penalized by the box term. Returns (scalar loss,
    per-object IoU floats for logging).
    """
    pred_raw = T.as_tensor(pred_raw)
    n = len(gt_boxes)
    if pred_raw.shape != (n, 7):
        raise T.ShapeMismatch(f"predictions {pred_raw.shape} vs {n} ground-truth boxes")
    total = None
    ious = []
    for i, gt in enumerate(gt_boxes):
        cx, cy, cz, w, l, h, yaw = _decoded_scalars(pred_raw, i)
        hw, hl, hh = w * 0.5, l * 0.5, h * 0.5
        c, s = T.cos(yaw), T.sin(yaw)
        iou_a = _iou3d_symbolic(cx, cy, cz, hw, hl, hh, c, s, gt)
        # yaw + pi negates the heading axes exactly
        iou_b = _iou3d_symbolic(cx, cy, cz, hw, hl, hh, -c, -s, gt)
        iou = T.maximum(iou_a, iou_b)
        pen = _penalty_symbolic(cx, cy, cz, hw, hl, hh, c, s, gt)
        term = 1.0 - iou + pen
        total = term if total is None else total + term
        ious.append(iou.item())
    return total * (1.0 / n), ious


def direction_loss(logits, gt_yaws):
    """Mean cross-entropy of the front/back logits against heading labels."""
    labels = np.array([direction_label(float(y)) for y in np.asarray(gt_yaws).reshape(-1)])
    return T.cross_entropy(logits, labels)


def total_loss(pred_raw, logits, gt_boxes, lambda_box=DEFAULT_LAMBDA_BOX):
    """Combine both terms: total = lambda_box * box + direction."""
    box, ious = diou_loss(pred_raw, gt_boxes)
    direction = direction_loss(logits, [b.yaw for b in gt_boxes])
    total = box * lambda_box + direction
    return LossBreakdown(box_loss=box, dir_loss=direction, total=total, per_object_iou=ious)
