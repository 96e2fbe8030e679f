"""Frustum sample assembly: extract, count, sample, normalize, filter.

A FrustumSample is one object's training unit: its fixed-size sub-cloud in a
centroid-relative frame, the 2D box and calibration it came from, and the
(shifted) ground-truth box when available. Sample construction is a pure
function of the dataset and a seed, so training and annotation see
bit-identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import Box2D, Box3D, ProjectionModel, extract_frustum, points_in_box3d
from .kitti import lidar_box_from_label, load_frame, manifest_frames

# Salt mixed into the seed for dataset sampling so the training loop's
# random stream stays independent of sample construction.
_SAMPLING_SALT = 104729

MIN_TOTAL_POINTS = 30
MIN_FOREGROUND_POINTS = 5


class EmptyCloud(Exception):
    pass


@dataclass(frozen=True)
class FrustumSample:
    points: np.ndarray  # (N, 3), centroid-relative after normalization
    centroid: np.ndarray  # (3,) offset removed from the raw coordinates
    box2d: Box2D
    calib: ProjectionModel
    gt_box: Box3D | None  # same frame as points
    frame_id: str
    object_id: str
    n_raw_points: int
    n_foreground_points: int
    cls: str = "Car"

    def __post_init__(self):
        if not np.isfinite(self.points).all():
            raise ValueError(f"non-finite points in sample {self.object_id}")
        if self.n_raw_points < 0 or self.n_foreground_points < 0:
            raise ValueError("negative point counts")


def sample_to_fixed_size(points, n, rng):
    """Fixed-size resample: without replacement when enough points exist,
    otherwise every point once plus a with-replacement remainder."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = len(pts)
    if m == 0:
        raise EmptyCloud("cannot sample an empty cloud")
    if m >= n:
        idx = rng.choice(m, size=n, replace=False)
    else:
        idx = np.concatenate([np.arange(m), rng.integers(0, m, size=n - m)])
    return pts[idx]


def normalize_frustum(sample):
    """Shift the sample to its point centroid; the ground truth moves along."""
    centroid = sample.points.mean(axis=0)
    gt = sample.gt_box.translated(-centroid) if sample.gt_box is not None else None
    return replace(
        sample,
        points=sample.points - centroid,
        centroid=sample.centroid + centroid,
        gt_box=gt,
    )


def denormalize_frustum(sample):
    """Exact inverse of :func:`normalize_frustum`."""
    gt = sample.gt_box.translated(sample.centroid) if sample.gt_box is not None else None
    return replace(
        sample,
        points=sample.points + sample.centroid,
        centroid=np.zeros(3),
        gt_box=gt,
    )


def build_frustum_sample(cloud, box2d, calib, gt_box, frame_id, object_id,
                         n_points, rng, cls="Car"):
    """One object's sample from a full frame cloud; None when the frustum
    holds no points at all."""
    frustum = extract_frustum(cloud, box2d, calib)
    n_raw = len(frustum)
    if n_raw == 0:
        return None
    n_fg = (
        int(np.count_nonzero(points_in_box3d(frustum, gt_box, strict=True)))
        if gt_box is not None
        else 0
    )
    sampled = sample_to_fixed_size(frustum, n_points, rng)
    sample = FrustumSample(
        points=sampled,
        centroid=np.zeros(3),
        box2d=box2d,
        calib=calib,
        gt_box=gt_box,
        frame_id=frame_id,
        object_id=object_id,
        n_raw_points=n_raw,
        n_foreground_points=n_fg,
        cls=cls,
    )
    return normalize_frustum(sample)


def filter_samples(samples, min_total=MIN_TOTAL_POINTS, min_foreground=MIN_FOREGROUND_POINTS):
    """Keep samples with enough raw and foreground points (inclusive bounds).

    Returns (kept, rejections); each rejection is (frame_id, object_id,
    reason). Idempotent: filtering the kept list again rejects nothing.
    """
    kept = []
    rejections = []
    for s in samples:
        if s.n_raw_points < min_total:
            rejections.append(
                (s.frame_id, s.object_id, f"total points {s.n_raw_points} < {min_total}")
            )
        elif s.n_foreground_points < min_foreground:
            rejections.append(
                (
                    s.frame_id,
                    s.object_id,
                    f"foreground points {s.n_foreground_points} < {min_foreground}",
                )
            )
        else:
            kept.append(s)
    return kept, rejections


def dataset_sampling_rng(seed):
    """The rng stream used for frustum resampling; pure function of the seed."""
    return np.random.default_rng([seed, _SAMPLING_SALT])


def build_dataset_samples(root, n_points, seed, split=None, classes=None):
    """All frustum samples of a dataset directory, unfiltered.

    Objects without 3D extents (DontCare rows) and objects whose class is
    outside `classes` (when given) are skipped. Deterministic in
    (directory contents, n_points, seed).
    """
    rng = dataset_sampling_rng(seed)
    samples = []
    for frame_id in manifest_frames(root, split=split):
        points, _, calib, records = load_frame(root, frame_id)
        for i, rec in enumerate(records):
            if not rec.is_care or not rec.has_box3d:
                continue
            if classes is not None and rec.cls not in classes:
                continue
            gt = lidar_box_from_label(rec, calib)
            sample = build_frustum_sample(
                points,
                rec.box2d,
                calib,
                gt,
                frame_id=frame_id,
                object_id=f"{frame_id}:{i}",
                n_points=n_points,
                rng=rng,
                cls=rec.cls,
            )
            if sample is not None:
                samples.append(sample)
    return samples
