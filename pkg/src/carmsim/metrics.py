"""Evaluation metrics: 2D MPJPE, PCK-torso, collision precision/recall, timing.

The px->mm conversion is an explicit caller-supplied scale; nothing is
inferred from the scene. Collision precision with an empty prediction and a
non-empty oracle reports 0%, and a recall companion is provided for honest
synthetic evaluation.
"""

from dataclasses import dataclass, field
import csv
import time

import numpy as np

from .errors import MissingNormalizerJoints, NoMatches
from .observation import JointId


@dataclass
class EvalRecord:
    """Matched per-frame quantities collected by a pipeline run."""

    timestep: int
    joints_2d: dict = field(default_factory=dict)   # camera -> (pred (J,2), gt (J,2), mask)
    joints_3d: dict = field(default_factory=dict)   # JointId -> (pred (3,), gt (3,))
    targets: dict = field(default_factory=dict)     # name -> (pred (3,), gt (3,))


def mpjpe_2d(preds, gts, mm_per_px=None):
    """Mean L2 pixel error over matched joints; optionally also converted to mm."""
    preds = np.asarray(preds, dtype=float).reshape(-1, 2)
    gts = np.asarray(gts, dtype=float).reshape(-1, 2)
    if len(preds) == 0 or len(preds) != len(gts):
        raise NoMatches(f"{len(preds)} predictions vs {len(gts)} ground truths")
    err = float(np.mean(np.linalg.norm(preds - gts, axis=1)))
    if mm_per_px is None:
        return err
    return err, err * mm_per_px


def pck(preds, gts, fraction, mask=None):
    """Percentage of correct keypoints, torso-normalized.

    preds/gts: (frames, joints, 2) pixel arrays indexed by JointId; the
    torso length is the per-frame distance from mid-shoulder to mid-hip in
    the ground truth. `mask` (frames, joints) marks matched joints. Returns
    the per-joint correctness averaged over joints, in percent.
    """
    preds = np.asarray(preds, dtype=float)
    gts = np.asarray(gts, dtype=float)
    if preds.ndim == 2:
        preds = preds[None]
        gts = gts[None]
    n_frames, n_joints = preds.shape[:2]
    if mask is None:
        mask = np.ones((n_frames, n_joints), dtype=bool)

    sh = (gts[:, JointId.R_SHOULDER] + gts[:, JointId.L_SHOULDER]) / 2.0
    hp = (gts[:, JointId.R_HIP] + gts[:, JointId.L_HIP]) / 2.0
    norm_ok = (mask[:, JointId.R_SHOULDER] & mask[:, JointId.L_SHOULDER]
               & mask[:, JointId.R_HIP] & mask[:, JointId.L_HIP])
    if not np.any(norm_ok):
        raise MissingNormalizerJoints("no frame has shoulders and hips matched")
    torso = np.linalg.norm(sh - hp, axis=1)

    err = np.linalg.norm(preds - gts, axis=2)
    correct = err < fraction * torso[:, None]
    valid = mask & norm_ok[:, None]
    per_joint = []
    for j in range(n_joints):
        sel = valid[:, j]
        if np.any(sel):
            per_joint.append(np.mean(correct[sel, j]))
    return float(np.mean(per_joint) * 100.0)


def cdp(predicted_regions, oracle_regions):
    """Collision detection precision at voxel-cell granularity, percent."""
    pred = set(predicted_regions)
    oracle = set(oracle_regions)
    if not pred:
        return 100.0 if not oracle else 0.0
    return 100.0 * len(pred & oracle) / len(pred)


def collision_recall(predicted_regions, oracle_regions):
    """Companion recall: fraction of oracle cells that were predicted."""
    pred = set(predicted_regions)
    oracle = set(oracle_regions)
    if not oracle:
        return 100.0
    return 100.0 * len(pred & oracle) / len(oracle)


def time_call(fn, *args, **kwargs):
    """(result, wall-clock seconds) of one call, monotonic-clock based."""
    start = time.perf_counter()
    result = fn(*args, **kwargs)
    return result, time.perf_counter() - start


def timing_stats(fn, repeats=5):
    """Mean/std/coefficient-of-variation of wall time over repeated calls."""
    samples = []
    for _ in range(repeats):
        _, dt = time_call(fn)
        samples.append(dt)
    mean = float(np.mean(samples))
    std = float(np.std(samples))
    return {"mean": mean, "std": std, "cv": std / mean if mean > 0 else 0.0,
            "samples": samples}


def write_metrics_csv(path, rows):
    """Flat CSV for spreadsheet import: one (metric, value) row per entry."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for key in sorted(rows):
            writer.writerow([key, rows[key]])
