"""2D keypoint observation model and the synthetic oracle detector.

The oracle detector projects ground-truth joints through a calibrated camera,
applies configurable pixel noise / outliers / dropout, tests occlusion
against simple primitives, and scores each emission. It stands in for a
learned detector behind the same data model, so a real model can replace it.
"""

from dataclasses import dataclass, field
from enum import IntEnum
import json
import zlib

import numpy as np

from . import kernels
from .geometry import camera_depth, in_image, project

CONFIDENCE_SCALE_PX = 10.0   # s0 in rho = exp(-err / s0)
OCCLUSION_RHO_SCALE = 0.2


class JointId(IntEnum):
    """The 15 tracked body joints, with stable integer encoding 0-14."""

    R_ANKLE = 0
    R_KNEE = 1
    R_HIP = 2
    L_HIP = 3
    L_KNEE = 4
    L_ANKLE = 5
    R_WRIST = 6
    R_ELBOW = 7
    R_SHOULDER = 8
    L_SHOULDER = 9
    L_ELBOW = 10
    L_WRIST = 11
    NECK = 12
    HEAD_TOP = 13
    NOSE = 14


assert len(JointId) == 15


@dataclass(frozen=True)
class Observation2D:
    joint: JointId
    pixel: np.ndarray
    confidence: float
    visibility: int

    def __post_init__(self):
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=float).reshape(2))
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence outside [0, 1]")
        if self.visibility not in (0, 1):
            raise ValueError("visibility must be 0 or 1")
        if not np.all(np.isfinite(self.pixel)):
            raise ValueError("pixel must be finite")


@dataclass
class FrameObservations:
    camera_id: str
    timestep: int
    observations: dict = field(default_factory=dict)  # JointId -> Observation2D

    def add(self, obs):
        if obs.joint in self.observations:
            raise ValueError(f"duplicate joint {obs.joint.name}")
        self.observations[obs.joint] = obs


@dataclass(frozen=True)
class NoiseConfig:
    pixel_sigma: float = 0.0
    dropout_prob: float = 0.0
    outlier_prob: float = 0.0
    outlier_magnitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.pixel_sigma < 0:
            raise ValueError("pixel_sigma must be >= 0")
        for name in ("dropout_prob", "outlier_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")


def score_model(exact_pixel, emitted_pixel, occluded, in_frame):
    """(confidence, visibility) for an emission.

    Confidence decays exponentially with pixel error and is scaled down for
    occluded joints; visibility is 1 iff the joint projects in-frame.
    """
    err = float(np.linalg.norm(np.asarray(emitted_pixel, dtype=float)
                               - np.asarray(exact_pixel, dtype=float)))
    rho = float(np.clip(np.exp(-err / CONFIDENCE_SCALE_PX), 0.0, 1.0))
    if occluded:
        rho *= OCCLUSION_RHO_SCALE
    return rho, 1 if in_frame else 0


def _occluder_arrays(occluders):
    boxes, spheres = [], []
    for prim in occluders:
        kind = getattr(prim, "kind", None)
        if kind == "box":
            c = np.asarray(prim.center, dtype=float)
            h = np.asarray(prim.size, dtype=float) / 2.0
            boxes.append(np.concatenate([c - h, c + h]))
        elif kind == "sphere":
            spheres.append(np.concatenate([np.asarray(prim.center, dtype=float),
                                           [prim.radius]]))
        else:
            raise ValueError(f"unsupported occluder: {prim!r}")
    boxes = np.array(boxes) if boxes else np.zeros((0, 6))
    spheres = np.array(spheres) if spheres else np.zeros((0, 4))
    return boxes, spheres


def occluded_mask(camera, points_room, occluders):
    """True per point when a primitive blocks the camera ray before the point."""
    pts = np.atleast_2d(np.asarray(points_room, dtype=float))
    if not occluders:
        return np.zeros(len(pts), dtype=bool)
    boxes, spheres = _occluder_arrays(occluders)
    origin = camera.center
    dirs = pts - origin
    t = kernels.raycast(origin, dirs, boxes, spheres, np.zeros((0, 7)))
    return (t > 0.0) & (t < 1.0 - 1e-6)


def _frame_rng(noise, timestep, camera_id):
    key = zlib.crc32(camera_id.encode())
    return np.random.default_rng(np.random.SeedSequence([noise.seed, timestep, key]))


def synth_detect(joints_room, camera, occluders, noise, timestep=0):
    """Oracle 2D detector for one camera at one timestep.

    joints_room: (15, 3) ground-truth joint positions, indexed by JointId.
    In-frame unoccluded joints are always emitted with Gaussian pixel noise
    (or, with probability outlier_prob, a fixed-magnitude offset in a random
    direction). Occluded or out-of-frame joints are dropped with probability
    dropout_prob, otherwise emitted and scored accordingly. Bit-reproducible
    for a given (seed, timestep, camera id).
    """
    joints_room = np.asarray(joints_room, dtype=float).reshape(len(JointId), 3)
    rng = _frame_rng(noise, timestep, camera.id)
    frame = FrameObservations(camera_id=camera.id, timestep=timestep)

    occ = occluded_mask(camera, joints_room, occluders)
    for joint in JointId:
        point = joints_room[joint]
        if camera_depth(camera, point) <= 1e-9:
            continue  # behind the camera: nothing to emit
        exact = project(camera, point)
        inside = in_image(camera, exact)

        # draw noise unconditionally so dropout does not shift the stream
        gauss = rng.normal(0.0, noise.pixel_sigma, size=2) if noise.pixel_sigma > 0 else np.zeros(2)
        is_outlier = rng.random() < noise.outlier_prob
        angle = rng.random() * 2.0 * np.pi
        drop_draw = rng.random()

        if is_outlier:
            emitted = exact + noise.outlier_magnitude * np.array([np.cos(angle), np.sin(angle)])
        else:
            emitted = exact + gauss

        if (occ[joint] or not inside) and drop_draw < noise.dropout_prob:
            continue
        rho, vis = score_model(exact, emitted, occluded=bool(occ[joint]), in_frame=inside)
        frame.add(Observation2D(joint=joint, pixel=emitted, confidence=rho, visibility=vis))
    return frame


def dump_observations(path, frames):
    """Write frames as JSON lines: one record per (t, camera, joint)."""
    with open(path, "w") as fh:
        for frame in frames:
            for joint in sorted(frame.observations):
                obs = frame.observations[joint]
                fh.write(json.dumps({
                    "t": frame.timestep,
                    "camera": frame.camera_id,
                    "joint": joint.name,
                    "pixel": [obs.pixel[0], obs.pixel[1]],
                    "rho": obs.confidence,
                    "v": obs.visibility,
                }) + "\n")


def load_observations(path):
    """Read a dump back into FrameObservations grouped by (t, camera)."""
    frames = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            key = (rec["t"], rec["camera"])
            frame = frames.get(key)
            if frame is None:
                frame = FrameObservations(camera_id=rec["camera"], timestep=rec["t"])
                frames[key] = frame
            frame.add(Observation2D(joint=JointId[rec["joint"]],
                                    pixel=np.array(rec["pixel"]),
                                    confidence=rec["rho"],
                                    visibility=rec["v"]))
    return [frames[k] for k in sorted(frames)]
