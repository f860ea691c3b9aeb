"""Two-stage confidence-weighted triangulation of per-joint 3D keypoints.

Stage one solves, for every camera subset of size >= 2, the position
minimizing the summed reprojection error (linear SVD initialization, then
trust-region refinement with Huber loss). Stage two picks the candidate with
the lowest confidence-weighted reprojection cost over all observing cameras
and attaches the scoring vector (mean confidence, mean visibility, inverse
mean reprojection error of the winning subset).

Observations predicted out-of-frame (visibility 0) are excluded from both
stages.
"""

from dataclasses import dataclass
from itertools import combinations
import json
import logging

import numpy as np
from scipy.optimize import least_squares

from .errors import InsufficientViews, NearParallelRays, NoConvergence, NonPositiveDepth
from .geometry import project, reprojection_error
from .observation import JointId

log = logging.getLogger(__name__)

DEFAULT_HUBER_DELTA_PX = 2.0
DEFAULT_MAX_ITER = 100
DEFAULT_COND_MAX = 1e8
DEFAULT_ERROR_FLOOR_PX = 0.1
_DLT_COLUMN_SCALE = 1000.0  # balances mm-scale translations in the DLT system
_UNPROJECTABLE_COST = np.inf


@dataclass(frozen=True)
class Candidate3D:
    position: np.ndarray
    subset: tuple
    mean_reproj_error: float

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "subset", tuple(sorted(self.subset)))
        if len(self.subset) < 2:
            raise ValueError("candidate subset must contain >= 2 cameras")


@dataclass(frozen=True)
class ScoredKeypoint3D:
    joint: JointId
    timestep: int
    position: np.ndarray
    rho: float
    vis: float
    inv_err: float
    subset: tuple

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "subset", tuple(self.subset))
        if not (np.all(np.isfinite(self.position)) and np.isfinite(self.rho)
                and np.isfinite(self.vis) and np.isfinite(self.inv_err)):
            raise ValueError("scored keypoint fields must be finite")
        if self.inv_err <= 0:
            raise ValueError("inv_err must be positive")

    @property
    def score_vector(self):
        return (self.rho, self.vis, self.inv_err)


def _usable(observations):
    """Observations eligible for triangulation: visibility 1 only."""
    return {cid: obs for cid, obs in observations.items() if obs.visibility == 1}


def triangulate_subset(observations, cameras, subset, *,
                       huber_delta=DEFAULT_HUBER_DELTA_PX,
                       max_iter=DEFAULT_MAX_ITER,
                       cond_max=DEFAULT_COND_MAX):
    """Position minimizing the summed reprojection error over one subset."""
    subset = tuple(sorted(subset))
    if len(subset) < 2:
        raise ValueError("subset must contain >= 2 cameras")

    rows = []
    for cid in subset:
        cam = cameras[cid]
        obs = observations[cid]
        e = cam.extrinsics
        kinv = cam.intrinsics.inv_matrix
        xn, yn, _ = kinv @ np.array([obs.pixel[0], obs.pixel[1], 1.0])
        r, t = e.rotation, e.translation
        rows.append(np.append(xn * r[2] - r[0], xn * t[2] - t[0]))
        rows.append(np.append(yn * r[2] - r[1], yn * t[2] - t[1]))
    a = np.array(rows)
    a[:, :3] *= _DLT_COLUMN_SCALE
    _, sv, vt = np.linalg.svd(a)
    if sv[2] <= 0 or sv[0] / sv[2] > cond_max:
        raise NearParallelRays(f"condition {sv[0] / max(sv[2], 1e-300):.3g} over subset {subset}")
    y = vt[-1]
    if abs(y[3]) < 1e-12 * np.linalg.norm(y):
        raise NearParallelRays(f"point at infinity for subset {subset}")
    x0 = y[:3] * _DLT_COLUMN_SCALE / y[3]

    mats = [(cameras[cid].intrinsics.matrix, cameras[cid].extrinsics.rotation,
             cameras[cid].extrinsics.translation, observations[cid].pixel)
            for cid in subset]

    def residuals(x):
        out = np.empty(2 * len(mats))
        for i, (k, r, t, pix) in enumerate(mats):
            cam_pt = r @ x + t
            z = max(cam_pt[2], 1e-9)
            out[2 * i] = k[0, 0] * cam_pt[0] / z + k[0, 2] - pix[0]
            out[2 * i + 1] = k[1, 1] * cam_pt[1] / z + k[1, 2] - pix[1]
        return out

    def jac(x):
        out = np.empty((2 * len(mats), 3))
        for i, (k, r, t, _) in enumerate(mats):
            cam_pt = r @ x + t
            z = max(cam_pt[2], 1e-9)
            out[2 * i] = k[0, 0] * (r[0] * z - cam_pt[0] * r[2]) / (z * z)
            out[2 * i + 1] = k[1, 1] * (r[1] * z - cam_pt[1] * r[2]) / (z * z)
        return out

    res = least_squares(residuals, x0, jac=jac, method="trf", loss="huber",
                        f_scale=huber_delta, xtol=1e-10, ftol=1e-12, gtol=1e-12,
                        max_nfev=max_iter)
    if res.status == 0:
        raise NoConvergence(f"triangulation refinement hit cap for subset {subset}")

    errs = [reprojection_error(cameras[cid], observations[cid].pixel, res.x) for cid in subset]
    return Candidate3D(position=res.x, subset=subset,
                       mean_reproj_error=float(np.mean(errs)))


def enumerate_candidates(observations, cameras, **solver_kwargs):
    """One candidate per camera subset of size >= 2; failed subsets are skipped."""
    usable = _usable(observations)
    observers = sorted(usable)
    if len(observers) < 2:
        raise InsufficientViews(f"only {len(observers)} usable views")
    candidates = []
    for size in range(2, len(observers) + 1):
        for subset in combinations(observers, size):
            try:
                candidates.append(triangulate_subset(usable, cameras, subset, **solver_kwargs))
            except (NearParallelRays, NoConvergence) as exc:
                log.info("skipping subset %s: %s", subset, exc)
    if not candidates:
        raise InsufficientViews("no triangulatable subset")
    return candidates


def weighted_cost(position, observations, cameras):
    """Confidence-weighted reprojection cost over all usable observations."""
    total = 0.0
    for cid, obs in _usable(observations).items():
        try:
            err = reprojection_error(cameras[cid], obs.pixel, position)
        except NonPositiveDepth:
            return _UNPROJECTABLE_COST
        total += obs.confidence * err
    return total


def select_best(candidates, observations, cameras, joint, timestep, *,
                error_floor=DEFAULT_ERROR_FLOOR_PX):
    """Candidate with minimal weighted cost; ties broken by subset size,
    unweighted mean error, then camera-id order."""
    if not candidates:
        raise ValueError("empty candidate list")
    usable = _usable(observations)

    def key(cand):
        return (weighted_cost(cand.position, usable, cameras),
                -len(cand.subset), cand.mean_reproj_error, cand.subset)

    winner = min(candidates, key=key)
    rho = float(np.mean([usable[cid].confidence for cid in winner.subset]))
    vis = float(np.mean([usable[cid].visibility for cid in winner.subset]))
    inv_err = 1.0 / max(winner.mean_reproj_error, error_floor)
    return ScoredKeypoint3D(joint=joint, timestep=timestep, position=winner.position,
                            rho=rho, vis=vis, inv_err=inv_err, subset=winner.subset)


def triangulate_joint(observations, cameras, joint, timestep, *,
                      error_floor=DEFAULT_ERROR_FLOOR_PX, **solver_kwargs):
    """enumerate_candidates + select_best for one joint at one timestep."""
    candidates = enumerate_candidates(observations, cameras, **solver_kwargs)
    return select_best(candidates, observations, cameras, joint, timestep,
                       error_floor=error_floor)


def save_keypoints(path, keypoints, consolidated=False):
    """JSON-lines record per keypoint, consumed by the temporal stage."""
    with open(path, "w") as fh:
        for kp in keypoints:
            fh.write(json.dumps({
                "t": kp.timestep,
                "joint": kp.joint.name,
                "position": kp.position.tolist(),
                "rho": kp.rho,
                "v": kp.vis,
                "inv_err": kp.inv_err,
                "subset": list(kp.subset),
                "consolidated": consolidated,
            }) + "\n")


def load_keypoints(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(ScoredKeypoint3D(joint=JointId[rec["joint"]],
                                        timestep=rec["t"],
                                        position=np.array(rec["position"]),
                                        rho=rec["rho"], vis=rec["v"],
                                        inv_err=rec["inv_err"],
                                        subset=tuple(rec["subset"])))
    return out
