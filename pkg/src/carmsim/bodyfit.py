"""Parametric articulated-skeleton fit and anatomical target localization.

A 15-joint scaled-bone skeleton in a canonical supine rest pose (head
towards +x, face up, arms alongside the body) replaces a full mesh model:
forward kinematics chains per-joint rotations and per-bone scales from a
root at the neck. Fitting minimizes the confidence-weighted squared
distance between FK joints and consolidated keypoints with a trust-region
solver; anatomical targets are placed in local frames spanned by their
defining joints so ground truth and prediction share one definition.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .errors import FrameDegenerate, InsufficientKeypoints, NoConvergence
from .observation import JointId

J = JointId

# child -> (parent, rest direction, default length mm)
_HIP_DIR = np.array([-5.0, -1.0, 0.0]) / math.sqrt(26.0)
_BONES = {
    J.HEAD_TOP: (J.NECK, np.array([1.0, 0.0, 0.0]), 180.0),
    J.NOSE: (J.NECK, np.array([0.6, 0.0, 0.8]), 120.0),
    J.R_SHOULDER: (J.NECK, np.array([0.0, -1.0, 0.0]), 200.0),
    J.L_SHOULDER: (J.NECK, np.array([0.0, 1.0, 0.0]), 200.0),
    J.R_ELBOW: (J.R_SHOULDER, np.array([-1.0, 0.0, 0.0]), 300.0),
    J.R_WRIST: (J.R_ELBOW, np.array([-1.0, 0.0, 0.0]), 250.0),
    J.L_ELBOW: (J.L_SHOULDER, np.array([-1.0, 0.0, 0.0]), 300.0),
    J.L_WRIST: (J.L_ELBOW, np.array([-1.0, 0.0, 0.0]), 250.0),
    J.R_HIP: (J.NECK, _HIP_DIR.copy(), 510.0),
    J.L_HIP: (J.NECK, _HIP_DIR * np.array([1.0, -1.0, 1.0]), 510.0),
    J.R_KNEE: (J.R_HIP, np.array([-1.0, 0.0, 0.0]), 450.0),
    J.L_KNEE: (J.L_HIP, np.array([-1.0, 0.0, 0.0]), 450.0),
    J.R_ANKLE: (J.R_KNEE, np.array([-1.0, 0.0, 0.0]), 420.0),
    J.L_ANKLE: (J.L_KNEE, np.array([-1.0, 0.0, 0.0]), 420.0),
}

ROOT = J.NECK
SCALE_MIN, SCALE_MAX = 0.5, 2.0

# joints whose local rotation is optimized (those with descendants; the
# neck's rotation is redundant with the root orientation and stays fixed)
FIT_ROTATION_JOINTS = (J.R_SHOULDER, J.R_ELBOW, J.L_SHOULDER, J.L_ELBOW,
                       J.R_HIP, J.R_KNEE, J.L_HIP, J.L_KNEE)


@dataclass(frozen=True)
class SkeletonTemplate:
    parents: dict
    rest_directions: dict
    bone_lengths: dict

    def __post_init__(self):
        for child, d in self.rest_directions.items():
            if abs(np.linalg.norm(d) - 1.0) > 1e-9:
                raise ValueError(f"rest direction for {child.name} not unit-norm")
        order = [ROOT]
        seen = {ROOT}
        while len(order) < len(JointId):
            grew = False
            for child, parent in self.parents.items():
                if child not in seen and parent in seen:
                    order.append(child)
                    seen.add(child)
                    grew = True
            if not grew:
                raise ValueError("topology is not a tree rooted at the neck")
        object.__setattr__(self, "_topo_order", tuple(order))

    @property
    def topo_order(self):
        return self._topo_order

    @property
    def bones(self):
        """Children in stable JointId order (one bone per child)."""
        return tuple(sorted(self.parents, key=int))


def default_template():
    return SkeletonTemplate(
        parents={c: p for c, (p, _, _) in _BONES.items()},
        rest_directions={c: d / np.linalg.norm(d) for c, (_, d, _) in _BONES.items()},
        bone_lengths={c: ln for c, (_, _, ln) in _BONES.items()},
    )


@dataclass
class BodyParams:
    root_position: np.ndarray
    root_orientation: np.ndarray
    bone_scales: dict
    joint_rotations: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root_position = np.asarray(self.root_position, dtype=float).reshape(3)
        self.root_orientation = np.asarray(self.root_orientation, dtype=float).reshape(3, 3)
        for scale in self.bone_scales.values():
            if not SCALE_MIN <= scale <= SCALE_MAX:
                raise ValueError(f"bone scale {scale} outside [{SCALE_MIN}, {SCALE_MAX}]")

    def rotation(self, joint):
        return self.joint_rotations.get(joint, np.eye(3))

    def to_dict(self):
        return {
            "root_position": self.root_position.tolist(),
            "root_orientation": self.root_orientation.tolist(),
            "bone_scales": {j.name: s for j, s in self.bone_scales.items()},
            "joint_rotations": {j.name: r.tolist() for j, r in self.joint_rotations.items()},
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(root_position=np.array(doc["root_position"]),
                   root_orientation=np.array(doc["root_orientation"]),
                   bone_scales={JointId[k]: v for k, v in doc["bone_scales"].items()},
                   joint_rotations={JointId[k]: np.array(v)
                                    for k, v in doc["joint_rotations"].items()})


def default_params(template, root_position=(0.0, 0.0, 0.0)):
    return BodyParams(root_position=np.asarray(root_position, dtype=float),
                      root_orientation=np.eye(3),
                      bone_scales={c: 1.0 for c in template.bones})


@dataclass(frozen=True)
class AnatomicalTarget:
    name: str
    defining_joints: tuple
    offset: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "defining_joints", tuple(self.defining_joints))
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float).reshape(3))
        if not self.defining_joints:
            raise ValueError("target needs at least one defining joint")


# offsets are simulator conventions, shared by ground truth and prediction
TARGETS = {
    "head_top": AnatomicalTarget("head_top", (J.HEAD_TOP,), (0.0, 0.0, 0.0)),
    "right_radial_artery": AnatomicalTarget("right_radial_artery",
                                            (J.R_WRIST, J.R_ELBOW), (-20.0, 0.0, 0.0)),
    "left_radial_artery": AnatomicalTarget("left_radial_artery",
                                           (J.L_WRIST, J.L_ELBOW), (-20.0, 0.0, 0.0)),
    "right_femoral_artery": AnatomicalTarget("right_femoral_artery",
                                             (J.R_HIP, J.L_HIP), (40.0, 0.0, 0.0)),
    "left_femoral_artery": AnatomicalTarget("left_femoral_artery",
                                            (J.L_HIP, J.R_HIP), (40.0, 0.0, 0.0)),
}


def forward_kinematics(template, params):
    """(15, 3) room-frame joint positions for the given body parameters."""
    pos = np.zeros((len(JointId), 3))
    acc = {}
    pos[ROOT] = params.root_position
    acc[ROOT] = params.root_orientation @ params.rotation(ROOT)
    for child in template.topo_order[1:]:
        parent = template.parents[child]
        scale = params.bone_scales.get(child, 1.0)
        bone = scale * template.bone_lengths[child] * template.rest_directions[child]
        pos[child] = pos[parent] + acc[parent] @ bone
        acc[child] = acc[parent] @ params.rotation(child)
    return pos


def _solver_context(template):
    """Template flattened to arrays for the fit's inner loop."""
    order = template.topo_order
    slot = {j: i for i, j in enumerate(order)}
    bone_slot = {child: i for i, child in enumerate(template.bones)}
    rot_slot = np.full(len(order), -1, dtype=int)
    for i, j in enumerate(FIT_ROTATION_JOINTS):
        rot_slot[slot[j]] = i
    return {
        "n": len(order),
        "parents": np.array([slot[template.parents[j]] for j in order[1:]]),
        "dirs": np.array([template.rest_directions[j] for j in order[1:]]),
        "lens": np.array([template.bone_lengths[j] for j in order[1:]]),
        "scale_idx": np.array([bone_slot[j] for j in order[1:]]),
        "rot_slot": rot_slot,
        "out_index": np.array([int(j) for j in order]),
    }


def _fk_packed(x, ctx):
    """Forward kinematics straight from the parameter vector (hot path)."""
    n_rot = len(FIT_ROTATION_JOINTS)
    rotvecs = np.vstack([x[3:6], x[6: 6 + 3 * n_rot].reshape(n_rot, 3)])
    mats = Rotation.from_rotvec(rotvecs).as_matrix()
    scales = x[6 + 3 * n_rot:]
    n = ctx["n"]
    pos = np.zeros((n, 3))
    acc = np.zeros((n, 3, 3))
    pos[0] = x[0:3]
    acc[0] = mats[0]
    parents, dirs, lens = ctx["parents"], ctx["dirs"], ctx["lens"]
    scale_idx, rot_slot = ctx["scale_idx"], ctx["rot_slot"]
    for k in range(1, n):
        p = parents[k - 1]
        pos[k] = pos[p] + scales[scale_idx[k - 1]] * lens[k - 1] * (acc[p] @ dirs[k - 1])
        rs = rot_slot[k]
        acc[k] = acc[p] @ mats[1 + rs] if rs >= 0 else acc[p]
    out = np.empty((n, 3))
    out[ctx["out_index"]] = pos
    return out


def _kabsch(src, dst, weights):
    """Weighted rigid alignment dst ~ R @ src + t."""
    w = weights / weights.sum()
    cs = (src * w[:, None]).sum(axis=0)
    cd = (dst * w[:, None]).sum(axis=0)
    h = ((src - cs) * w[:, None]).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.diag([1.0, 1.0, np.linalg.det(vt.T @ u.T)])
    r = vt.T @ d @ u.T
    return r, cd - r @ cs


def _pack(params, template):
    x = np.empty(6 + 3 * len(FIT_ROTATION_JOINTS) + len(template.bones))
    x[0:3] = params.root_position
    x[3:6] = Rotation.from_matrix(params.root_orientation).as_rotvec()
    for i, j in enumerate(FIT_ROTATION_JOINTS):
        x[6 + 3 * i: 9 + 3 * i] = Rotation.from_matrix(params.rotation(j)).as_rotvec()
    for i, child in enumerate(template.bones):
        x[6 + 3 * len(FIT_ROTATION_JOINTS) + i] = params.bone_scales.get(child, 1.0)
    return x


def _unpack(x, template):
    n_rot = len(FIT_ROTATION_JOINTS)
    rotations = {}
    for i, j in enumerate(FIT_ROTATION_JOINTS):
        rotations[j] = Rotation.from_rotvec(x[6 + 3 * i: 9 + 3 * i]).as_matrix()
    scales = {child: float(np.clip(x[6 + 3 * n_rot + i], SCALE_MIN, SCALE_MAX))
              for i, child in enumerate(template.bones)}
    return BodyParams(root_position=x[0:3].copy(),
                      root_orientation=Rotation.from_rotvec(x[3:6]).as_matrix(),
                      bone_scales=scales, joint_rotations=rotations)


def fit_body(keypoints, template, *, score_floor=0.1, reproj_max=8.0,
             max_iter=200, reg_weight=1e-3, initial=None):
    """Fit body parameters to consolidated keypoints.

    keypoints: mapping JointId -> ScoredKeypoint3D (or an iterable of them).
    Joints whose composite score rho*vis*min(1, inv_err*reproj_max) falls
    below score_floor are ignored; at least 8 must remain. `initial` warm
    starts the solver (e.g. with the previous frame's fit).
    """
    if not isinstance(keypoints, dict):
        keypoints = {kp.joint: kp for kp in keypoints}
    usable = {}
    for joint, kp in keypoints.items():
        composite = kp.rho * kp.vis * min(1.0, kp.inv_err * reproj_max)
        if composite >= score_floor:
            usable[joint] = kp
    if len(usable) < 8:
        raise InsufficientKeypoints(f"{len(usable)} scored joints < 8")

    joints = sorted(usable, key=int)
    targets = np.array([usable[j].position for j in joints])
    weights = np.array([usable[j].rho for j in joints])

    if initial is not None:
        x0 = _pack(initial, template)
    else:
        canon = forward_kinematics(template, default_params(template))
        r0, t0 = _kabsch(canon[[int(j) for j in joints]], targets, weights)
        x0 = _pack(BodyParams(root_position=r0 @ canon[ROOT] + t0,
                              root_orientation=r0,
                              bone_scales={c: 1.0 for c in template.bones}), template)

    n_rot = len(FIT_ROTATION_JOINTS)
    sqw = np.sqrt(weights)
    ctx = _solver_context(template)
    rows = np.array([int(j) for j in joints])

    def residuals(x):
        fk = _fk_packed(x, ctx)
        data = ((fk[rows] - targets) * sqw[:, None]).ravel()
        reg = np.concatenate([reg_weight * x[6: 6 + 3 * n_rot],
                              reg_weight * (x[6 + 3 * n_rot:] - 1.0)])
        return np.concatenate([data, reg])

    lo = np.full(x0.size, -np.inf)
    hi = np.full(x0.size, np.inf)
    lo[6 + 3 * n_rot:] = SCALE_MIN
    hi[6 + 3 * n_rot:] = SCALE_MAX
    x0[6 + 3 * n_rot:] = np.clip(x0[6 + 3 * n_rot:], SCALE_MIN, SCALE_MAX)
    x_scale = np.concatenate([np.full(3, 100.0), np.full(3, 0.1),
                              np.full(3 * n_rot, 0.1),
                              np.full(len(template.bones), 0.05)])
    res = least_squares(residuals, x0, bounds=(lo, hi), method="trf",
                        x_scale=x_scale, xtol=1e-8, ftol=1e-10, gtol=1e-10,
                        max_nfev=max_iter)
    if res.status == 0:
        raise NoConvergence("body fit hit the iteration cap")
    return _unpack(res.x, template)


def locate_target_from_joints(joints_room, target):
    """Target position from (15, 3) joint positions via the target's local frame."""
    pts = [np.asarray(joints_room[int(j)], dtype=float) for j in target.defining_joints]
    origin = pts[0]
    if len(pts) == 1:
        return origin + target.offset
    axis = pts[0] - pts[1]
    norm = np.linalg.norm(axis)
    if norm < 1.0:
        raise FrameDegenerate(f"defining joints of {target.name} coincide")
    x_axis = axis / norm
    ref = np.eye(3)[np.argmin(np.abs(x_axis))]
    y_axis = np.cross(ref, x_axis)
    y_axis /= np.linalg.norm(y_axis)
    z_axis = np.cross(x_axis, y_axis)
    frame = np.column_stack([x_axis, y_axis, z_axis])
    return origin + frame @ target.offset


def locate_target(params, template, target):
    return locate_target_from_joints(forward_kinematics(template, params), target)


def positioning_error(predicted, ground_truth):
    """Horizontal-plane (x, y) distance in mm; the z axis is ignored."""
    delta = np.asarray(predicted, dtype=float) - np.asarray(ground_truth, dtype=float)
    return float(np.hypot(delta[0], delta[1]))
