"""Synthetic operating-room scenes: ground truth for every pipeline stage.

Scenes hold a three-camera ceiling rig around the table, a bed box, a
ground-truth patient skeleton rendered as capsules along its bones,
obstacle primitives, PnP markers, and (for sweep scenarios) a parked C-arm
proxy. Motion scripts inject patient motion, per-camera occluders, obstacle
motion, and detector-noise changes over abstract timesteps. Everything is
bit-reproducible for a given (seed, preset, script).
"""

from dataclasses import dataclass, field, replace
import json
import zlib

import numpy as np

from . import kernels
from .bodyfit import (BodyParams, TARGETS, default_template, forward_kinematics,
                      locate_target_from_joints)
from .errors import UnknownPreset
from .geometry import CameraModel, DepthImage, Extrinsics, Intrinsics, look_at
from .observation import JointId, NoiseConfig
from .vtr import CArmModel, CArmPose

SCENE_FORMAT_VERSION = 1

J = JointId


@dataclass
class Box:
    id: str
    center: np.ndarray
    size: np.ndarray

    kind = "box"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.size = np.asarray(self.size, dtype=float).reshape(3)


@dataclass
class Sphere:
    id: str
    center: np.ndarray
    radius: float

    kind = "sphere"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)


@dataclass
class Capsule:
    id: str
    p0: np.ndarray
    p1: np.ndarray
    radius: float

    kind = "capsule"

    def __post_init__(self):
        self.p0 = np.asarray(self.p0, dtype=float).reshape(3)
        self.p1 = np.asarray(self.p1, dtype=float).reshape(3)


# script events -------------------------------------------------------------

@dataclass(frozen=True)
class MoveJoint:
    timestep: int
    joint: JointId
    delta: tuple


@dataclass(frozen=True)
class Occlude:
    timestep: int
    camera_id: str
    primitive: object
    duration: int


@dataclass(frozen=True)
class MoveObstacle:
    timestep: int
    obstacle_id: str
    delta: tuple


@dataclass(frozen=True)
class NoiseChange:
    timestep: int
    noise: NoiseConfig


@dataclass
class MotionScript:
    events: list = field(default_factory=list)

    def __post_init__(self):
        steps = [e.timestep for e in self.events]
        if any(b < a for a, b in zip(steps, steps[1:])):
            raise ValueError("script events must have non-decreasing timesteps")


@dataclass
class ScriptState:
    joint_offsets: np.ndarray
    obstacle_offsets: dict
    occluders: dict          # camera_id -> [primitive]
    noise: NoiseConfig | None


def resolve_script(script, timestep):
    """Cumulative script state at `timestep` (events at t <= timestep applied)."""
    state = ScriptState(joint_offsets=np.zeros((len(JointId), 3)),
                        obstacle_offsets={}, occluders={}, noise=None)
    if script is None:
        return state
    for ev in script.events:
        if ev.timestep > timestep:
            break
        if isinstance(ev, MoveJoint):
            state.joint_offsets[ev.joint] += np.asarray(ev.delta, dtype=float)
        elif isinstance(ev, MoveObstacle):
            prev = state.obstacle_offsets.get(ev.obstacle_id, np.zeros(3))
            state.obstacle_offsets[ev.obstacle_id] = prev + np.asarray(ev.delta, dtype=float)
        elif isinstance(ev, Occlude):
            if timestep < ev.timestep + ev.duration:
                state.occluders.setdefault(ev.camera_id, []).append(ev.primitive)
        elif isinstance(ev, NoiseChange):
            state.noise = ev.noise
        else:
            raise ValueError(f"unknown event: {ev!r}")
    return state


@dataclass
class Scene:
    preset: str
    seed: int
    cameras: list
    bed: Box
    template: object
    body: BodyParams
    obstacles: list
    markers: np.ndarray
    carm: CArmModel | None = None
    carm_pose: CArmPose | None = None
    isocenter: np.ndarray | None = None

    def camera_map(self):
        return {cam.id: cam for cam in self.cameras}


@dataclass
class GroundTruth:
    joints: np.ndarray
    targets: dict
    obstacles: list


# capsule radii per bone segment, mm
_BONE_RADII = {
    J.HEAD_TOP: 100.0, J.NOSE: 40.0,
    J.R_SHOULDER: 70.0, J.L_SHOULDER: 70.0,
    J.R_ELBOW: 50.0, J.L_ELBOW: 50.0,
    J.R_WRIST: 45.0, J.L_WRIST: 45.0,
    J.R_HIP: 120.0, J.L_HIP: 120.0,
    J.R_KNEE: 75.0, J.L_KNEE: 75.0,
    J.R_ANKLE: 55.0, J.L_ANKLE: 55.0,
}

# mounting positions are plausible values, not published coordinates
_CAMERA_POSTS = (("c0", (2000.0, -1600.0, 2600.0)),
                 ("c1", (2000.0, 1600.0, 2600.0)),
                 ("c2", (-2600.0, 0.0, 2600.0)))
_CAMERA_TARGET = (0.0, 0.0, 900.0)

_MARKERS = np.array([
    [-1700.0, -350.0, 900.0], [-1700.0, 350.0, 900.0],
    [500.0, -350.0, 900.0], [500.0, 350.0, 900.0],
    [-1200.0, -350.0, 1200.0], [-1200.0, 350.0, 1250.0],
    [0.0, -350.0, 1300.0], [0.0, 350.0, 1150.0],
])

VTR_PRESETS = (
    "head-side-vertical", "full-head-vertical", "left-side-vertical",
    "right-side-vertical", "full-left-vertical", "full-right-vertical",
    "monitor-boom", "iv-pole", "instrument-cart", "clear-path",
)

POSITIONING_PRESETS = tuple(f"positioning-{i}-{j}" for i in range(3) for j in range(3))

_SUPPORT_SHIFTS = (-200.0, 0.0, 200.0)


def default_cameras(width=640, height=480, focal=420.0):
    intr = Intrinsics(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0,
                      image_width=width, image_height=height)
    cams = []
    for cid, pos in _CAMERA_POSTS:
        cams.append(CameraModel(id=cid, intrinsics=intr,
                                extrinsics=look_at(pos, _CAMERA_TARGET)))
    return cams


def _rng_for(seed, preset):
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(preset.encode())]))


def _base_scene(seed, preset, support_shift=0.0):
    rng = _rng_for(seed, preset)
    template = default_template()
    scales = {c: float(np.clip(1.0 + 0.06 * rng.uniform(-1.0, 1.0), 0.9, 1.1))
              for c in template.bones}
    rotations = {}
    for elbow in (J.R_ELBOW, J.L_ELBOW):
        angle = float(rng.uniform(-0.12, 0.12))
        c, s = np.cos(angle), np.sin(angle)
        rotations[elbow] = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    body = BodyParams(root_position=np.array([600.0 + support_shift, 0.0, 980.0]),
                      root_orientation=np.eye(3),
                      bone_scales=scales, joint_rotations=rotations)
    bed = Box(id="bed", center=np.array([-600.0 + support_shift, 0.0, 840.0]),
              size=np.array([2200.0, 700.0, 120.0]))
    joints = forward_kinematics(template, body)
    iso = (joints[J.NECK] + joints[J.HEAD_TOP]) / 2.0
    markers = _MARKERS.copy()
    markers[:, 0] += support_shift
    return Scene(preset=preset, seed=seed, cameras=default_cameras(), bed=bed,
                 template=template, body=body, obstacles=[], markers=markers,
                 isocenter=iso)


def _vtr_obstacles(name, iso, rng):
    """Obstacles for the named sweep scenario; jittered a little per seed."""
    jitter = lambda: rng.uniform(-20.0, 20.0, size=3)
    x = iso[0]
    obs = []
    if name == "head-side-vertical":
        obs.append(Box("pole", np.array([x, -870.0, 700.0]) + jitter(), (90.0, 90.0, 1400.0)))
    elif name == "full-head-vertical":
        obs.append(Box("boom", np.array([x, 0.0, iso[2] + 880.0]) + jitter(), (300.0, 500.0, 120.0)))
    elif name == "left-side-vertical":
        obs.append(Box("pole-l", np.array([x, 880.0, 600.0]) + jitter(), (80.0, 80.0, 1200.0)))
    elif name == "right-side-vertical":
        obs.append(Box("pole-r", np.array([x, -880.0, 600.0]) + jitter(), (80.0, 80.0, 1200.0)))
    elif name == "full-left-vertical":
        obs.append(Box("rack-l", np.array([x, 840.0, iso[2]]) + jitter(), (200.0, 150.0, 1800.0)))
    elif name == "full-right-vertical":
        obs.append(Box("rack-r", np.array([x, -840.0, iso[2]]) + jitter(), (200.0, 150.0, 1800.0)))
    elif name == "monitor-boom":
        obs.append(Box("monitor", np.array([x + 80.0, 300.0, iso[2] + 850.0]) + jitter(),
                       (400.0, 350.0, 250.0)))
    elif name == "iv-pole":
        obs.append(Box("iv-pole", np.array([x - 60.0, 905.0, 900.0]) + jitter(), (60.0, 60.0, 1800.0)))
        obs.append(Sphere("iv-bag", np.array([x - 60.0, 905.0, 1850.0]) + jitter(), 90.0))
    elif name == "instrument-cart":
        obs.append(Box("cart", np.array([x, -1400.0, 450.0]) + jitter(), (500.0, 400.0, 900.0)))
    elif name == "clear-path":
        obs.append(Box("cabinet", np.array([x - 200.0, 1800.0, 900.0]) + jitter(),
                       (400.0, 300.0, 1800.0)))
    else:
        raise UnknownPreset(name)
    return obs


def generate_scene(seed, preset):
    """Deterministic scene for (seed, preset).

    Presets: "lab", the ten sweep scenarios in VTR_PRESETS, and the 3x3
    positioning grid "positioning-<support>-<carm>".
    """
    if preset == "lab":
        return _base_scene(seed, preset)
    if preset in VTR_PRESETS:
        scene = _base_scene(seed, preset)
        rng = _rng_for(seed, preset + "/obstacles")
        scene.carm = CArmModel()
        scene.carm_pose = CArmPose(isocenter=scene.isocenter, angle_deg=0.0)
        scene.obstacles = _vtr_obstacles(preset, scene.isocenter, rng)
        return scene
    if preset in POSITIONING_PRESETS:
        _, i, j = preset.split("-")
        scene = _base_scene(seed, preset, support_shift=_SUPPORT_SHIFTS[int(i)])
        # parked C-arm position only matters as occlusion clutter; the
        # occlusion pattern itself comes from the preset script
        scene.carm = CArmModel()
        park_y = (-1200.0, 0.0, 1200.0)[int(j)]
        park = scene.isocenter + np.array([0.0, park_y, 0.0])
        scene.carm_pose = CArmPose(isocenter=park, angle_deg=0.0)
        return scene
    raise UnknownPreset(preset)


def preset_script(scene, n_steps=30):
    """Scripted occlusions for the positioning presets: a sheet/C-arm blob
    blocks the wrist+head region for two cameras mid-run, with extra
    outlier noise while it lasts."""
    if not scene.preset.startswith("positioning-"):
        return MotionScript(events=[])
    j = int(scene.preset.split("-")[2])
    joints = forward_kinematics(scene.template, scene.body)
    blob_center = (joints[J.R_WRIST] + joints[J.HEAD_TOP]) / 2.0 + np.array([0.0, 0.0, 350.0])
    blob = Box("occluder", blob_center, (900.0, 700.0, 80.0))
    cams = [("c0", "c1"), ("c0", "c2"), ("c1", "c2")][j]
    start, dur = 10, 8
    base = NoiseConfig(pixel_sigma=2.0, seed=scene.seed)
    noisy = replace(base, outlier_prob=0.35, outlier_magnitude=70.0)
    events = [
        Occlude(timestep=start, camera_id=cams[0], primitive=blob, duration=dur),
        Occlude(timestep=start, camera_id=cams[1], primitive=blob, duration=dur),
        NoiseChange(timestep=start, noise=noisy),
        NoiseChange(timestep=start + dur, noise=base),
    ]
    return MotionScript(events=events)


def patient_capsules(template, joints):
    caps = []
    for child, parent in template.parents.items():
        caps.append(Capsule(id=f"bone-{child.name}", p0=joints[parent],
                            p1=joints[child], radius=_BONE_RADII[child]))
    return caps


def _carm_render_capsules(model, pose, n_segments=24):
    """Capsule-chain proxy of the C-arm arc for depth rendering.

    Chord sagitta stays well under the 25 mm subtraction tolerance, and the
    chain ends are pulled in by the tube radius so the hemispherical caps do
    not protrude past the sampled arc span; rendered C-arm points are then
    removed by subtracting the sampled surface.
    """
    span = np.radians(model.arc_span)
    pull_in = (model.tube_cross_section / 2.0) / model.arc_radius
    half = max(span / 2.0 - pull_in, span / 4.0)
    phi = np.linspace(-half, half, n_segments + 1)
    pts_local = np.stack([model.arc_radius * np.sin(phi),
                          np.zeros_like(phi),
                          -model.arc_radius * np.cos(phi)], axis=1)
    pts = pose.apply(pts_local)
    r = model.tube_cross_section / 2.0
    return [Capsule(id=f"carm-{i}", p0=pts[i], p1=pts[i + 1], radius=r)
            for i in range(n_segments)]


def ground_truth(scene, timestep=0, script=None):
    """Exact joints, target points and obstacle states at one timestep.

    Occlusion events affect observations only; ground truth ignores them.
    """
    state = resolve_script(script, timestep)
    joints = forward_kinematics(scene.template, scene.body) + state.joint_offsets
    targets = {name: locate_target_from_joints(joints, tgt)
               for name, tgt in TARGETS.items()}
    obstacles = []
    for obs in scene.obstacles:
        off = state.obstacle_offsets.get(obs.id)
        if off is None:
            obstacles.append(obs)
        elif obs.kind == "box":
            obstacles.append(Box(obs.id, obs.center + off, obs.size))
        else:
            obstacles.append(Sphere(obs.id, obs.center + off, obs.radius))
    return GroundTruth(joints=joints, targets=targets, obstacles=obstacles)


def render_depth(scene, camera, timestep=0, script=None):
    """Nearest ray-primitive intersection depth per pixel; 0 where no hit."""
    gt = ground_truth(scene, timestep, script)
    boxes, spheres, capsules = [scene.bed], [], []
    for obs in gt.obstacles:
        (boxes if obs.kind == "box" else spheres).append(obs)
    capsules.extend(patient_capsules(scene.template, gt.joints))
    if scene.carm is not None and scene.carm_pose is not None:
        capsules.extend(_carm_render_capsules(scene.carm, scene.carm_pose))

    box_arr = np.array([np.concatenate([b.center - b.size / 2.0, b.center + b.size / 2.0])
                        for b in boxes]) if boxes else np.zeros((0, 6))
    sph_arr = np.array([np.concatenate([s.center, [s.radius]]) for s in spheres]) \
        if spheres else np.zeros((0, 4))
    cap_arr = np.array([np.concatenate([c.p0, c.p1, [c.radius]]) for c in capsules]) \
        if capsules else np.zeros((0, 7))

    k = camera.intrinsics
    uu, vv = np.meshgrid(np.arange(k.image_width, dtype=float),
                         np.arange(k.image_height, dtype=float), indexing="xy")
    dirs_cam = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy,
                         np.ones_like(uu)], axis=-1).reshape(-1, 3)
    dirs_room = dirs_cam @ camera.extrinsics.rotation
    depth = kernels.raycast(camera.center, np.ascontiguousarray(dirs_room),
                            box_arr, sph_arr, cap_arr)
    return DepthImage(width=k.image_width, height=k.image_height,
                      values=depth.reshape(k.image_height, k.image_width))


def scene_occluders(scene, camera_id, timestep=0, script=None):
    """Detector occluders for one camera: scripted primitives for that camera."""
    state = resolve_script(script, timestep)
    return list(state.occluders.get(camera_id, []))


# scene / script files -------------------------------------------------------

def _primitive_to_dict(p):
    if p.kind == "box":
        return {"kind": "box", "id": p.id, "center": p.center.tolist(),
                "size": p.size.tolist()}
    if p.kind == "sphere":
        return {"kind": "sphere", "id": p.id, "center": p.center.tolist(),
                "radius": p.radius}
    raise ValueError(f"unsupported primitive {p.kind}")


def _primitive_from_dict(doc):
    if doc["kind"] == "box":
        return Box(doc["id"], np.array(doc["center"]), np.array(doc["size"]))
    if doc["kind"] == "sphere":
        return Sphere(doc["id"], np.array(doc["center"]), doc["radius"])
    raise ValueError(f"unsupported primitive {doc['kind']}")


def save_scene(path, scene):
    doc = {
        "format_version": SCENE_FORMAT_VERSION,
        "preset": scene.preset,
        "seed": scene.seed,
        "bed": _primitive_to_dict(scene.bed),
        "body": scene.body.to_dict(),
        "obstacles": [_primitive_to_dict(o) for o in scene.obstacles],
        "markers": scene.markers.tolist(),
        "isocenter": None if scene.isocenter is None else scene.isocenter.tolist(),
        "carm_pose": None if scene.carm_pose is None else {
            "isocenter": scene.carm_pose.isocenter.tolist(),
            "angle_deg": scene.carm_pose.angle_deg,
        },
        "cameras": [{
            "id": cam.id,
            "intrinsics": {"fx": cam.intrinsics.fx, "fy": cam.intrinsics.fy,
                           "cx": cam.intrinsics.cx, "cy": cam.intrinsics.cy,
                           "image_width": cam.intrinsics.image_width,
                           "image_height": cam.intrinsics.image_height},
            "rotation": cam.extrinsics.rotation.tolist(),
            "translation": cam.extrinsics.translation.tolist(),
        } for cam in scene.cameras],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scene(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != SCENE_FORMAT_VERSION:
        raise ValueError(f"unsupported scene format_version {doc.get('format_version')}")
    cams = [CameraModel(id=c["id"], intrinsics=Intrinsics(**c["intrinsics"]),
                        extrinsics=Extrinsics(rotation=np.array(c["rotation"]),
                                              translation=np.array(c["translation"])))
            for c in doc["cameras"]]
    bed = _primitive_from_dict(doc["bed"])
    scene = Scene(preset=doc["preset"], seed=doc["seed"], cameras=cams, bed=bed,
                  template=default_template(), body=BodyParams.from_dict(doc["body"]),
                  obstacles=[_primitive_from_dict(o) for o in doc["obstacles"]],
                  markers=np.array(doc["markers"]),
                  isocenter=None if doc["isocenter"] is None else np.array(doc["isocenter"]))
    if doc["carm_pose"] is not None:
        scene.carm = CArmModel()
        scene.carm_pose = CArmPose(isocenter=np.array(doc["carm_pose"]["isocenter"]),
                                   angle_deg=doc["carm_pose"]["angle_deg"])
    return scene
