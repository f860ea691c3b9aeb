"""Virtual test run: cloud fusion, C-arm subtraction, sweep collision detection.

The C-arm is procedural geometry (a torus-segment arc plus detector and
source boxes at the arc ends) sampled into a surface point cloud. Collision
detection voxelizes the residual room cloud once into an occupancy grid
(default 100^3 cells over a 3000 x 2000 x 2000 mm crop, i.e. 30 x 20 x 20 mm
cells) and reports, per trajectory step, every cell occupied by both the
room and the posed C-arm cloud.
"""

from dataclasses import dataclass, field
import json
import time

import numpy as np

from . import kernels
from .geometry import unproject_depth

PLY_FORMAT_VERSION = 1

# maps the canonical C-arm frame into the room: the propeller axis (local y)
# aligns with the patient/table axis (room x)
_MOUNT = np.array([[0.0, 1.0, 0.0],
                   [-1.0, 0.0, 0.0],
                   [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CArmModel:
    arc_radius: float = 900.0
    arc_span: float = 190.0
    tube_cross_section: float = 120.0   # tube diameter
    detector_box: tuple = (400.0, 300.0, 150.0)
    source_box: tuple = (300.0, 300.0, 250.0)
    surface_sample_spacing: float = 10.0

    def __post_init__(self):
        if min(self.arc_radius, self.arc_span, self.tube_cross_section,
               self.surface_sample_spacing, *self.detector_box, *self.source_box) <= 0:
            raise ValueError("C-arm dimensions must be positive")


@dataclass(frozen=True)
class CArmPose:
    isocenter: np.ndarray
    angle_deg: float = 0.0
    translation: np.ndarray = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "isocenter", np.asarray(self.isocenter, dtype=float).reshape(3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    def matrix(self):
        a = np.radians(self.angle_deg)
        rot_y = np.array([[np.cos(a), 0.0, np.sin(a)],
                          [0.0, 1.0, 0.0],
                          [-np.sin(a), 0.0, np.cos(a)]])
        return _MOUNT @ rot_y

    def apply(self, local_points):
        return local_points @ self.matrix().T + self.isocenter + self.translation


@dataclass(frozen=True)
class TrajectoryProtocol:
    name: str
    steps: tuple

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if len(self.steps) < 2:
            raise ValueError("protocol needs at least 2 steps")
        angles = [s.angle_deg for s in self.steps]
        diffs = np.diff(angles)
        if not (np.all(diffs >= 0) or np.all(diffs <= 0)):
            raise ValueError("sweep angles must be monotone")


def head_scan_protocol(isocenter, n_steps=60, span=190.0):
    """Propeller sweep of `span` degrees about the patient axis at the head."""
    angles = np.linspace(-span / 2.0, span / 2.0, n_steps)
    steps = [CArmPose(isocenter=isocenter, angle_deg=float(a)) for a in angles]
    return TrajectoryProtocol(name="head-scan", steps=steps)


@dataclass(frozen=True)
class VoxelGridConfig:
    origin: np.ndarray
    extent: tuple = (3000.0, 2000.0, 2000.0)
    resolution: tuple = (100, 100, 100)

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        object.__setattr__(self, "extent", tuple(float(e) for e in self.extent))
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))
        if min(self.extent) <= 0 or min(self.resolution) <= 0:
            raise ValueError("extent and resolution must be positive")

    @property
    def cell_size(self):
        return np.array(self.extent) / np.array(self.resolution)

    @property
    def n_cells(self):
        return int(np.prod(self.resolution))

    def indices_of(self, points):
        """Unique sorted flat cell indices covered by `points` (outside dropped)."""
        if len(points) == 0:
            return np.zeros(0, dtype=np.int64)
        idx = kernels.voxel_indices(np.ascontiguousarray(points, dtype=float),
                                    self.origin, self.cell_size,
                                    np.asarray(self.resolution, dtype=np.int64))
        return np.unique(idx[idx >= 0])

    def centers_of(self, flat_indices):
        res = np.asarray(self.resolution, dtype=np.int64)
        flat = np.asarray(flat_indices, dtype=np.int64)
        k0 = flat // (res[1] * res[2])
        k1 = (flat // res[2]) % res[1]
        k2 = flat % res[2]
        ijk = np.stack([k0, k1, k2], axis=1)
        return self.origin + (ijk + 0.5) * self.cell_size


def grid_for_isocenter(isocenter, extent=(3000.0, 2000.0, 2000.0),
                       resolution=(100, 100, 100)):
    """Crop volume centered on the scan isocenter."""
    origin = np.asarray(isocenter, dtype=float) - np.asarray(extent) / 2.0
    return VoxelGridConfig(origin=origin, extent=extent, resolution=resolution)


@dataclass
class CollisionRegion:
    step: int
    voxel_index: int
    center: np.ndarray


@dataclass
class CollisionReport:
    collided: bool
    regions: list
    elapsed: float
    n_room_points: int = 0
    n_steps: int = 0

    def __post_init__(self):
        if self.collided != bool(self.regions):
            raise ValueError("collided flag must match region list")

    def collision_cells(self):
        return sorted({(r.step, r.voxel_index) for r in self.regions})

    def to_dict(self):
        return {
            "collided": self.collided,
            "elapsed_seconds": self.elapsed,
            "n_room_points": self.n_room_points,
            "n_steps": self.n_steps,
            "regions": [{"step": r.step, "voxel_index": r.voxel_index,
                         "center": r.center.tolist()} for r in self.regions],
        }


def fuse_clouds(depth_frames, stride=1, crop=None):
    """Concatenated unprojection of (camera, DepthImage) pairs, optionally cropped."""
    clouds = [unproject_depth(cam, depth, stride=stride) for cam, depth in depth_frames]
    cloud = np.vstack(clouds) if clouds else np.zeros((0, 3))
    if crop is not None and len(cloud):
        lo = crop.origin
        hi = crop.origin + np.array(crop.extent)
        keep = np.all((cloud >= lo) & (cloud < hi), axis=1)
        cloud = cloud[keep]
    return cloud


def _sample_box_local(center, dims, axes, spacing):
    """Surface samples of an oriented box: 6 face grids at <= spacing."""
    half = np.asarray(dims, dtype=float) / 2.0
    pts = []
    for ax in range(3):
        u_ax, v_ax = (ax + 1) % 3, (ax + 2) % 3
        nu = max(2, int(np.ceil(dims[u_ax] / spacing)) + 1)
        nv = max(2, int(np.ceil(dims[v_ax] / spacing)) + 1)
        u = np.linspace(-half[u_ax], half[u_ax], nu)
        v = np.linspace(-half[v_ax], half[v_ax], nv)
        uu, vv = np.meshgrid(u, v, indexing="ij")
        for sign in (-1.0, 1.0):
            face = np.zeros((nu * nv, 3))
            face[:, ax] = sign * half[ax]
            face[:, u_ax] = uu.ravel()
            face[:, v_ax] = vv.ravel()
            pts.append(face)
    local = np.vstack(pts)
    return local @ np.asarray(axes, dtype=float).T + np.asarray(center, dtype=float)


def _arc_end_frames(model):
    """(center, axes, dims) for the detector and source boxes in the local frame."""
    r = model.arc_radius
    out = []
    for sign, dims in ((1.0, model.detector_box), (-1.0, model.source_box)):
        phi = np.radians(sign * model.arc_span / 2.0)
        radial = np.array([np.sin(phi), 0.0, -np.cos(phi)])
        tangent = np.array([np.cos(phi), 0.0, np.sin(phi)]) * sign
        y_axis = np.array([0.0, 1.0, 0.0])
        axes = np.column_stack([tangent, y_axis, radial])
        center = radial * r + tangent * (dims[0] / 2.0)
        out.append((center, axes, dims))
    return out


def carm_local_samples(model):
    """Canonical-pose surface samples: torus-segment arc plus two end boxes."""
    r_arc = model.arc_radius
    r_tube = model.tube_cross_section / 2.0
    spacing = model.surface_sample_spacing
    span = np.radians(model.arc_span)
    n_phi = max(2, int(np.ceil(span * (r_arc + r_tube) / spacing)) + 1)
    n_theta = max(3, int(np.ceil(2.0 * np.pi * r_tube / spacing)))
    phi = np.linspace(-span / 2.0, span / 2.0, n_phi)
    theta = np.linspace(0.0, 2.0 * np.pi, n_theta, endpoint=False)
    pp, tt = np.meshgrid(phi, theta, indexing="ij")
    rad = r_arc + r_tube * np.cos(tt)
    pts = np.stack([rad * np.sin(pp),
                    r_tube * np.sin(tt),
                    -rad * np.cos(pp)], axis=-1).reshape(-1, 3)
    boxes = [_sample_box_local(center, dims, axes, spacing)
             for center, axes, dims in _arc_end_frames(model)]
    return np.vstack([pts] + boxes)


_local_cache = {}


def sample_carm(model, pose):
    """Room-frame surface cloud of the C-arm at one trajectory pose."""
    local = _local_cache.get(model)
    if local is None:
        local = carm_local_samples(model)
        _local_cache[model] = local
    return pose.apply(local)


def subtract_carm(room, carm_points, delta=25.0):
    """Remove room points within `delta` mm of any C-arm surface point."""
    if len(room) == 0 or len(carm_points) == 0:
        return np.asarray(room, dtype=float).reshape(-1, 3).copy()
    mask = kernels.near_mask(np.ascontiguousarray(room, dtype=float),
                             np.ascontiguousarray(carm_points, dtype=float),
                             float(delta))
    return room[~mask]


def detect_collisions(residual_room, model, protocol, grid):
    """Shared-voxel collision regions per trajectory step, sorted for diffing."""
    start = time.perf_counter()
    room_idx = grid.indices_of(residual_room)
    occupancy = np.zeros(grid.n_cells, dtype=bool)
    occupancy[room_idx] = True
    regions = []
    for step_i, pose in enumerate(protocol.steps):
        carm_idx = grid.indices_of(sample_carm(model, pose))
        hits = carm_idx[occupancy[carm_idx]]
        if len(hits):
            centers = grid.centers_of(hits)
            regions.extend(CollisionRegion(step=step_i, voxel_index=int(ix), center=c)
                           for ix, c in zip(hits, centers))
    regions.sort(key=lambda r: (r.step, r.voxel_index))
    elapsed = time.perf_counter() - start
    return CollisionReport(collided=bool(regions), regions=regions, elapsed=elapsed,
                           n_room_points=len(residual_room), n_steps=len(protocol.steps))


def run_vtr(scene, protocol, config=None):
    """Full pipeline: render+fuse the room, subtract the parked C-arm, sweep.

    `config` is a VtrConfig (defaults applied when omitted). The parked
    C-arm pose defaults to the first trajectory step.
    """
    from .scenesim import render_depth  # composition layer; avoids an import cycle

    config = config or VtrConfig()
    grid = config.grid or grid_for_isocenter(protocol.steps[0].isocenter)
    frames = [(cam, render_depth(scene, cam)) for cam in scene.cameras]
    room = fuse_clouds(frames, stride=config.stride, crop=grid)
    parked = scene.carm_pose if scene.carm_pose is not None else protocol.steps[0]
    residual = subtract_carm(room, sample_carm(config.carm, parked), delta=config.subtract_delta)
    return detect_collisions(residual, config.carm, protocol, grid)


@dataclass
class VtrConfig:
    carm: CArmModel = field(default_factory=CArmModel)
    grid: VoxelGridConfig = None
    subtract_delta: float = 25.0
    stride: int = 1


def save_report(path, report, config_doc=None):
    doc = report.to_dict()
    if config_doc is not None:
        doc["config"] = config_doc
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def render_snapshot(path, residual_room, report, grid, max_points=20000):
    """Static 3D snapshot with collision voxels highlighted in red."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig = plt.figure(figsize=(8, 6))
    ax = fig.add_subplot(111, projection="3d")
    pts = residual_room
    if len(pts) > max_points:
        pts = pts[:: len(pts) // max_points + 1]
    if len(pts):
        ax.scatter(pts[:, 0], pts[:, 1], pts[:, 2], s=1, c="steelblue", alpha=0.4)
    if report.regions:
        centers = np.array([r.center for r in report.regions])
        ax.scatter(centers[:, 0], centers[:, 1], centers[:, 2], s=30, c="red",
                   marker="s", label="collision")
        ax.legend()
    ax.set_xlabel("x mm")
    ax.set_ylabel("y mm")
    ax.set_zlabel("z mm")
    ax.set_title(f"collided={report.collided} regions={len(report.regions)}")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_ply(path, points):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"comment carmsim cloud v{PLY_FORMAT_VERSION}\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("end_header\n")
        for p in points:
            fh.write(f"{p[0]:.6g} {p[1]:.6g} {p[2]:.6g}\n")


def load_ply(path):
    with open(path) as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise ValueError(f"{path} is not a PLY file")
        n = None
        while True:
            line = fh.readline()
            if not line:
                raise ValueError("unterminated PLY header")
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            if line.strip() == "end_header":
                break
        if n is None:
            raise ValueError("missing vertex element")
        data = np.loadtxt(fh, ndmin=2) if n else np.zeros((0, 3))
    return data[:, :3]


def save_cloud_csv(path, points):
    np.savetxt(path, np.asarray(points, dtype=float).reshape(-1, 3),
               delimiter=",", fmt="%.6g", header="x,y,z", comments="")


def load_cloud_csv(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
