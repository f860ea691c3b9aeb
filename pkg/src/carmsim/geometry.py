"""Camera models, projection, PnP extrinsic calibration and depth unprojection.

Conventions (OpenCV-style):
  - Room frame: x along the table (head towards +x), y lateral, z up, mm.
  - Camera frame: x right, y down, z forward; pixel = K (R P_room + t).
  - Pixels are assumed pre-undistorted; no lens distortion model.
"""

from dataclasses import dataclass
import json

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .errors import DegenerateConfiguration, NoConvergence, NonPositiveDepth

MIN_DEPTH_MM = 1e-9

RIG_FORMAT_VERSION = 1
DEPTH_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    image_width: int
    image_height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.image_width):
            raise ValueError("cx outside image")
        if not (0 <= self.cy < self.image_height):
            raise ValueError("cy outside image")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def inv_matrix(self):
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Extrinsics:
    """Rigid room->camera transform: X_cam = rotation @ X_room + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("rotation not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant must be +1")


@dataclass(frozen=True)
class CameraModel:
    id: str
    intrinsics: Intrinsics
    extrinsics: Extrinsics

    @property
    def center(self):
        """Camera position in the room frame."""
        e = self.extrinsics
        return -e.rotation.T @ e.translation


@dataclass(frozen=True)
class Correspondence:
    point_room: np.ndarray
    point_pixel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "point_room",
                           np.asarray(self.point_room, dtype=float).reshape(3))
        object.__setattr__(self, "point_pixel",
                           np.asarray(self.point_pixel, dtype=float).reshape(2))


@dataclass
class DepthImage:
    """Per-pixel depth in mm (z-depth in the camera frame); 0 marks invalid."""

    width: int
    height: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(self.height, self.width)
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("depth values must be finite and non-negative")
        self.values = v


def project(camera, point_room):
    """Pixel projection K(R P + t) of one point (3,) or a batch (N, 3).

    Raises NonPositiveDepth when any point has camera-frame depth below
    MIN_DEPTH_MM. The result may lie outside image bounds.
    """
    e = camera.extrinsics
    pts = np.asarray(point_room, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    cam = pts @ e.rotation.T + e.translation
    z = cam[:, 2]
    if np.any(z <= MIN_DEPTH_MM):
        raise NonPositiveDepth(f"depth {z.min():.3g} mm <= {MIN_DEPTH_MM} mm")
    k = camera.intrinsics
    u = k.fx * cam[:, 0] / z + k.cx
    v = k.fy * cam[:, 1] / z + k.cy
    out = np.stack([u, v], axis=1)
    return out[0] if single else out


def reprojection_error(camera, pixel, point_room):
    """Pixel distance between an observation and the projection of a 3D point."""
    return float(np.linalg.norm(project(camera, point_room) - np.asarray(pixel, dtype=float)))


def camera_depth(camera, points_room):
    """Camera-frame z of one point or a batch, without projecting."""
    e = camera.extrinsics
    pts = np.atleast_2d(np.asarray(points_room, dtype=float))
    z = pts @ e.rotation[2] + e.translation[2]
    return float(z[0]) if np.asarray(points_room).ndim == 1 else z


def in_image(camera, pixel):
    k = camera.intrinsics
    u, v = pixel
    return 0 <= u < k.image_width and 0 <= v < k.image_height


def look_at(position, target, up=(0.0, 0.0, 1.0)):
    """Extrinsics for a camera at `position` looking at `target` (z forward, y down)."""
    position = np.asarray(position, dtype=float)
    f = np.asarray(target, dtype=float) - position
    f = f / np.linalg.norm(f)
    up = np.asarray(up, dtype=float)
    if abs(f @ up) > 0.999 * np.linalg.norm(up):
        up = np.array([1.0, 0.0, 0.0])
    r = np.cross(f, up)
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    rot = np.stack([r, d, f])
    return Extrinsics(rotation=rot, translation=-rot @ position)


def _pnp_dlt(points_room, pixels_norm):
    """Direct linear estimate of [R|t] from normalized image coordinates."""
    centroid = points_room.mean(axis=0)
    spread = np.linalg.norm(points_room - centroid, axis=1).mean()
    scale = np.sqrt(3.0) / max(spread, 1e-12)
    pn = (points_room - centroid) * scale

    n = len(pn)
    a = np.zeros((2 * n, 12))
    ph = np.column_stack([pn, np.ones(n)])
    a[0::2, 0:4] = ph
    a[0::2, 8:12] = -pixels_norm[:, 0:1] * ph
    a[1::2, 4:8] = ph
    a[1::2, 8:12] = -pixels_norm[:, 1:2] * ph
    _, _, vt = np.linalg.svd(a)
    g = vt[-1].reshape(3, 4)

    # undo 3D normalization: P' = scale * (P - centroid)
    m = g[:, :3] * scale
    t = g[:, 3] - g[:, :3] @ (scale * centroid)
    depths = points_room @ m[2] + t[2]
    if np.median(depths) < 0:
        m, t = -m, -t
    u, s, vt = np.linalg.svd(m)
    d = np.diag([1.0, 1.0, np.linalg.det(u @ vt)])
    rot = u @ d @ vt
    lam = s.sum() / 3.0
    return rot, t / lam


# trust-region step scaling: rotation vector in radians vs translation in mm
_PNP_X_SCALE = np.array([1.0, 1.0, 1.0, 1000.0, 1000.0, 1000.0])
_PNP_INLIER_GATE_PX = 3.0
_PNP_CONSENSUS_MAX_PAIRS = 600


def _pnp_residual_fn(pts, pix, kmat):
    def residuals(x):
        rot = Rotation.from_rotvec(x[:3]).as_matrix()
        cam = pts @ rot.T + x[3:]
        z = np.maximum(cam[:, 2], MIN_DEPTH_MM)
        proj = (cam / z[:, None]) @ kmat.T
        return (proj[:, :2] - pix).ravel()
    return residuals


def _pnp_refine(pts, pix, kmat, x0, loss, max_iter):
    res = least_squares(_pnp_residual_fn(pts, pix, kmat), x0, method="trf",
                        loss=loss, f_scale=1.0, xtol=1e-8, ftol=1e-10,
                        gtol=1e-12, max_nfev=max_iter, x_scale=_PNP_X_SCALE)
    if res.status == 0:
        raise NoConvergence("PnP refinement hit the iteration cap")
    return res.x


def _pnp_consensus(pts, pn, pix, kmat, x_huber):
    """Exhaustive leave-two-out DLT consensus for gross-outlier rejection.

    Candidate poses are scored by least-median-of-squares over all points
    (no noise estimate needed); inliers of the winning pose are gated at
    2.5 robust sigmas with a small absolute floor.
    """
    from itertools import combinations

    n = len(pts)
    candidates = [x_huber]
    pairs = list(combinations(range(n), 2))
    if len(pairs) > _PNP_CONSENSUS_MAX_PAIRS:
        # restrict exclusions to the worst residuals under the huber pose
        rn = np.linalg.norm(_pnp_residual_fn(pts, pix, kmat)(x_huber).reshape(-1, 2), axis=1)
        worst = np.argsort(rn)[-10:]
        pairs = list(combinations(sorted(worst), 2))
    for i, j in pairs:
        keep = np.ones(n, dtype=bool)
        keep[[i, j]] = False
        if keep.sum() < 6:
            continue
        try:
            rot, t = _pnp_dlt(pts[keep], pn[keep])
            x = np.concatenate([Rotation.from_matrix(rot).as_rotvec(), t])
            # minimal-subset DLT is noise-sensitive; polish on the subset
            x = _pnp_refine(pts[keep], pix[keep], kmat, x, "linear", 50)
        except (np.linalg.LinAlgError, NoConvergence):
            continue
        candidates.append(x)

    best = None
    for x in candidates:
        rn = np.linalg.norm(_pnp_residual_fn(pts, pix, kmat)(x).reshape(-1, 2), axis=1)
        med = float(np.median(rn ** 2))
        if best is None or med < best[0]:
            best = (med, x, rn)
    med, x, rn = best
    sigma = 1.4826 * (1.0 + 5.0 / max(n - 6, 1)) * np.sqrt(med)
    gate = max(2.5 * sigma, _PNP_INLIER_GATE_PX)
    return x, rn <= gate


def solve_pnp(correspondences, intrinsics, robust=False, max_iter=200):
    """Recover camera extrinsics from >= 6 2D-3D marker correspondences.

    Direct linear initialization on normalized coordinates followed by
    trust-region refinement of the pixel reprojection residuals. With
    robust=True a Huber pass plus an exhaustive leave-two-out consensus
    identifies gross outliers, and the pose is re-refined on the inliers.
    """
    if len(correspondences) < 6:
        raise ValueError("need at least 6 correspondences")
    pts = np.array([c.point_room for c in correspondences])
    pix = np.array([c.point_pixel for c in correspondences])

    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[-1] < 1e-6 * sv[0]:
        raise DegenerateConfiguration("3D points are collinear or coplanar")

    kinv = intrinsics.inv_matrix
    pn = (np.column_stack([pix, np.ones(len(pix))]) @ kinv.T)[:, :2]
    rot0, t0 = _pnp_dlt(pts, pn)
    kmat = intrinsics.matrix
    x0 = np.concatenate([Rotation.from_matrix(rot0).as_rotvec(), t0])

    if not robust:
        x = _pnp_refine(pts, pix, kmat, x0, "linear", max_iter)
        return Extrinsics(rotation=Rotation.from_rotvec(x[:3]).as_matrix(),
                          translation=x[3:])

    x = _pnp_refine(pts, pix, kmat, x0, "huber", max_iter)
    x, inliers = _pnp_consensus(pts, pn, pix, kmat, x)
    if inliers.sum() >= 6:
        x = _pnp_refine(pts[inliers], pix[inliers], kmat, x, "linear", max_iter)
    return Extrinsics(rotation=Rotation.from_rotvec(x[:3]).as_matrix(),
                      translation=x[3:])


def unproject_depth(camera, depth, stride=1):
    """Room-frame point cloud from a depth image, sampling every `stride` pixels.

    Zero depths are skipped. Returns an (N, 3) array (possibly empty).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    vals = depth.values[::stride, ::stride]
    vv, uu = np.nonzero(vals > 0)
    if len(vv) == 0:
        return np.zeros((0, 3))
    d = vals[vv, uu]
    u = uu * stride
    v = vv * stride
    k = camera.intrinsics
    x = (u - k.cx) / k.fx * d
    y = (v - k.cy) / k.fy * d
    cam = np.column_stack([x, y, d])
    e = camera.extrinsics
    return (cam - e.translation) @ e.rotation


def save_rig(path, cameras):
    doc = {"format_version": RIG_FORMAT_VERSION, "cameras": []}
    for cam in cameras:
        k = cam.intrinsics
        doc["cameras"].append({
            "id": cam.id,
            "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                           "image_width": k.image_width,
                           "image_height": k.image_height},
            "rotation": cam.extrinsics.rotation.tolist(),
            "translation": cam.extrinsics.translation.tolist(),
        })
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_rig(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != RIG_FORMAT_VERSION:
        raise ValueError(f"unsupported rig format_version: {doc.get('format_version')}")
    cams = []
    for entry in doc["cameras"]:
        cams.append(CameraModel(
            id=entry["id"],
            intrinsics=Intrinsics(**entry["intrinsics"]),
            extrinsics=Extrinsics(rotation=np.array(entry["rotation"]),
                                  translation=np.array(entry["translation"])),
        ))
    return cams


def save_depth(path, depth):
    """CSV grid of mm values preceded by a one-line text header."""
    with open(path, "w") as fh:
        fh.write(f"depth v{DEPTH_FORMAT_VERSION} width={depth.width} height={depth.height}\n")
        np.savetxt(fh, depth.values, fmt="%.6g", delimiter=",")


def load_depth(path):
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "depth" or header[1] != f"v{DEPTH_FORMAT_VERSION}":
            raise ValueError(f"bad depth header in {path}")
        width = int(header[2].split("=")[1])
        height = int(header[3].split("=")[1])
        values = np.loadtxt(fh, delimiter=",", ndmin=2)
    return DepthImage(width=width, height=height, values=values)
