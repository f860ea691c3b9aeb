"""Pure numpy/scipy implementations of the hot kernels.

Reference path: always available, vectorised per primitive. The numba
implementations in :mod:`carmsim.kernels.numba_impl` must agree with these
bit-for-bit on voxel indices and to float tolerance on ray depths.
"""

import numpy as np
from scipy.spatial import cKDTree

_EPS = 1e-9


def raycast(origin, dirs, boxes, spheres, capsules):
    """First-hit parameter t along each ray; 0.0 marks a miss.

    Rays are ``origin + t * dirs[i]`` with unnormalised direction vectors,
    so t is measured in units of the direction vector (z-depth when dirs
    come from K^-1 pixel rays). boxes: (B,6) min/max corners; spheres:
    (S,4) center+radius; capsules: (C,7) p0, p1, radius.
    """
    n = dirs.shape[0]
    best = np.full(n, np.inf)

    for b in range(boxes.shape[0]):
        lo, hi = boxes[b, :3], boxes[b, 3:]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origin) / dirs
            t2 = (hi - origin) / dirs
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        # axis-parallel rays: origin must sit inside the slab
        par = np.abs(dirs) < 1e-300
        inside = (origin >= lo) & (origin <= hi)
        bad = np.any(par & ~inside, axis=1)
        hit = (tmax >= np.maximum(tmin, _EPS)) & ~bad
        t = np.where(tmin > _EPS, tmin, tmax)
        upd = hit & (t > _EPS) & (t < best)
        best[upd] = t[upd]

    for s in range(spheres.shape[0]):
        c, r = spheres[s, :3], spheres[s, 3]
        t = _ray_sphere(origin, dirs, c, r)
        upd = (t > _EPS) & (t < best)
        best[upd] = t[upd]

    for k in range(capsules.shape[0]):
        p0, p1, r = capsules[k, :3], capsules[k, 3:6], capsules[k, 6]
        t = _ray_capsule(origin, dirs, p0, p1, r)
        upd = (t > _EPS) & (t < best)
        best[upd] = t[upd]

    best[~np.isfinite(best)] = 0.0
    return best


def _ray_sphere(origin, dirs, center, radius):
    m = origin - center
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2.0 * dirs @ m
    c = m @ m - radius * radius
    disc = b * b - 4.0 * a * c
    ok = disc >= 0.0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = (-b - sq) / (2.0 * a)
    t1 = (-b + sq) / (2.0 * a)
    t = np.where(t0 > _EPS, t0, t1)
    return np.where(ok & (t > _EPS), t, np.inf)


def _ray_capsule(origin, dirs, p0, p1, radius):
    axis = p1 - p0
    length = np.linalg.norm(axis)
    if length < 1e-12:
        return _ray_sphere(origin, dirs, p0, radius)
    u = axis / length
    m = origin - p0
    md = m @ u
    dd = dirs @ u
    mp = m - md * u
    dp = dirs - dd[:, None] * u
    a = np.einsum("ij,ij->i", dp, dp)
    b = 2.0 * dp @ mp
    c = mp @ mp - radius * radius

    t_cyl = np.full(dirs.shape[0], np.inf)
    quad = a > 1e-300
    disc = b * b - 4.0 * a * c
    ok = quad & (disc >= 0.0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        r0 = (-b - sq) / (2.0 * a)
        r1 = (-b + sq) / (2.0 * a)
    for root in (r0, r1):
        s = md + root * dd  # axial coordinate of the hit
        good = ok & (root > _EPS) & (s >= 0.0) & (s <= length) & (root < t_cyl)
        t_cyl[good] = root[good]

    t0 = _ray_sphere(origin, dirs, p0, radius)
    t1 = _ray_sphere(origin, dirs, p1, radius)
    return np.minimum(t_cyl, np.minimum(t0, t1))


def voxel_indices(points, origin, cell, dims):
    """Flat voxel index per point, -1 for points outside the grid.

    Cells are half-open: [origin + k*cell, origin + (k+1)*cell).
    """
    ijk = np.floor((points - origin) / cell).astype(np.int64)
    inside = np.all((ijk >= 0) & (ijk < dims), axis=1)
    flat = (ijk[:, 0] * dims[1] + ijk[:, 1]) * dims[2] + ijk[:, 2]
    flat[~inside] = -1
    return flat


def near_mask(points, ref, delta):
    """True for each point within delta (inclusive) of any ref point."""
    if len(ref) == 0 or len(points) == 0:
        return np.zeros(len(points), dtype=bool)
    tree = cKDTree(ref)
    dist, _ = tree.query(points, k=1, distance_upper_bound=delta * (1 + 1e-12))
    return dist <= delta
