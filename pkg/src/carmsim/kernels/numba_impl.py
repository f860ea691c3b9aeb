"""Numba-compiled hot kernels.

Same contracts as :mod:`carmsim.kernels.numpy_impl`. Compiled lazily with
on-disk caching so repeat runs skip JIT cost.
"""

import math

import numpy as np
from numba import njit

_EPS = 1e-9


@njit(cache=True)
def _box_hit(ox, oy, oz, dx, dy, dz, lo0, lo1, lo2, hi0, hi1, hi2):
    tmin = -1e300
    tmax = 1e300
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    lo = (lo0, lo1, lo2)
    hi = (hi0, hi1, hi2)
    for ax in range(3):
        if abs(d[ax]) < 1e-300:
            if o[ax] < lo[ax] or o[ax] > hi[ax]:
                return 0.0
        else:
            inv = 1.0 / d[ax]
            t1 = (lo[ax] - o[ax]) * inv
            t2 = (hi[ax] - o[ax]) * inv
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tmin:
                tmin = t1
            if t2 < tmax:
                tmax = t2
    lo_t = tmin if tmin > _EPS else _EPS
    if tmax < lo_t:
        return 0.0
    t = tmin if tmin > _EPS else tmax
    if t <= _EPS:
        return 0.0
    return t


@njit(cache=True)
def _sphere_hit(ox, oy, oz, dx, dy, dz, cx, cy, cz, r):
    mx = ox - cx
    my = oy - cy
    mz = oz - cz
    a = dx * dx + dy * dy + dz * dz
    b = 2.0 * (mx * dx + my * dy + mz * dz)
    c = mx * mx + my * my + mz * mz - r * r
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return 0.0
    sq = math.sqrt(disc)
    t = (-b - sq) / (2.0 * a)
    if t <= _EPS:
        t = (-b + sq) / (2.0 * a)
    if t <= _EPS:
        return 0.0
    return t


@njit(cache=True)
def _capsule_hit(ox, oy, oz, dx, dy, dz, p0x, p0y, p0z, p1x, p1y, p1z, r):
    ax = p1x - p0x
    ay = p1y - p0y
    az = p1z - p0z
    length = math.sqrt(ax * ax + ay * ay + az * az)
    if length < 1e-12:
        return _sphere_hit(ox, oy, oz, dx, dy, dz, p0x, p0y, p0z, r)
    ux = ax / length
    uy = ay / length
    uz = az / length
    mx = ox - p0x
    my = oy - p0y
    mz = oz - p0z
    md = mx * ux + my * uy + mz * uz
    dd = dx * ux + dy * uy + dz * uz
    mpx = mx - md * ux
    mpy = my - md * uy
    mpz = mz - md * uz
    dpx = dx - dd * ux
    dpy = dy - dd * uy
    dpz = dz - dd * uz
    a = dpx * dpx + dpy * dpy + dpz * dpz
    b = 2.0 * (mpx * dpx + mpy * dpy + mpz * dpz)
    c = mpx * mpx + mpy * mpy + mpz * mpz - r * r
    best = 0.0
    if a > 1e-300:
        disc = b * b - 4.0 * a * c
        if disc >= 0.0:
            sq = math.sqrt(disc)
            for sign in (-1.0, 1.0):
                t = (-b + sign * sq) / (2.0 * a)
                if t > _EPS:
                    s = md + t * dd
                    if 0.0 <= s <= length and (best == 0.0 or t < best):
                        best = t
    t0 = _sphere_hit(ox, oy, oz, dx, dy, dz, p0x, p0y, p0z, r)
    if t0 > _EPS and (best == 0.0 or t0 < best):
        best = t0
    t1 = _sphere_hit(ox, oy, oz, dx, dy, dz, p1x, p1y, p1z, r)
    if t1 > _EPS and (best == 0.0 or t1 < best):
        best = t1
    return best


@njit(cache=True)
def raycast(origin, dirs, boxes, spheres, capsules):
    n = dirs.shape[0]
    out = np.zeros(n)
    ox, oy, oz = origin[0], origin[1], origin[2]
    for i in range(n):
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        best = 0.0
        for b in range(boxes.shape[0]):
            t = _box_hit(ox, oy, oz, dx, dy, dz,
                         boxes[b, 0], boxes[b, 1], boxes[b, 2],
                         boxes[b, 3], boxes[b, 4], boxes[b, 5])
            if t > 0.0 and (best == 0.0 or t < best):
                best = t
        for s in range(spheres.shape[0]):
            t = _sphere_hit(ox, oy, oz, dx, dy, dz,
                            spheres[s, 0], spheres[s, 1], spheres[s, 2],
                            spheres[s, 3])
            if t > 0.0 and (best == 0.0 or t < best):
                best = t
        for k in range(capsules.shape[0]):
            t = _capsule_hit(ox, oy, oz, dx, dy, dz,
                             capsules[k, 0], capsules[k, 1], capsules[k, 2],
                             capsules[k, 3], capsules[k, 4], capsules[k, 5],
                             capsules[k, 6])
            if t > 0.0 and (best == 0.0 or t < best):
                best = t
        out[i] = best
    return out


@njit(cache=True)
def voxel_indices(points, origin, cell, dims):
    n = points.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        k0 = np.int64(math.floor((points[i, 0] - origin[0]) / cell[0]))
        k1 = np.int64(math.floor((points[i, 1] - origin[1]) / cell[1]))
        k2 = np.int64(math.floor((points[i, 2] - origin[2]) / cell[2]))
        if (0 <= k0 < dims[0]) and (0 <= k1 < dims[1]) and (0 <= k2 < dims[2]):
            out[i] = (k0 * dims[1] + k1) * dims[2] + k2
        else:
            out[i] = -1
    return out


@njit(cache=True)
def _cell_hash(cx, cy, cz):
    h = cx * np.int64(73856093) ^ cy * np.int64(19349663) ^ cz * np.int64(83492791)
    return h


@njit(cache=True)
def near_mask(points, ref, delta):
    n = points.shape[0]
    m = ref.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    if m == 0 or n == 0:
        return out
    inv = 1.0 / delta
    hashes = np.empty(m, dtype=np.int64)
    for j in range(m):
        cx = np.int64(math.floor(ref[j, 0] * inv))
        cy = np.int64(math.floor(ref[j, 1] * inv))
        cz = np.int64(math.floor(ref[j, 2] * inv))
        hashes[j] = _cell_hash(cx, cy, cz)
    order = np.argsort(hashes)
    sorted_hash = hashes[order]
    d2 = delta * delta
    for i in range(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        cx = np.int64(math.floor(px * inv))
        cy = np.int64(math.floor(py * inv))
        cz = np.int64(math.floor(pz * inv))
        found = False
        for ox in range(-1, 2):
            if found:
                break
            for oy in range(-1, 2):
                if found:
                    break
                for oz in range(-1, 2):
                    h = _cell_hash(cx + ox, cy + oy, cz + oz)
                    lo = np.searchsorted(sorted_hash, h, side="left")
                    hi = np.searchsorted(sorted_hash, h, side="right")
                    for idx in range(lo, hi):
                        j = order[idx]
                        dx = ref[j, 0] - px
                        dy = ref[j, 1] - py
                        dz = ref[j, 2] - pz
                        if dx * dx + dy * dy + dz * dz <= d2:
                            found = True
                            break
                    if found:
                        break
        out[i] = found
    return out
