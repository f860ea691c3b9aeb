"""Dispatch layer for the hot numeric kernels.

The numba-compiled path is used by default; set ``CARMSIM_NUMBA=0`` in the
environment to force the pure numpy/scipy path (also used automatically when
numba is unavailable). ``benchmarks/bench_kernels.py`` compares the two.
"""

import logging
import os

from . import numpy_impl

_log = logging.getLogger(__name__)

_flag = os.environ.get("CARMSIM_NUMBA", "1").strip().lower()
_want_numba = _flag not in ("0", "false", "no", "off")

if _want_numba:
    try:
        from . import numba_impl as _impl
        _BACKEND = "numba"
    except ImportError:  # pragma: no cover - depends on environment
        _log.warning("numba unavailable, falling back to numpy kernels")
        _impl = numpy_impl
        _BACKEND = "numpy"
else:
    _impl = numpy_impl
    _BACKEND = "numpy"

raycast = _impl.raycast
voxel_indices = _impl.voxel_indices
near_mask = _impl.near_mask


def active_backend():
    """Name of the kernel backend selected at import time."""
    return _BACKEND


def warmup():
    """Trigger JIT compilation (no-op on the numpy backend)."""
    import numpy as np

    origin = np.zeros(3)
    dirs = np.array([[0.0, 0.0, 1.0]])
    boxes = np.array([[-1.0, -1.0, 1.0, 1.0, 1.0, 2.0]])
    spheres = np.array([[0.0, 0.0, 5.0, 1.0]])
    capsules = np.array([[0.0, 0.0, 8.0, 0.0, 1.0, 8.0, 0.5]])
    raycast(origin, dirs, boxes, spheres, capsules)
    pts = np.array([[0.5, 0.5, 0.5]])
    voxel_indices(pts, origin, np.ones(3), np.array([4, 4, 4], dtype=np.int64))
    near_mask(pts, pts, 1.0)
