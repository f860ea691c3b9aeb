import numpy as np
import pytest

from carmsim import kernels
from carmsim.geometry import CameraModel, Intrinsics, look_at


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    kernels.warmup()


def make_rig(focal=420.0, width=640, height=480, positions=None, target=(0.0, 0.0, 900.0)):
    intr = Intrinsics(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0,
                      image_width=width, image_height=height)
    positions = positions or [("c0", (2000.0, -1600.0, 2600.0)),
                              ("c1", (2000.0, 1600.0, 2600.0)),
                              ("c2", (-2600.0, 0.0, 2600.0))]
    return {cid: CameraModel(id=cid, intrinsics=intr, extrinsics=look_at(pos, target))
            for cid, pos in positions}


@pytest.fixture
def rig():
    return make_rig()


@pytest.fixture
def spread_rig():
    positions = []
    for cid, ang in (("c0", 90.0), ("c1", 210.0), ("c2", 330.0)):
        a = np.radians(ang)
        positions.append((cid, (2300.0 * np.cos(a), 2300.0 * np.sin(a), 2600.0)))
    return make_rig(focal=600.0, positions=positions)
