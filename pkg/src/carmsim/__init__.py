"""carmsim: multi-camera perception core for automated C-arm CBCT workflows.

Library and CLI covering camera calibration, confidence-weighted multi-view
triangulation, drift-aware temporal consolidation, parametric body fitting
with anatomical-target localization, and virtual test runs with voxel-grid
collision detection, validated against a built-in synthetic scene oracle.
"""

__version__ = "0.1.0"

from .geometry import CameraModel, Extrinsics, Intrinsics  # noqa: F401
from .observation import JointId, NoiseConfig, Observation2D  # noqa: F401
from .triangulation import Candidate3D, ScoredKeypoint3D  # noqa: F401
from .temporal import DriftWindow, ReliabilityThresholds  # noqa: F401
