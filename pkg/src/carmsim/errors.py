"""Exception hierarchy for the carmsim package."""


class CarmsimError(Exception):
    """Base class for all carmsim errors."""


class NonPositiveDepth(CarmsimError):
    """Point lies behind or on the camera plane (z_cam <= 1e-9 mm)."""


class DegenerateConfiguration(CarmsimError):
    """Correspondence geometry too thin for pose estimation."""


class NoConvergence(CarmsimError):
    """Iterative solver hit its iteration cap before meeting tolerance."""


class NearParallelRays(CarmsimError):
    """Triangulation rays geometrically uninformative (ill-conditioned)."""


class InsufficientViews(CarmsimError):
    """Fewer than two cameras observed the joint at this timestep."""


class EmptySample(CarmsimError):
    """Statistical test received an empty sample."""


class InsufficientHistory(CarmsimError):
    """Drift window does not yet hold enough entries for the test."""


class InsufficientKeypoints(CarmsimError):
    """Too few sufficiently-scored keypoints to fit the body model."""


class FrameDegenerate(CarmsimError):
    """Defining joints of an anatomical target coincide."""


class NoMatches(CarmsimError):
    """Metric received no matched prediction/ground-truth pairs."""


class MissingNormalizerJoints(CarmsimError):
    """PCK normalizer joints (shoulders/hips) absent from ground truth."""


class UnknownPreset(CarmsimError):
    """Scene preset name not recognised."""


class ConfigError(CarmsimError):
    """Run configuration failed schema validation."""
