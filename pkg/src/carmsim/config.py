"""Run configuration: nested dataclasses with strict schema validation.

Defaults match the published workflow parameters (window 25, stat size 10,
alpha 0.05, 100^3 grid over a 3000 x 2000 x 2000 mm crop). Unknown keys in a
config document are rejected. The CARMSIM_CONFIG environment variable names
a default config file used when no explicit --config is given.
"""

from dataclasses import asdict, dataclass, field, fields
import json
import os

from .errors import ConfigError

CONFIG_ENV_VAR = "CARMSIM_CONFIG"


def _from_dict(cls, doc, path="config"):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object, got {type(doc).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        f = known[name]
        sub = _SECTIONS.get(f.type if isinstance(f.type, str) else f.type)
        if sub is not None:
            kwargs[name] = _from_dict(sub, value, f"{path}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class SceneSection:
    preset: str = "lab"
    seed: int = 0
    marker_sigma: float = 0.3


@dataclass(frozen=True)
class NoiseSection:
    pixel_sigma: float = 2.0
    dropout_prob: float = 0.2
    outlier_prob: float = 0.0
    outlier_magnitude: float = 0.0


@dataclass(frozen=True)
class TriangulationSection:
    huber_delta: float = 2.0
    max_iter: int = 100
    cond_max: float = 1e8
    error_floor: float = 0.1


@dataclass(frozen=True)
class TemporalSection:
    window: int = 25
    stat_size: int = 10
    alpha: float = 0.05
    rho_min: float = 0.5
    vis_min: float = 0.5
    reproj_max: float = 8.0
    motion_min: float = 50.0


@dataclass(frozen=True)
class BodyfitSection:
    score_floor: float = 0.1
    max_iter: int = 200


@dataclass(frozen=True)
class VtrSection:
    extent: tuple = (3000.0, 2000.0, 2000.0)
    resolution: tuple = (100, 100, 100)
    subtract_delta: float = 25.0
    stride: int = 1
    n_steps: int = 60
    span: float = 190.0
    snapshot: bool = False


@dataclass(frozen=True)
class RunConfig:
    scene: SceneSection = field(default_factory=SceneSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    triangulation: TriangulationSection = field(default_factory=TriangulationSection)
    temporal: TemporalSection = field(default_factory=TemporalSection)
    bodyfit: BodyfitSection = field(default_factory=BodyfitSection)
    vtr: VtrSection = field(default_factory=VtrSection)
    n_frames: int = 30
    targets: tuple = ("head_top", "right_radial_artery")
    use_calibrated_rig: bool = True
    output_dir: str = "out"
    verbosity: int = 1

    def to_dict(self):
        return asdict(self)


_SECTIONS = {
    "SceneSection": SceneSection, SceneSection: SceneSection,
    "NoiseSection": NoiseSection, NoiseSection: NoiseSection,
    "TriangulationSection": TriangulationSection, TriangulationSection: TriangulationSection,
    "TemporalSection": TemporalSection, TemporalSection: TemporalSection,
    "BodyfitSection": BodyfitSection, BodyfitSection: BodyfitSection,
    "VtrSection": VtrSection, VtrSection: VtrSection,
}


def load_config(path=None, overrides=None):
    """RunConfig from a JSON file plus dotted-key overrides.

    With no path, CARMSIM_CONFIG is consulted; failing that, defaults apply.
    Overrides are ("section.key", value) pairs from CLI flags.
    """
    doc = {}
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    for key, value in (overrides or []):
        parts = key.split(".")
        node = doc
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return _from_dict(RunConfig, doc)
