"""Per-joint temporal consolidation of scored 3D keypoints.

A rolling window per joint feeds a concept-drift detector: two-sample
two-sided Kolmogorov-Smirnov tests on each of six marginals (x, y, z,
confidence, visibility, inverse reprojection error), Bonferroni-corrected.
On drift the window is partitioned into pre/post concepts; reliability
gating and motion/score rules select the concept, and the highest-composite
entry of the adopted concept is returned.

Exact KS p-values use the stable lattice-path recursion
B(i, j) = (i * B(i-1, j) + j * B(i, j-1)) / (i + j) over paths constrained
to |i*n - j*m| < D*m*n, switching to the asymptotic Kolmogorov series for
large samples.
"""

from collections import deque
from dataclasses import dataclass
import logging
import math

import numpy as np

from .errors import EmptySample, InsufficientHistory

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 25
DEFAULT_STAT_SIZE = 10
DEFAULT_ALPHA = 0.05
MARGINALS = ("x", "y", "z", "rho", "vis", "inv_err")
_EXACT_MAX_PRODUCT = 10_000  # m*n above this switches to the asymptotic tail


@dataclass(frozen=True)
class ReliabilityThresholds:
    rho_min: float = 0.5
    vis_min: float = 0.5
    reproj_max: float = 8.0
    motion_min: float = 50.0

    def __post_init__(self):
        for name in ("rho_min", "vis_min", "reproj_max", "motion_min"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class ConceptPartition:
    pre: list
    post: list
    drift_detected: bool
    drift_marginal: str | None
    p_values: dict


class DriftWindow:
    """Ring buffer of the most recent scored keypoints for one joint."""

    def __init__(self, joint, window=DEFAULT_WINDOW, stat_size=DEFAULT_STAT_SIZE,
                 alpha=DEFAULT_ALPHA):
        if stat_size > window / 2:
            raise ValueError("stat_size must be <= window / 2")
        self.joint = joint
        self.window = window
        self.stat_size = stat_size
        self.alpha = alpha
        self._buffer = deque(maxlen=window)

    def push(self, entry):
        if self._buffer and entry.timestep <= self._buffer[-1].timestep:
            raise ValueError("entries must arrive in increasing timestep order")
        self._buffer.append(entry)

    def entries(self):
        return list(self._buffer)

    def __len__(self):
        return len(self._buffer)


def _ks_statistic(a, b):
    a = np.sort(a)
    b = np.sort(b)
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / len(a)
    cdf_b = np.searchsorted(b, pooled, side="right") / len(b)
    return float(np.max(np.abs(cdf_a - cdf_b)))


def _exact_p_value(d, m, n):
    # D values live on the lattice k / (m*n); recover the integer threshold
    h = int(round(d * m * n))
    if h <= 0:
        return 1.0
    prev = np.zeros(n + 1)
    prev[0] = 1.0  # B(0, 0)
    for j in range(1, n + 1):
        prev[j] = prev[j - 1] if abs(j * m) < h else 0.0
    for i in range(1, m + 1):
        cur = np.zeros(n + 1)
        cur[0] = prev[0] if abs(i * n) < h else 0.0
        for j in range(1, n + 1):
            if abs(i * n - j * m) < h:
                cur[j] = (i * prev[j] + j * cur[j - 1]) / (i + j)
            else:
                cur[j] = 0.0
        prev = cur
    return float(min(max(1.0 - prev[n], 0.0), 1.0))


def _asymptotic_p_value(d, m, n):
    lam = d * math.sqrt(m * n / (m + n))
    if lam <= 0:
        return 1.0
    total = 0.0
    for k in range(1, 101):
        total += (-1) ** (k - 1) * math.exp(-2.0 * k * k * lam * lam)
    return float(min(max(2.0 * total, 0.0), 1.0))


def ks_two_sample(sample_a, sample_b):
    """Two-sided two-sample KS test: (statistic D, p-value)."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise EmptySample("both samples must be non-empty")
    d = _ks_statistic(a, b)
    m, n = len(a), len(b)
    if m * n <= _EXACT_MAX_PRODUCT:
        p = _exact_p_value(d, m, n)
    else:
        p = _asymptotic_p_value(d, m, n)
    return d, p


def _feature_matrix(entries):
    return np.array([[e.position[0], e.position[1], e.position[2],
                      e.rho, e.vis, e.inv_err] for e in entries])


def detect_drift(window):
    """KS test per marginal between the oldest and newest stat_size blocks.

    Drift is declared when the smallest marginal p-value falls below
    alpha / 6 (Bonferroni over the six marginals); the partition boundary
    sits at the start of the newest block.
    """
    entries = window.entries()
    n_s = window.stat_size
    if len(entries) < 2 * n_s:
        raise InsufficientHistory(f"{len(entries)} entries < {2 * n_s}")
    feats = _feature_matrix(entries)
    ref = feats[:n_s]
    test = feats[-n_s:]
    p_values = {}
    for dim, name in enumerate(MARGINALS):
        _, p = ks_two_sample(ref[:, dim], test[:, dim])
        p_values[name] = p
    worst = min(p_values, key=p_values.get)
    detected = p_values[worst] < window.alpha / len(MARGINALS)
    if detected:
        log.info("drift: joint=%s t=%s marginal=%s p=%.3g",
                 getattr(window.joint, "name", window.joint),
                 entries[-1].timestep, worst, p_values[worst])
        return ConceptPartition(pre=entries[:-n_s], post=entries[-n_s:],
                                drift_detected=True, drift_marginal=worst,
                                p_values=p_values)
    return ConceptPartition(pre=entries, post=[], drift_detected=False,
                            drift_marginal=None, p_values=p_values)


def concept_reliable(entries, thresholds):
    """Median-based reliability gate over a concept's score vectors."""
    if not entries:
        raise ValueError("empty concept")
    rho = np.median([e.rho for e in entries])
    vis = np.median([e.vis for e in entries])
    err = np.median([1.0 / e.inv_err for e in entries])
    return bool(rho >= thresholds.rho_min and vis >= thresholds.vis_min
                and err <= thresholds.reproj_max)


def composite_score(entry, thresholds):
    return entry.rho * entry.vis * min(1.0, entry.inv_err * thresholds.reproj_max)


def _median_composite(entries, thresholds):
    return float(np.median([composite_score(e, thresholds) for e in entries]))


def _centroid(entries):
    return np.mean([e.position for e in entries], axis=0)


def consolidate(window, thresholds=None, partition=None):
    """Temporally consolidated keypoint for the window's joint.

    Without drift the whole buffer is the concept. With drift, the reliable
    concept wins; when both or neither are reliable, centroid motion above
    motion_min adopts the post concept, otherwise the concept with the
    higher median composite score (pre on ties). The returned entry is the
    adopted concept's highest-composite element (latest timestep on ties).
    A precomputed partition from detect_drift may be passed in.
    """
    thresholds = thresholds or ReliabilityThresholds()
    entries = window.entries()
    if not entries:
        raise ValueError("empty window")

    if partition is None:
        if len(entries) >= 2 * window.stat_size:
            partition = detect_drift(window)
        else:
            partition = ConceptPartition(pre=entries, post=[], drift_detected=False,
                                         drift_marginal=None, p_values={})

    if not partition.drift_detected:
        concept = entries
    else:
        pre_ok = concept_reliable(partition.pre, thresholds)
        post_ok = concept_reliable(partition.post, thresholds)
        if pre_ok != post_ok:
            concept = partition.pre if pre_ok else partition.post
        else:
            motion = np.linalg.norm(_centroid(partition.post) - _centroid(partition.pre))
            if motion >= thresholds.motion_min:
                concept = partition.post
            elif _median_composite(partition.pre, thresholds) >= \
                    _median_composite(partition.post, thresholds):
                concept = partition.pre
            else:
                concept = partition.post

    return max(concept, key=lambda e: (composite_score(e, thresholds), e.timestep))
