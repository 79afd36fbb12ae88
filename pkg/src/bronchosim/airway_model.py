"""Parametric bronchial-tree model and sampler.

The tree is a full binary hierarchy of cylindrical segments. Each
bifurcation places two daughters in a common plane (the bifurcation plane),
rotated about the parent axis by the parent's twist angle. A daughter does
not leave the parent end abruptly: its centerline follows a circular
transition arc of radius ``r* = D / (2 sin Φ)`` that turns by the branching
angle Φ, after which the straight daughter axis begins. The arc places the
straight-axis origin at ``(±r·tan(Φ/2), 0, r)`` in bifurcation-plane
coordinates, with direction ``(±sin Φ, 0, cos Φ)``.

Randomness is drawn from keyed Philox streams (see :mod:`bronchosim.rng`):
one stream per segment for its length, one stream per bifurcation for
(twist, h_a, h_b, Φ_a, Φ_b) in that fixed order. Resampling after a
clearance violation bumps the stream's retry index instead of consuming
more draws, so sampling never depends on construction order.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import FormatError, GenerationError, ParameterError, TessellationError
from .geometry import (
    RigidTransform,
    rotation_y,
    rotation_z,
    segment_segment_distance,
    segment_segment_distance_batch,
)
from .rng import TAG_SEGMENT, TAG_SPLIT, stream

log = logging.getLogger(__name__)

TREE_FORMAT_VERSION = "1"

# truncation window for sampled lengths, as factors of the generation mean
LENGTH_TRUNC_LO = 0.2
LENGTH_TRUNC_HI = 2.0

# fraction of min(r_a, r_b) used as the carinal rounding radius at the
# mid-sagittal station
CARINA_ROUNDING_FRAC = 0.3

# safety margin the sampler adds on top of the minimum axis clearance
SAMPLER_CLEARANCE_MARGIN = 1.05

# clearance factor between a daughter's exit ring and its sibling's axis
EXIT_CLEARANCE_MARGIN = 1.10
# exit station bounds as fractions of daughter radius / length
_EXIT_MIN_RADII = 0.25
_EXIT_MAX_LENGTH_FRAC = 0.75

_MAX_SPLIT_RETRIES = 64
_MAX_RESAMPLE_ROUNDS = 400


# ---------------------------------------------------------------------------
# parameter and tree dataclasses


@dataclass
class GenerationParams:
    """Sampling parameters for one tree.

    ``ld_ratio_per_gen`` and ``l_mean_per_gen`` both have one entry per
    generation (generation 0 = trachea, deepest index = generations - 1).
    """

    generations: int
    root_diameter: float
    ld_ratio_per_gen: list[float]
    l_mean_per_gen: list[float]
    h_range: tuple[float, float] = (0.69, 0.86)
    phi_max: float = 120.0
    length_sigma_factor: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if not isinstance(self.generations, int) or self.generations < 1:
            raise ParameterError("generations", "must be an integer >= 1")
        if not self.root_diameter > 0:
            raise ParameterError("root_diameter", "must be > 0")
        if len(self.ld_ratio_per_gen) != self.generations:
            raise ParameterError(
                "ld_ratio_per_gen",
                f"needs {self.generations} entries, got {len(self.ld_ratio_per_gen)}",
            )
        if any(r <= 0 for r in self.ld_ratio_per_gen):
            raise ParameterError("ld_ratio_per_gen", "entries must be > 0")
        if len(self.l_mean_per_gen) != self.generations:
            raise ParameterError(
                "l_mean_per_gen",
                f"needs {self.generations} entries, got {len(self.l_mean_per_gen)}",
            )
        if any(l <= 0 for l in self.l_mean_per_gen):
            raise ParameterError("l_mean_per_gen", "entries must be > 0")
        lo, hi = self.h_range
        if not (0.0 < lo <= hi < 1.0):
            raise ParameterError("h_range", "must satisfy 0 < lo <= hi < 1")
        if not (0.0 < self.phi_max <= 120.0):
            raise ParameterError("phi_max", "must be in (0, 120] degrees")
        if not (0.0 < self.length_sigma_factor < 1.0):
            raise ParameterError("length_sigma_factor", "must be in (0, 1)")
        if not (0 <= int(self.seed) < 2**64):
            raise ParameterError("seed", "must fit in 64 unsigned bits")


# per-generation length-to-diameter defaults; first entry is the trachea,
# later generations flatten out near 3
_DEFAULT_LD = [5.0, 2.8, 2.8, 3.0, 3.0, 3.2]


def default_params(
    generations: int,
    root_diameter: float = 16.0,
    seed: int = 0,
    h_range: tuple[float, float] = (0.69, 0.86),
) -> GenerationParams:
    """Build plausible anatomical defaults for ``generations`` levels.

    Mean lengths derive from the L/D table applied to the expected diameter
    at each generation (root diameter shrunk by the midpoint of h_range).
    """
    if generations < 1:
        raise ParameterError("generations", "must be an integer >= 1")
    ld = [_DEFAULT_LD[min(g, len(_DEFAULT_LD) - 1)] for g in range(generations)]
    h_mid = 0.5 * (h_range[0] + h_range[1])
    l_mean = [ld[g] * root_diameter * h_mid**g for g in range(generations)]
    return GenerationParams(
        generations=generations,
        root_diameter=root_diameter,
        ld_ratio_per_gen=ld,
        l_mean_per_gen=l_mean,
        h_range=h_range,
        seed=seed,
    )


@dataclass
class SigmoidTaper:
    """Logistic radius-transition profile across a bifurcation.

    ``start_ratio`` is the ratio of the parent-matching ring radius to the
    daughter radius; the rescaled logistic interpolates from it (station 0)
    to exactly 1 (station 1).
    """

    steepness: float = 8.0
    midpoint: float = 0.5
    start_ratio: float = 1.0

    def validate(self) -> None:
        if not self.steepness > 0:
            raise ParameterError("steepness", "must be > 0")
        if not (0.0 <= self.midpoint <= 1.0):
            raise ParameterError("midpoint", "must be in [0, 1]")
        if not self.start_ratio > 0:
            raise ParameterError("start_ratio", "must be > 0")

    def profile(self, u):
        """Rescaled logistic with profile(0) = 0 and profile(1) = 1."""
        u = np.asarray(u, dtype=float)
        k, m = self.steepness, self.midpoint
        f = 1.0 / (1.0 + np.exp(-k * (u - m)))
        f0 = 1.0 / (1.0 + np.exp(k * m))
        f1 = 1.0 / (1.0 + np.exp(-k * (1.0 - m)))
        return (f - f0) / (f1 - f0)


def taper_radius(taper: SigmoidTaper, d: float, phi_s_normalized) -> float | np.ndarray:
    """Ring radius at normalized sagittal station ``phi_s_normalized``.

    Returns ``d`` scaled by the taper profile: the parent-matching radius
    ``d * start_ratio`` at station 0 and exactly ``d`` at station 1.
    """
    sr = taper.start_ratio
    if isinstance(phi_s_normalized, (float, int)):
        # scalar fast path: the array round-trip dominates in hot loops
        u = float(phi_s_normalized)
        if u < 0.0 or u > 1.0:
            raise ParameterError("phi_s_normalized", "must be in [0, 1]")
        k, m = taper.steepness, taper.midpoint
        f = 1.0 / (1.0 + math.exp(-k * (u - m)))
        f0 = 1.0 / (1.0 + math.exp(k * m))
        f1 = 1.0 / (1.0 + math.exp(-k * (1.0 - m)))
        return d * (sr + (1.0 - sr) * (f - f0) / (f1 - f0))
    u = np.asarray(phi_s_normalized, dtype=float)
    if np.any(u < 0.0) or np.any(u > 1.0):
        raise ParameterError("phi_s_normalized", "must be in [0, 1]")
    out = d * (sr + (1.0 - sr) * taper.profile(u))
    return float(out) if np.isscalar(phi_s_normalized) else out


@dataclass
class AirwaySegment:
    """One cylindrical airway. ``frame`` maps local to world coordinates;
    the local +z axis is the segment axis, starting at the frame origin."""

    id: int
    parent_id: int | None
    generation: int
    diameter: float
    length: float
    twist: float
    frame: RigidTransform

    @property
    def radius(self) -> float:
        return 0.5 * self.diameter

    @property
    def start(self) -> np.ndarray:
        return self.frame.translation

    @property
    def direction(self) -> np.ndarray:
        return self.frame.z_axis

    @property
    def end(self) -> np.ndarray:
        return self.frame.translation + self.length * self.frame.z_axis

    def end_frame(self) -> RigidTransform:
        return RigidTransform(self.frame.rotation.copy(), self.end)


@dataclass
class BifurcationGeometry:
    """Geometry of one parent-to-daughters junction.

    The bifurcation frame sits at the parent end with +z along the parent
    axis and the x/z plane equal to the bifurcation plane (the parent twist
    is already folded in). Daughter a branches toward +x at ``phi_a``,
    daughter b toward -x at ``phi_b``. ``carina_center`` and ``r_c``
    describe the mid-sagittal rounding circle in (x, z) plane coordinates.
    """

    parent_id: int
    child_a_id: int
    child_b_id: int
    phi_a: float
    phi_b: float
    r_star_a: float
    r_star_b: float
    carina_center: tuple[float, float]
    r_c: float
    tilt_a: float
    tilt_b: float
    taper: SigmoidTaper
    sagittal_range_a: tuple[float, float]
    sagittal_range_b: tuple[float, float]
    frame: RigidTransform


@dataclass
class AirwayTree:
    """Sampled tree: id-keyed segments plus per-junction geometry."""

    segments: dict[int, AirwaySegment]
    bifurcations: dict[int, BifurcationGeometry]
    params: GenerationParams

    @property
    def root(self) -> AirwaySegment:
        return self.segments[0]

    def children(self, segment_id: int) -> tuple[int, int] | None:
        bif = self.bifurcations.get(segment_id)
        if bif is None:
            return None
        return (bif.child_a_id, bif.child_b_id)

    def is_leaf(self, segment_id: int) -> bool:
        return segment_id not in self.bifurcations

    @property
    def leaves(self) -> list[int]:
        return sorted(i for i in self.segments if self.is_leaf(i))

    def subtree_ids(self, segment_id: int) -> list[int]:
        out, todo = [], [segment_id]
        while todo:
            i = todo.pop()
            out.append(i)
            kids = self.children(i)
            if kids:
                todo.extend(kids)
        return out

    def max_generation(self) -> int:
        return max(s.generation for s in self.segments.values())


# ---------------------------------------------------------------------------
# core geometric relations


def curvature_radius(d: float, phi: float) -> float:
    """Transition-arc curvature radius ``d / (2 sin phi)`` (phi in degrees)."""
    if not d > 0:
        raise ParameterError("d", "must be > 0")
    if not (0.0 < phi <= 120.0):
        raise ParameterError("phi", "must be in (0, 120] degrees")
    s = math.sin(math.radians(phi))
    if s < 1e-9:
        raise ParameterError("phi", "sin(phi) below 1e-9")
    return d / (2.0 * s)


def daughter_axis_start(radius: float, phi_deg: float, side: int) -> np.ndarray:
    """Straight-axis origin of a daughter, in bifurcation-plane coordinates."""
    phi = math.radians(phi_deg)
    return np.array([side * radius * math.tan(0.5 * phi), 0.0, radius])


def daughter_axis_direction(phi_deg: float, side: int) -> np.ndarray:
    phi = math.radians(phi_deg)
    return np.array([side * math.sin(phi), 0.0, math.cos(phi)])


def transition_arc(radius: float, phi_deg: float, side: int, n: int) -> np.ndarray:
    """``n`` points along the circular transition arc from the parent end
    (exclusive of neither endpoint) in bifurcation-plane coordinates."""
    phi = math.radians(phi_deg)
    r_star = radius / math.sin(phi)
    alpha = np.linspace(0.0, phi, n)
    return np.stack(
        [side * r_star * (1.0 - np.cos(alpha)), np.zeros(n), r_star * np.sin(alpha)],
        axis=1,
    )


def _axis_clearance(phi_deg: float, r_a: float, r_b: float, l_a: float, l_b: float) -> float:
    """Closest approach of the two daughters' full straight axes when both
    branch at ``phi_deg``. Scalar 2D distance in the bifurcation plane;
    hot inside the branching-angle bisection."""
    phi = math.radians(phi_deg)
    sin_p, cos_p, tan_h = math.sin(phi), math.cos(phi), math.tan(0.5 * phi)
    p1x, p1z = r_a * tan_h, r_a
    d1x, d1z = l_a * sin_p, l_a * cos_p
    p2x, p2z = -r_b * tan_h, r_b
    d2x, d2z = -l_b * sin_p, l_b * cos_p
    rx, rz = p1x - p2x, p1z - p2z

    a = d1x * d1x + d1z * d1z
    e = d2x * d2x + d2z * d2z
    f = d2x * rx + d2z * rz
    c = d1x * rx + d1z * rz
    b = d1x * d2x + d1z * d2z
    denom = a * e - b * b

    eps = 1e-30
    s = min(max((b * f - c * e) / denom, 0.0), 1.0) if denom > eps else 0.0
    if a <= eps:
        s = 0.0
    t = (b * s + f) / e if e > eps else 0.0
    if t < 0.0:
        t = 0.0
        if a > eps:
            s = min(max(-c / a, 0.0), 1.0)
    elif t > 1.0:
        t = 1.0
        if a > eps:
            s = min(max((b - c) / a, 0.0), 1.0)
    dx = (p1x + s * d1x) - (p2x + t * d2x)
    dz = (p1z + s * d1z) - (p2z + t * d2z)
    return math.hypot(dx, dz)


def min_branching_angle(
    parent: AirwaySegment | None,
    d_a: float,
    d_b: float,
    lengths: tuple[float, float],
    margin: float = 1.0,
) -> float:
    """Smallest branching angle keeping the daughters clear of each other.

    Both daughters are placed at ``±Φ`` about the parent axis with their
    transition arcs; the returned Φ is the smallest angle (degrees) at
    which the two straight axes keep a clearance of
    ``margin · (d_a + d_b) / 2`` along their full lengths. The placement
    is symmetric in (a, b) and does not depend on the parent's own size,
    so ``parent`` may be None.
    """
    if d_a < 0 or d_b < 0:
        raise ParameterError("d_a/d_b", "diameters must be >= 0")
    l_a, l_b = lengths
    if not (l_a > 0 and l_b > 0):
        raise ParameterError("lengths", "must be > 0")
    thresh = margin * 0.5 * (d_a + d_b)
    if thresh == 0.0:
        return 0.0

    lo, hi = 1e-6, 170.0
    if _axis_clearance(lo, d_a / 2, d_b / 2, l_a, l_b) >= thresh:
        return lo
    # clearance grows monotonically with the angle while the axes diverge,
    # which they do up to the 170 degree bracket end
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        if _axis_clearance(mid, d_a / 2, d_b / 2, l_a, l_b) >= thresh:
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# carinal rounding


def _wedge_2d(bif: BifurcationGeometry) -> tuple[np.ndarray, np.ndarray, float]:
    """Apex point, interior bisector direction, and half-angle (radians) of
    the 2D wedge formed by the daughters' inner walls in the bifurcation
    plane."""
    seg_r_a = bif.r_star_a * math.sin(math.radians(bif.phi_a))
    seg_r_b = bif.r_star_b * math.sin(math.radians(bif.phi_b))
    a0 = daughter_axis_start(seg_r_a, bif.phi_a, +1)
    ua = daughter_axis_direction(bif.phi_a, +1)
    b0 = daughter_axis_start(seg_r_b, bif.phi_b, -1)
    ub = daughter_axis_direction(bif.phi_b, -1)
    # inner wall = axis shifted toward the midline by the tube radius
    na = np.array([math.cos(math.radians(bif.phi_a)), 0.0, -math.sin(math.radians(bif.phi_a))])
    nb = np.array([-math.cos(math.radians(bif.phi_b)), 0.0, -math.sin(math.radians(bif.phi_b))])
    wa = a0 - seg_r_a * na
    wb = b0 - seg_r_b * nb
    # intersect wall lines wa + t·ua = wb + s·ub in the (x, z) plane
    m = np.array([[ua[0], -ub[0]], [ua[2], -ub[2]]])
    rhs = np.array([wb[0] - wa[0], wb[2] - wa[2]])
    t, _ = np.linalg.solve(m, rhs)
    apex = wa + t * ua
    bis = -(ua + ub)
    bis = bis / np.linalg.norm(bis)
    gamma = 0.5 * math.radians(bif.phi_a + bif.phi_b)
    return apex, bis, gamma


def carinal_rounding(
    bif: BifurcationGeometry, sagittal_angle: float
) -> tuple[np.ndarray, float, float]:
    """Rounding circle at a sagittal station of the carina.

    ``sagittal_angle`` is signed: positive values up to ``phi_a`` lie on
    daughter a's side, negative values down to ``-phi_b`` on daughter b's.
    Returns ``(center, radius, tilt_deg)`` with the center in bifurcation
    plane (x, z) coordinates. The circle is inscribed in the wedge between
    the daughters' inner walls (tangent to both); its radius grows from 0
    at the range endpoints to the stored ``r_c`` at the mid station, and
    the tilt interpolates linearly from ``tilt_b`` to ``tilt_a``.
    """
    lo, hi = -bif.phi_b, bif.phi_a
    if not (lo <= sagittal_angle <= hi):
        raise ParameterError(
            "sagittal_angle", f"must be within [{lo:.6g}, {hi:.6g}] degrees"
        )
    apex, bis, gamma = _wedge_2d(bif)
    sigma = (sagittal_angle - lo) / (hi - lo)
    radius = bif.r_c * math.sin(math.pi * sigma)
    delta = radius / math.sin(gamma)
    center = apex + delta * bis
    tilt = bif.tilt_b + sigma * (bif.tilt_a - bif.tilt_b)
    return np.array([center[0], center[2]]), radius, tilt


def carina_crest_2d(bif: BifurcationGeometry) -> np.ndarray:
    """Apex-side point of the mid-sagittal rounding circle, (x, z) plane."""
    apex, bis, gamma = _wedge_2d(bif)
    delta = bif.r_c / math.sin(gamma)
    crest = apex + (delta - bif.r_c) * bis
    return np.array([crest[0], crest[2]])


# ---------------------------------------------------------------------------
# junction transition extents


def _polyline_cross_2d(a: np.ndarray, b: np.ndarray):
    """First crossing (by position along ``a``) of two 2D polylines.

    Returns ``(point, fa, fb)`` where ``fa``/``fb`` are fractional segment
    indices along each polyline, or None.
    """
    p0, p1 = a[:-1], a[1:]
    q0, q1 = b[:-1], b[1:]
    d1 = p1 - p0
    d2 = q1 - q0
    # crossings sit early along ``a``; test in blocks and stop at the first
    for lo in range(0, len(p0), 16):
        hi = min(lo + 16, len(p0))
        d1c = d1[lo:hi]
        den = d1c[:, None, 0] * d2[None, :, 1] - d1c[:, None, 1] * d2[None, :, 0]
        rx = q0[None, :, 0] - p0[lo:hi, None, 0]
        ry = q0[None, :, 1] - p0[lo:hi, None, 1]
        safe = np.where(np.abs(den) > 1e-30, den, 1.0)
        t = (rx * d2[None, :, 1] - ry * d2[None, :, 0]) / safe
        u = (rx * d1c[:, None, 1] - ry * d1c[:, None, 0]) / safe
        ok = (np.abs(den) > 1e-30) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
        if np.any(ok):
            i, j = np.unravel_index(np.argmax(ok), ok.shape)
            i += lo
            return p0[i] + t[i - lo, j] * d1[i], i + t[i - lo, j], j + u[i - lo, j]
    return None


def _inner_edge_2d(
    r_p: float, r_d: float, phi: float, r_star: float, side: int,
    t_exit: float, taper, extend: float,
):
    """Daughter's inner lumen edge in the bifurcation plane: swept centers
    offset toward the sibling by the tapered radius. Returns the (M, 2)
    polyline and the path distance of each vertex."""
    phi_rad = math.radians(phi)
    arc_len = r_star * phi_rad
    dists = np.linspace(0.0, arc_len + t_exit + extend, 200)
    # clamp to the arc end: past it the sweep continues along the tangent
    alpha = np.minimum(dists / r_star, phi_rad)
    t = np.maximum(dists - arc_len, 0.0)
    sin_a, cos_a = np.sin(alpha), np.cos(alpha)
    cx = side * r_star * (1.0 - cos_a) + t * side * sin_a
    cz = r_star * sin_a + t * cos_a
    rad = taper_radius(taper, r_d, np.minimum(dists / (arc_len + t_exit), 1.0))
    # 2D inward normal: rotate the tangent toward the sibling
    pts = np.stack([cx - side * rad * cos_a, cz + rad * sin_a], axis=1)
    return pts, dists


def _divider_2d(
    tree: AirwayTree, bif: BifurcationGeometry, t_exit_a: float, t_exit_b: float
):
    """Flow-divider crossing of the daughters' inner lumen edges.

    Returns ``(point, station_a, station_b)`` where stations are measured
    along each daughter's straight axis (negative while still on the
    transition arc), or None when the edges never cross.
    """
    r_p = tree.segments[bif.parent_id].radius
    curves = []
    for child_id, phi, r_star, side, t_exit in (
        (bif.child_a_id, bif.phi_a, bif.r_star_a, +1, t_exit_a),
        (bif.child_b_id, bif.phi_b, bif.r_star_b, -1, t_exit_b),
    ):
        r_d = tree.segments[child_id].radius
        taper = replace(bif.taper, start_ratio=r_p / r_d)
        # sample past the exit so short exits still reach the crossing
        curves.append(
            _inner_edge_2d(r_p, r_d, phi, r_star, side, t_exit, taper, 2.5 * r_p)
        )
    hit = _polyline_cross_2d(curves[0][0], curves[1][0])
    if hit is None:
        return None
    point, fa, fb = hit
    stations = []
    for (pts, dists), r_star, phi, f in (
        (curves[0], bif.r_star_a, bif.phi_a, fa),
        (curves[1], bif.r_star_b, bif.phi_b, fb),
    ):
        step = dists[1] - dists[0]
        stations.append(f * step - r_star * math.radians(phi))
    return point, stations[0], stations[1]


def ridge_crest_2d(
    tree: AirwayTree, bif: BifurcationGeometry, t_exit_a: float, t_exit_b: float
) -> np.ndarray:
    """Carina ridge apex in the bifurcation plane, (x, z).

    The crest is the flow divider lowered by the rounding radius. Unlike
    the straight-wall wedge apex, the divider stays between the daughter
    lumens for branching angles past 90 degrees, where the extrapolated
    wedge apex climbs above the exits.
    """
    div = _divider_2d(tree, bif, t_exit_a, t_exit_b)
    if div is None:
        # parallel-ish inner edges: fall back to the analytic wedge crest
        hit = carina_crest_2d(bif)
    else:
        hit = div[0]
    return np.array([hit[0], max(0.25 * hit[1], hit[1] - bif.r_c)])


def junction_exit_lengths(tree: AirwayTree, bif: BifurcationGeometry) -> tuple[float, float]:
    """Axial stations (one per daughter, along each straight axis) where the
    daughter tubes leave the shared junction surface.

    The exit is the earliest station satisfying, at every later station:

    * sibling clearance — the tube keeps ``r + r_sib`` from the sibling
      axis (inscribed tube polygons make the round-tube bound sufficient)
      plus ``EXIT_CLEARANCE_MARGIN`` times the sibling's local excess over
      its tube radius, which pays for the fat loft rows near the carina;
    * parent clearance — above the parent end plane the axis keeps
      ``EXIT_CLEARANCE_MARGIN * r`` from the mouth rim, below it the full
      tube width from the wall cylinder (branching angles past 90 degrees
      send the straight axis back down past the rim);

    and not before the flow-divider crossing, where the two lumens
    actually separate. Sibling leg extent, taper and divider all depend on
    both exits, so the pair is solved by fixed-point iteration.
    """
    parent = tree.segments[bif.parent_id]
    r_p = parent.radius
    seg_a = tree.segments[bif.child_a_id]
    seg_b = tree.segments[bif.child_b_id]
    legs = (
        (seg_a, seg_b, bif.phi_a, bif.phi_b, +1),
        (seg_b, seg_a, bif.phi_b, bif.phi_a, -1),
    )

    def solve(i: int, sib_span: float) -> float:
        seg, sib, phi, phi_sib, side = legs[i]
        r, r_sib = seg.radius, sib.radius
        a0 = daughter_axis_start(r, phi, side)
        u = daughter_axis_direction(phi, side)
        s0 = daughter_axis_start(r_sib, phi_sib, -side)
        ab = sib.length * daughter_axis_direction(phi_sib, -side)
        ab_sq = float(ab @ ab)
        need_rim = EXIT_CLEARANCE_MARGIN * r
        need_wall = EXIT_CLEARANCE_MARGIN * (r + r_p)
        sib_taper = replace(bif.taper, start_ratio=r_p / r_sib)
        arc_sib = (r_sib / math.sin(math.radians(phi_sib))) * math.radians(phi_sib)
        sr = sib_taper.start_ratio
        k_t, m_t = sib_taper.steepness, sib_taper.midpoint
        f0 = 1.0 / (1.0 + math.exp(k_t * m_t))
        f1 = 1.0 / (1.0 + math.exp(-k_t * (1.0 - m_t)))

        abx, abz = float(ab[0]), float(ab[2])
        s0x, s0z = float(s0[0]), float(s0[2])

        # everything lives in the bifurcation plane (y = 0); the logistic
        # taper is inlined with its endpoint values hoisted
        def station_ok(px: float, pz: float) -> bool:
            w = min(1.0, max(0.0, (px * abx + pz * abz - s0_ab) / ab_sq))
            station = min(1.0, (arc_sib + w * sib.length) / (arc_sib + sib_span))
            f = 1.0 / (1.0 + math.exp(-k_t * (station - m_t)))
            rad_sib = r_sib * (sr + (1.0 - sr) * (f - f0) / (f1 - f0))
            need_sib = r + r_sib + EXIT_CLEARANCE_MARGIN * (rad_sib - r_sib)
            if math.hypot(px - s0x - w * abx, pz - s0z - w * abz) < need_sib:
                return False
            if pz >= 0.0:
                return math.hypot(abs(px) - r_p, pz) >= need_rim
            return abs(px) >= need_wall

        s0_ab = float(s0 @ ab)
        t_lo = _EXIT_MIN_RADII * r
        ts = np.linspace(t_lo, seg.length, max(64, int(seg.length / (0.25 * r)) + 1))
        px, pz = a0[0] + ts * u[0], a0[2] + ts * u[2]
        w = np.clip((px * ab[0] + pz * ab[2] - s0_ab) / ab_sq, 0.0, 1.0)
        station = np.minimum(1.0, (arc_sib + w * sib.length) / (arc_sib + sib_span))
        rad_sib = taper_radius(sib_taper, r_sib, station)
        need_sib = r + r_sib + EXIT_CLEARANCE_MARGIN * (rad_sib - r_sib)
        sib_ok = np.hypot(px - s0[0] - w * ab[0], pz - s0[2] - w * ab[2]) >= need_sib
        rim_ok = np.hypot(np.abs(px) - r_p, pz) >= need_rim
        wall_ok = np.abs(px) >= need_wall
        ok = sib_ok & np.where(pz >= 0.0, rim_ok, wall_ok)
        if ok.all():
            return t_lo
        last_bad = int(np.nonzero(~ok)[0][-1])
        if last_bad == len(ts) - 1:
            raise TessellationError(seg.id, "tube never clears the junction obstacles")
        lo, hi = float(ts[last_bad]), float(ts[last_bad + 1])
        for _ in range(48):
            mid = 0.5 * (lo + hi)
            if station_ok(a0[0] + mid * u[0], a0[2] + mid * u[2]):
                hi = mid
            else:
                lo = mid
        return hi

    # nominal sibling exit span of one parent radius seeds the iteration
    out = [solve(0, r_p), solve(1, r_p)]
    for _ in range(3):
        prev = list(out)
        out = [solve(0, out[1]), solve(1, out[0])]
        # a tube that starts before the flow divider bulges into the
        # crotch, crossing the sibling's loft; push each exit past the
        # divider crossing along its own path
        div = _divider_2d(tree, bif, out[0], out[1])
        if div is not None:
            for i in range(2):
                out[i] = max(out[i], div[1 + i] + 0.35 * legs[i][0].radius)
        if abs(out[0] - prev[0]) < 1e-6 and abs(out[1] - prev[1]) < 1e-6:
            break
    for i in range(2):
        if out[i] > _EXIT_MAX_LENGTH_FRAC * legs[i][0].length:
            raise TessellationError(
                legs[i][0].id,
                "junction exit station exceeds the segment length budget",
            )
    return out[0], out[1]


def _leg_envelope(
    parent: AirwaySegment,
    child: AirwaySegment,
    phi: float,
    side: int,
    taper: SigmoidTaper,
    frame: RigidTransform,
    t_exit: float,
) -> list[tuple[np.ndarray, np.ndarray, float]]:
    """Conservative capsule cover of one junction-transition leg.

    The transition surface around a daughter — swept rings that taper from
    the parent radius down to the daughter radius along the arc and the
    straight run to the exit — pokes outside both the parent's and the
    daughter's straight-axis capsules. Three world-space capsules
    ``(start, end, radius)`` bound it: the arc chord fattened by the worst
    arc sag plus ring radius, and two stepped pieces along the straight
    run, each as fat as the taper at its proximal end.
    """
    local, rho_arc, rho_t1, rho_t2 = _leg_envelope_local(
        parent.radius, child.radius, phi, side,
        taper.steepness, taper.midpoint, t_exit,
    )
    pts = frame.apply(local)
    return [
        (pts[0], pts[1], rho_arc),
        (pts[1], pts[2], rho_t1),
        (pts[2], pts[3], rho_t2),
    ]


@lru_cache(maxsize=8192)
def _leg_envelope_local(
    r_p: float, r_c: float, phi: float, side: int,
    steepness: float, midpoint: float, t_exit: float,
) -> tuple[np.ndarray, float, float, float]:
    """Frame-independent part of :func:`_leg_envelope`: capsule endpoints in
    bifurcation-plane coordinates plus radii. Resampling rounds rebuild
    unchanged junctions, so this is cached by value."""
    arc_len = (r_c / math.sin(math.radians(phi))) * math.radians(phi)
    total = arc_len + t_exit
    prof = SigmoidTaper(steepness, midpoint, start_ratio=r_p / r_c)

    a0 = daughter_axis_start(r_c, phi, side)
    direction = daughter_axis_direction(phi, side)
    arc = transition_arc(r_c, phi, side, 17)
    # sag of each arc sample off the chord to the straight-axis origin
    chord = a0 / float(np.linalg.norm(a0))
    dev = np.linalg.norm(arc - (arc @ chord)[:, None] * chord, axis=1)
    stations = np.minimum(np.linspace(0.0, arc_len, 17), total) / total
    rho_arc = float(np.max(dev + taper_radius(prof, r_c, stations)))

    mid = a0 + 0.35 * t_exit * direction
    end = a0 + t_exit * direction
    rho_t1 = float(taper_radius(prof, r_c, min(arc_len / total, 1.0)))
    rho_t2 = float(taper_radius(prof, r_c, min((arc_len + 0.35 * t_exit) / total, 1.0)))
    pts = np.stack([np.zeros(3), a0, mid, end])
    pts.setflags(write=False)
    return pts, rho_arc, rho_t1, rho_t2


# ---------------------------------------------------------------------------
# sampling


def _draw_length(gen, l_mean: float, sigma_factor: float, segment_id: int) -> float:
    sigma = sigma_factor * l_mean
    lo, hi = LENGTH_TRUNC_LO * l_mean, LENGTH_TRUNC_HI * l_mean
    for _ in range(10_000):
        length = l_mean + sigma * gen.standard_normal()
        if lo <= length <= hi:
            return length
    raise GenerationError(segment_id, "length sampling failed to converge")


def _build_bifurcation_geometry(
    parent: AirwaySegment,
    child_a: AirwaySegment,
    child_b: AirwaySegment,
    phi_a: float,
    phi_b: float,
    bif_frame: RigidTransform,
) -> BifurcationGeometry:
    r_star_a = curvature_radius(child_a.diameter, phi_a)
    r_star_b = curvature_radius(child_b.diameter, phi_b)
    bif = BifurcationGeometry(
        parent_id=parent.id,
        child_a_id=child_a.id,
        child_b_id=child_b.id,
        phi_a=phi_a,
        phi_b=phi_b,
        r_star_a=r_star_a,
        r_star_b=r_star_b,
        carina_center=(0.0, 0.0),
        r_c=CARINA_ROUNDING_FRAC * min(child_a.radius, child_b.radius),
        tilt_a=phi_a,
        tilt_b=-phi_b,
        taper=SigmoidTaper(),
        sagittal_range_a=(0.0, phi_a),
        sagittal_range_b=(-phi_b, 0.0),
        frame=bif_frame,
    )
    apex, bis, gamma = _wedge_2d(bif)
    center = apex + (bif.r_c / math.sin(gamma)) * bis
    bif.carina_center = (float(center[0]), float(center[2]))
    return bif


def _clearance_pairs(tree_segments: dict[int, AirwaySegment], bifs: dict[int, BifurcationGeometry]):
    """Candidate segment pairs for the clearance check: every pair except
    parent-child, whose shared boundary belongs to the junction surface.
    Full axes on both sides — with branching angles up to 120 degrees a
    deep descendant can curl back toward any ancestor."""
    ids = sorted(tree_segments)
    parent_of = {i: tree_segments[i].parent_id for i in ids}
    pairs = []
    for idx, u in enumerate(ids):
        for v in ids[idx + 1 :]:
            if parent_of[v] == u or parent_of[u] == v:
                continue  # junction region owns the shared boundary
            pairs.append((u, v))
    return pairs


def _junction_phantoms(
    segments: dict[int, AirwaySegment],
    bifs: dict[int, BifurcationGeometry],
    exits: dict[int, float],
) -> list[tuple[np.ndarray, np.ndarray, float, int, int]]:
    """Junction-envelope capsules ``(p, q, rho, leg child id, junction id)``."""
    out = []
    for pid in sorted(bifs):
        bif = bifs[pid]
        parent = segments[pid]
        for child_id, phi, side in (
            (bif.child_a_id, bif.phi_a, +1),
            (bif.child_b_id, bif.phi_b, -1),
        ):
            for p, q, rho in _leg_envelope(
                parent, segments[child_id], phi, side, bif.taper, bif.frame,
                exits[child_id],
            ):
                out.append((p, q, rho, child_id, pid))
    return out


_PAIR_INDEX_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray, list[int]]] = {}


def _pair_index(
    segments: dict[int, AirwaySegment],
    bifs: dict[int, BifurcationGeometry],
    with_envelopes: bool,
) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Row indices ``(i, j, entity_ids)`` for the clearance sweep.

    Rows 0..S-1 are segments in id order, followed by the junction-envelope
    capsules in ``_junction_phantoms`` order. The candidate-pair structure
    depends only on ids, the parent map and the bifurcation children — all
    stable across resampling rounds — so it is cached per topology.
    """
    ids = sorted(segments)
    key = (
        tuple(ids),
        tuple(segments[i].parent_id for i in ids),
        tuple((p, bifs[p].child_a_id, bifs[p].child_b_id) for p in sorted(bifs)),
        with_envelopes,
    )
    cached = _PAIR_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    row = {sid: k for k, sid in enumerate(ids)}
    gi: list[int] = []
    gj: list[int] = []
    ent_ids = list(ids)
    for u, v in _clearance_pairs(segments, bifs):
        gi.append(row[u])
        gj.append(row[v])

    if with_envelopes:

        def kids(x: int) -> tuple[int, ...]:
            b = bifs.get(x)
            return (b.child_a_id, b.child_b_id) if b else ()

        # (row, junction id, leg child id), ordered as _junction_phantoms
        ph: list[tuple[int, int, int]] = []
        excl: dict[tuple[int, int], set[int]] = {}
        for pid in sorted(bifs):
            for child in kids(pid):
                e = {pid, *kids(pid), *kids(child)}
                g = segments[pid].parent_id
                if g is not None:
                    e.add(g)
                    e.update(kids(g))
                excl[(pid, child)] = e
                for _ in range(3):
                    ph.append((len(ent_ids), pid, child))
                    ent_ids.append(child)

        inc = {pid: frozenset((pid, *kids(pid))) for pid in bifs}
        for k, (prow, pid, child) in enumerate(ph):
            banned = excl[(pid, child)]
            for w in ids:
                if w not in banned:
                    gi.append(prow)
                    gj.append(row[w])
            for prow2, pid2, _child2 in ph[k + 1 :]:
                if pid2 != pid and not (inc[pid] & inc[pid2]):
                    gi.append(prow)
                    gj.append(prow2)

    cached = (np.asarray(gi, dtype=np.intp), np.asarray(gj, dtype=np.intp), ent_ids)
    _PAIR_INDEX_CACHE[key] = cached
    return cached


def _clearance_violations(
    segments: dict[int, AirwaySegment],
    bifs: dict[int, BifurcationGeometry],
    margin: float,
    exits: dict[int, float] | None = None,
) -> list[tuple[int, int, float, float]]:
    """Capsule-clearance sweep; entries are ``(id_u, id_v, dist, threshold)``.

    With ``exits`` (leg child id -> junction exit station) the sweep also
    covers the junction transition envelopes, whose tapered lofts poke
    outside the straight-axis capsules. Envelope pairs are skipped inside
    the two-junction neighbourhood that the junction-exit rules already
    manage (and where runt segments make capsule overlap unavoidable);
    envelope violations are reported under the leg's child id.
    """
    with_envelopes = exits is not None and bool(bifs)
    gi, gj, ent_ids = _pair_index(segments, bifs, with_envelopes)
    if gi.size == 0:
        return []
    ids = sorted(segments)
    p_rows = [segments[s].start for s in ids]
    q_rows = [segments[s].end for s in ids]
    radii = [segments[s].radius for s in ids]
    if with_envelopes:
        for p, q, rho, _child, _pid in _junction_phantoms(segments, bifs, exits):
            p_rows.append(p)
            q_rows.append(q)
            radii.append(rho)
    pts_p, pts_q = np.asarray(p_rows), np.asarray(q_rows)
    rad = np.asarray(radii)
    dist = segment_segment_distance_batch(pts_p[gi], pts_q[gi], pts_p[gj], pts_q[gj])
    thresh = margin * (rad[gi] + rad[gj])
    return [
        (ent_ids[gi[k]], ent_ids[gj[k]], float(dist[k]), float(thresh[k]))
        for k in np.nonzero(dist < thresh)[0]
    ]


def check_axis_clearance(tree: AirwayTree, margin: float = 1.0) -> list[tuple[int, int, float, float]]:
    """Return sibling-subtree clearance violations (empty when the tree is
    valid). Each entry is ``(id_u, id_v, distance, threshold)`` where the
    threshold is ``margin · (D_u + D_v) / 2``."""
    return _clearance_violations(tree.segments, tree.bifurcations, margin)


def _lowest_common_bifurcation(segments: dict[int, AirwaySegment], u: int, v: int) -> int:
    path = set()
    i = u
    while i is not None:
        path.add(i)
        i = segments[i].parent_id
    j = v
    while j not in path:
        j = segments[j].parent_id
    return j


def sample_tree(params: GenerationParams) -> AirwayTree:
    """Sample a full binary airway tree.

    Deterministic for fixed params (including the seed). Candidates are
    rejected and locally redrawn, within bounded retry budgets, until every
    junction transition fits inside its daughters' length budgets and the
    axis-clearance rule holds for all segment capsules and junction
    envelopes. The returned tree therefore always tessellates cleanly.
    """
    params.validate()
    seed = int(params.seed)
    retries: dict[int, int] = {}
    len_retries: dict[int, int] = {}
    exit_cache: dict[tuple, tuple[float, float] | int] = {}

    def bump_split(pid: int, reason: str) -> None:
        retries[pid] = retries.get(pid, 0) + 1
        if retries[pid] > _MAX_SPLIT_RETRIES:
            raise GenerationError(pid, reason)

    def build() -> tuple[dict[int, AirwaySegment], dict[int, BifurcationGeometry]]:
        segments: dict[int, AirwaySegment] = {}
        bifs: dict[int, BifurcationGeometry] = {}

        def segment_length(seg_id: int, generation: int) -> float:
            gen = stream(seed, TAG_SEGMENT, seg_id, len_retries.get(seg_id, 0))
            return _draw_length(
                gen, params.l_mean_per_gen[generation], params.length_sigma_factor, seg_id
            )

        root_twist = float(
            stream(seed, TAG_SPLIT, 0, retries.get(0, 0)).uniform(0.0, 360.0)
        )
        segments[0] = AirwaySegment(
            id=0,
            parent_id=None,
            generation=0,
            diameter=params.root_diameter,
            length=segment_length(0, 0),
            twist=root_twist,
            frame=RigidTransform(),
        )

        todo = [0]
        while todo:
            pid = todo.pop(0)
            parent = segments[pid]
            child_gen = parent.generation + 1
            if child_gen >= params.generations:
                continue
            a_id, b_id = 2 * pid + 1, 2 * pid + 2

            # first draw replays the parent's own twist (same stream/key)
            split = stream(seed, TAG_SPLIT, pid, retries.get(pid, 0))
            plane_twist = float(split.uniform(0.0, 360.0))
            h_a = float(split.uniform(*params.h_range))
            h_b = float(split.uniform(*params.h_range))
            d_a, d_b = h_a * parent.diameter, h_b * parent.diameter
            l_a = segment_length(a_id, child_gen)
            l_b = segment_length(b_id, child_gen)

            # draw above the margin-adjusted floor so sibling clearance
            # holds with the sampler's headroom, not just exactly
            phi_floor = min_branching_angle(
                parent, d_a, d_b, (l_a, l_b), margin=SAMPLER_CLEARANCE_MARGIN
            )
            if phi_floor > params.phi_max:
                raise GenerationError(
                    pid, f"minimum branching angle {phi_floor:.2f} exceeds phi_max"
                )
            # retried splits sample from a range narrowed toward the floor;
            # tighter angles give more compact, collision-free subtrees
            shrink = min(retries.get(pid, 0), 10) * 0.07 * (params.phi_max - phi_floor)
            phi_hi = max(phi_floor, params.phi_max - shrink)
            phi_a = float(split.uniform(phi_floor, phi_hi))
            phi_b = float(split.uniform(phi_floor, phi_hi))
            bif_frame = RigidTransform(
                parent.frame.rotation @ rotation_z(math.radians(plane_twist)), parent.end
            )

            def child(seg_id, diameter, length, phi, side, twist_deg):
                start = bif_frame.apply(daughter_axis_start(diameter / 2, phi, side))
                rot = bif_frame.rotation @ rotation_y(side * math.radians(phi))
                return AirwaySegment(
                    id=seg_id,
                    parent_id=pid,
                    generation=child_gen,
                    diameter=diameter,
                    length=length,
                    twist=twist_deg,
                    frame=RigidTransform(rot, start),
                )

            # a child's own twist comes from its split stream so that
            # retrying its bifurcation later keeps everything reproducible
            twist_a = float(
                stream(seed, TAG_SPLIT, a_id, retries.get(a_id, 0)).uniform(0.0, 360.0)
            )
            twist_b = float(
                stream(seed, TAG_SPLIT, b_id, retries.get(b_id, 0)).uniform(0.0, 360.0)
            )
            seg_a = child(a_id, d_a, l_a, phi_a, +1, twist_a)
            seg_b = child(b_id, d_b, l_b, phi_b, -1, twist_b)
            segments[a_id] = seg_a
            segments[b_id] = seg_b
            bifs[pid] = _build_bifurcation_geometry(
                parent, seg_a, seg_b, phi_a, phi_b, bif_frame
            )
            todo.extend([a_id, b_id])
        return segments, bifs

    for _ in range(_MAX_RESAMPLE_ROUNDS):
        segments, bifs = build()
        tree = AirwayTree(segments=segments, bifurcations=bifs, params=params)

        # every junction transition must fit; solutions depend only on the
        # local radii/lengths/angles, so they are cached by value
        exits: dict[int, float] = {}
        blocked: list[int] = []
        for pid in sorted(bifs):
            bif = bifs[pid]
            a, b = segments[bif.child_a_id], segments[bif.child_b_id]
            key = (
                segments[pid].diameter, a.diameter, b.diameter,
                a.length, b.length, bif.phi_a, bif.phi_b,
            )
            res = exit_cache.get(key)
            if res is None:
                try:
                    res = junction_exit_lengths(tree, bif)
                except TessellationError as err:
                    res = int(err.segment_id)
                exit_cache[key] = res
            if isinstance(res, tuple):
                exits[bif.child_a_id], exits[bif.child_b_id] = res
            else:
                blocked.append(res)
        if blocked:
            for cid in blocked:
                pid = segments[cid].parent_id
                # a too-short daughter is the usual cause; redraw its length
                # first, alternating with new angles and diameters
                if len_retries.get(cid, 0) <= retries.get(pid, 0):
                    len_retries[cid] = len_retries.get(cid, 0) + 1
                    if len_retries[cid] > _MAX_SPLIT_RETRIES:
                        raise GenerationError(
                            cid, "no segment length fits the junction transition"
                        )
                else:
                    bump_split(pid, "no feasible junction transition")
            continue

        violations = _clearance_violations(
            segments, bifs, SAMPLER_CLEARANCE_MARGIN, exits
        )
        if not violations:
            if retries or len_retries:
                log.debug(
                    "sampled tree with retries: %s lengths: %s", retries, len_retries
                )
            return tree
        culprits = set()
        for u, v, _, _ in violations:
            # any split between the common ancestor and either member can
            # swing the colliding subtrees apart
            lca = _lowest_common_bifurcation(segments, u, v)
            candidates = {lca}
            for w in (u, v):
                p = segments[w].parent_id
                while p is not None and p != lca:
                    if p in bifs:
                        candidates.add(p)
                    p = segments[p].parent_id
            # retry the least-retried split near the collision; deeper
            # splits win ties since they perturb the least geometry
            pick = min(
                candidates,
                key=lambda c: (retries.get(c, 0), -segments[c].generation, c),
            )
            culprits.add(pick)
        for pid in culprits:
            bump_split(pid, "could not find non-intersecting branching angles")
    raise GenerationError(0, "clearance resampling did not converge")


# ---------------------------------------------------------------------------
# JSON serialization


def _frame_to_json(f: RigidTransform) -> dict:
    return {
        "rotation": [list(row) for row in f.rotation.tolist()],
        "translation": list(f.translation.tolist()),
    }


def _frame_from_json(d: dict) -> RigidTransform:
    return RigidTransform(np.array(d["rotation"]), np.array(d["translation"]))


def tree_to_json_dict(tree: AirwayTree) -> dict:
    p = tree.params
    return {
        "format_version": TREE_FORMAT_VERSION,
        "params": {
            "generations": p.generations,
            "root_diameter": p.root_diameter,
            "ld_ratio_per_gen": list(p.ld_ratio_per_gen),
            "l_mean_per_gen": list(p.l_mean_per_gen),
            "h_range": list(p.h_range),
            "phi_max": p.phi_max,
            "length_sigma_factor": p.length_sigma_factor,
            "seed": int(p.seed),
        },
        "segments": [
            {
                "id": s.id,
                "parent_id": s.parent_id,
                "generation": s.generation,
                "diameter": s.diameter,
                "length": s.length,
                "twist": s.twist,
                "frame": _frame_to_json(s.frame),
            }
            for s in sorted(tree.segments.values(), key=lambda s: s.id)
        ],
        "bifurcations": [
            {
                "parent_id": b.parent_id,
                "child_a_id": b.child_a_id,
                "child_b_id": b.child_b_id,
                "phi_a": b.phi_a,
                "phi_b": b.phi_b,
                "r_star_a": b.r_star_a,
                "r_star_b": b.r_star_b,
                "carina_center": list(b.carina_center),
                "r_c": b.r_c,
                "tilt_a": b.tilt_a,
                "tilt_b": b.tilt_b,
                "taper": {
                    "steepness": b.taper.steepness,
                    "midpoint": b.taper.midpoint,
                    "start_ratio": b.taper.start_ratio,
                },
                "sagittal_range_a": list(b.sagittal_range_a),
                "sagittal_range_b": list(b.sagittal_range_b),
                "frame": _frame_to_json(b.frame),
            }
            for b in sorted(tree.bifurcations.values(), key=lambda b: b.parent_id)
        ],
    }


def tree_from_json_dict(doc: dict) -> AirwayTree:
    version = doc.get("format_version")
    if version != TREE_FORMAT_VERSION:
        raise FormatError(f"unsupported tree format_version {version!r}")
    p = doc["params"]
    params = GenerationParams(
        generations=p["generations"],
        root_diameter=p["root_diameter"],
        ld_ratio_per_gen=list(p["ld_ratio_per_gen"]),
        l_mean_per_gen=list(p["l_mean_per_gen"]),
        h_range=tuple(p["h_range"]),
        phi_max=p["phi_max"],
        length_sigma_factor=p["length_sigma_factor"],
        seed=p["seed"],
    )
    segments = {
        s["id"]: AirwaySegment(
            id=s["id"],
            parent_id=s["parent_id"],
            generation=s["generation"],
            diameter=s["diameter"],
            length=s["length"],
            twist=s["twist"],
            frame=_frame_from_json(s["frame"]),
        )
        for s in doc["segments"]
    }
    bifurcations = {
        b["parent_id"]: BifurcationGeometry(
            parent_id=b["parent_id"],
            child_a_id=b["child_a_id"],
            child_b_id=b["child_b_id"],
            phi_a=b["phi_a"],
            phi_b=b["phi_b"],
            r_star_a=b["r_star_a"],
            r_star_b=b["r_star_b"],
            carina_center=tuple(b["carina_center"]),
            r_c=b["r_c"],
            tilt_a=b["tilt_a"],
            tilt_b=b["tilt_b"],
            taper=SigmoidTaper(**b["taper"]),
            sagittal_range_a=tuple(b["sagittal_range_a"]),
            sagittal_range_b=tuple(b["sagittal_range_b"]),
            frame=_frame_from_json(b["frame"]),
        )
        for b in doc["bifurcations"]
    }
    return AirwayTree(segments=segments, bifurcations=bifurcations, params=params)


def save_tree(tree: AirwayTree, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tree_to_json_dict(tree), fh, indent=1)


def load_tree(path) -> AirwayTree:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid tree JSON: {e}") from e
    return tree_from_json_dict(doc)


def trees_equal(a: AirwayTree, b: AirwayTree) -> bool:
    """Structural equality over all segments and bifurcation geometry."""
    return tree_to_json_dict(a) == tree_to_json_dict(b)
