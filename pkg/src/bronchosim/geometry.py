"""Small 3D geometry toolkit: rotations, rigid transforms, segment distances.

Conventions: right-handed frames, column-vector rotation matrices, all
distances in millimetres, angles in radians unless a name says ``_deg``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def unit(v: np.ndarray) -> np.ndarray:
    """Return ``v`` normalised to unit length."""
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalise a zero vector")
    return v / n


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about ``axis`` (need not be unit length)."""
    a = unit(np.asarray(axis, dtype=float))
    c, s = np.cos(angle), np.sin(angle)
    x, y, z = a
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def rotation_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class RigidTransform:
    """Rotation plus translation mapping local coordinates to world."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point or an (N, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def apply_vector(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate direction vectors (no translation)."""
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self ∘ other (apply ``other`` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix (row-major layout when tolisted)."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError("expected a 4x4 matrix")
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    @property
    def x_axis(self) -> np.ndarray:
        return self.rotation[:, 0]

    @property
    def y_axis(self) -> np.ndarray:
        return self.rotation[:, 1]

    @property
    def z_axis(self) -> np.ndarray:
        return self.rotation[:, 2]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Distance from point ``p`` to segment ``ab``."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.linalg.norm(p - a))
    t = float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(a + t * ab - p))


def segment_segment_distance(
    p1: np.ndarray, q1: np.ndarray, p2: np.ndarray, q2: np.ndarray
) -> float:
    """Closest distance between segments ``p1q1`` and ``p2q2``.

    Scalar fast path (plain floats); the batched variant below is the
    vectorised twin used for all-pairs checks.
    """
    p1x, p1y, p1z = float(p1[0]), float(p1[1]), float(p1[2])
    d1x, d1y, d1z = float(q1[0]) - p1x, float(q1[1]) - p1y, float(q1[2]) - p1z
    p2x, p2y, p2z = float(p2[0]), float(p2[1]), float(p2[2])
    d2x, d2y, d2z = float(q2[0]) - p2x, float(q2[1]) - p2y, float(q2[2]) - p2z
    rx, ry, rz = p1x - p2x, p1y - p2y, p1z - p2z

    a = d1x * d1x + d1y * d1y + d1z * d1z
    e = d2x * d2x + d2y * d2y + d2z * d2z
    f = d2x * rx + d2y * ry + d2z * rz
    c = d1x * rx + d1y * ry + d1z * rz
    b = d1x * d2x + d1y * d2y + d1z * d2z
    denom = a * e - b * b

    eps = 1e-30
    if denom > eps:
        s = min(max((b * f - c * e) / denom, 0.0), 1.0)
    else:
        s = 0.0
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
    dy = (p1y + s * d1y) - (p2y + t * d2y)
    dz = (p1z + s * d1z) - (p2z + t * d2z)
    return (dx * dx + dy * dy + dz * dz) ** 0.5


def segment_segment_distance_batch(
    p1: np.ndarray, q1: np.ndarray, p2: np.ndarray, q2: np.ndarray
) -> np.ndarray:
    """Vectorised closest distance between pairs of segments.

    All inputs are (N, 3). Follows the standard clamped closest-point
    recipe; degenerate (zero length) segments are handled.
    """
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.einsum("ij,ij->i", d1, d1)
    e = np.einsum("ij,ij->i", d2, d2)
    f = np.einsum("ij,ij->i", d2, r)
    c = np.einsum("ij,ij->i", d1, r)
    b = np.einsum("ij,ij->i", d1, d2)
    denom = a * e - b * b

    eps = 1e-30
    # segment 1 parameter
    s = np.where(denom > eps, np.clip((b * f - c * e) / np.where(denom > eps, denom, 1.0), 0.0, 1.0), 0.0)
    # refine against degenerate segment 1
    s = np.where(a <= eps, 0.0, s)
    t = np.where(e > eps, (b * s + f) / np.where(e > eps, e, 1.0), 0.0)

    # clamp t and recompute s where clamping happened
    t_clamped = np.clip(t, 0.0, 1.0)
    need = (t != t_clamped) & (a > eps)
    s = np.where(need, np.clip((t_clamped * b - c) / np.where(a > eps, a, 1.0), 0.0, 1.0), s)
    t = t_clamped

    c1 = p1 + s[:, None] * d1
    c2 = p2 + t[:, None] * d2
    return np.linalg.norm(c1 - c2, axis=1)


def polyline_lengths(points: np.ndarray) -> np.ndarray:
    """Cumulative arc length at each vertex of a polyline, starting at 0."""
    pts = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def polyline_point(points: np.ndarray, cumlen: np.ndarray, s: float) -> np.ndarray:
    """Point at arc length ``s`` along the polyline (clamped to its span)."""
    s = float(np.clip(s, 0.0, cumlen[-1]))
    i = int(np.searchsorted(cumlen, s, side="right") - 1)
    i = min(i, len(cumlen) - 2)
    span = cumlen[i + 1] - cumlen[i]
    f = 0.0 if span == 0.0 else (s - cumlen[i]) / span
    return points[i] * (1.0 - f) + points[i + 1] * f


def polyline_tangent(points: np.ndarray, cumlen: np.ndarray, s: float) -> np.ndarray:
    """Unit tangent of the polyline at arc length ``s``."""
    s = float(np.clip(s, 0.0, cumlen[-1]))
    i = int(np.searchsorted(cumlen, s, side="right") - 1)
    i = min(i, len(cumlen) - 2)
    d = points[i + 1] - points[i]
    n = np.linalg.norm(d)
    if n == 0.0:
        # fall back to the next non-degenerate span
        for j in range(i + 1, len(points) - 1):
            d = points[j + 1] - points[j]
            n = np.linalg.norm(d)
            if n > 0.0:
                break
    return d / n
