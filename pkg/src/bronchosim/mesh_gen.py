"""Watertight interior-surface tessellation of airway trees.

Topology
--------
Each segment contributes a tube of cross-section rings. A bifurcation is
covered by two "trouser leg" lofts, one per daughter, that share the parent
end ring and a carina ridge polyline:

* the parent end ring is phased so vertices 0 and n/2 sit exactly on the
  bifurcation-plane normal (the poles),
* the ridge runs pole to pole across the lumen, arched over the carinal
  flow divider (where the daughters' inner lumen edges cross), lowered by
  the carinal rounding radius,
* daughter a's base loop is the +x half of the parent ring plus the ridge;
  daughter b's is the -x half plus the ridge traversed the other way,
* each base loop lofts through ``bifurcation_rings`` rows to the daughter's
  junction-exit ring, with row radii from :func:`taper_radius` and row
  centers swept along the transition arc.

Every boundary loop is glued by shared vertex indices, so the mesh is
watertight by construction; root and leaf openings are capped with fans.

Ring phase twists linearly along each tube from the parent-junction frame
to the segment's own bifurcation frame, which is how the sampled twist
angle materialises in the surface.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .airway_model import (
    AirwayTree,
    junction_exit_lengths,
    ridge_crest_2d,
    taper_radius,
)
from .errors import FormatError, ParameterError, TessellationError
from .geometry import RigidTransform

log = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12


@dataclass
class TessellationParams:
    ring_segments: int = 16
    rings_per_unit_length: float = 0.5
    bifurcation_rings: int = 6

    def validate(self) -> None:
        if self.ring_segments < 8:
            raise ParameterError("ring_segments", "must be >= 8")
        if self.ring_segments % 2 != 0:
            raise ParameterError("ring_segments", "must be even")
        if not self.rings_per_unit_length > 0:
            raise ParameterError("rings_per_unit_length", "must be > 0")
        if self.bifurcation_rings < 4:
            raise ParameterError("bifurcation_rings", "must be >= 4")


@dataclass
class TriangleMesh:
    """Triangle surface with inward-facing (lumen-side) orientation."""

    vertices: np.ndarray  # (V, 3) float64, mm
    triangles: np.ndarray  # (T, 3) int32
    normals: np.ndarray  # (V, 3) float64, unit

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted per-vertex normals following triangle winding."""
    v = vertices
    t = triangles
    face = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    out = np.zeros_like(v)
    for c in range(3):
        np.add.at(out, t[:, c], face)
    norm = np.linalg.norm(out, axis=1)
    norm[norm == 0.0] = 1.0
    return out / norm[:, None]


# ---------------------------------------------------------------------------
# tessellation


class _Builder:
    def __init__(self):
        self.verts: list[np.ndarray] = []
        self.tris: list[tuple[int, int, int]] = []

    def add_vertex(self, p: np.ndarray) -> int:
        self.verts.append(np.asarray(p, dtype=float))
        return len(self.verts) - 1

    def add_ring(self, points: np.ndarray) -> np.ndarray:
        base = len(self.verts)
        self.verts.extend(points)
        return np.arange(base, base + len(points), dtype=np.int64)

    def band(self, lower: np.ndarray, upper: np.ndarray) -> None:
        """Triangulate between two equal-length vertex cycles (inward)."""
        n = len(lower)
        for k in range(n):
            k1 = (k + 1) % n
            self.tris.append((lower[k], upper[k1], lower[k1]))
            self.tris.append((lower[k], upper[k], upper[k1]))

    def fan_cap(self, ring: np.ndarray, center: np.ndarray, lumen_above: bool) -> None:
        c = self.add_vertex(center)
        n = len(ring)
        for k in range(n):
            k1 = (k + 1) % n
            if lumen_above:
                self.tris.append((c, ring[k], ring[k1]))
            else:
                self.tris.append((c, ring[k1], ring[k]))


def _ring_points(
    frame: RigidTransform, t: float, radius: float, phase: float, n: int
) -> np.ndarray:
    ang = phase + 2.0 * np.pi * np.arange(n) / n
    local = np.stack(
        [radius * np.cos(ang), radius * np.sin(ang), np.full(n, t)], axis=1
    )
    return frame.apply(local)


def _loft_center(
    r_star: float, phi_deg: float, side: int, t_exit: float, s: float
) -> tuple[np.ndarray, np.ndarray]:
    """Center and lateral basis vector of a junction loft row at normalized
    station ``s``, in bifurcation-plane coordinates. The center sweeps the
    transition arc at constant speed, then the straight run to the exit."""
    phi = math.radians(phi_deg)
    arc_len = r_star * phi
    total = arc_len + t_exit
    dist = s * total
    if dist <= arc_len:
        alpha = dist / r_star
        center = np.array(
            [side * r_star * (1.0 - math.cos(alpha)), 0.0, r_star * math.sin(alpha)]
        )
        tangent = np.array([side * math.sin(alpha), 0.0, math.cos(alpha)])
    else:
        t = dist - arc_len
        a0 = np.array([side * r_star * (1.0 - math.cos(phi)), 0.0, r_star * math.sin(phi)])
        tangent = np.array([side * math.sin(phi), 0.0, math.cos(phi)])
        center = a0 + t * tangent
    # lateral = y_hat x tangent, so it matches +x at s=0 and the daughter
    # frame's x axis at s=1
    lateral = np.array([tangent[2], 0.0, -tangent[0]])
    return center, lateral


def _smoothstep(x: float) -> float:
    return x * x * (3.0 - 2.0 * x)


def tessellate(tree: AirwayTree, params: TessellationParams | None = None) -> TriangleMesh:
    """Tessellate ``tree`` into a watertight inward-facing triangle mesh.

    Ring radii on cylindrical stations equal the segment radius exactly;
    junction rows follow the sigmoid taper between parent and daughter
    radii. Raises :class:`TessellationError` when a junction cannot be
    stitched (exit station not found).
    """
    params = params or TessellationParams()
    params.validate()
    n = params.ring_segments
    m = n // 2
    b = _Builder()

    # tube span start (axial station) for every segment
    t_start: dict[int, float] = {tree.root.id: 0.0}
    exit_of: dict[int, float] = {}
    for bif in tree.bifurcations.values():
        t_a, t_b = junction_exit_lengths(tree, bif)
        t_start[bif.child_a_id] = t_a
        t_start[bif.child_b_id] = t_b
        exit_of[bif.child_a_id] = t_a
        exit_of[bif.child_b_id] = t_b

    # per-segment tube rings; ring phase twists from 0 at the start to the
    # segment's own twist at the end so the end ring is pole-aligned with
    # its bifurcation plane
    ring_ids: dict[int, list[np.ndarray]] = {}
    for sid in sorted(tree.segments):
        seg = tree.segments[sid]
        t0 = t_start[sid]
        if not t0 < seg.length:
            raise TessellationError(sid, "junction exit beyond segment length")
        span = seg.length - t0
        # end-ring vertex labeling is invariant under full turns, so wrap
        # the materialized twist to (-pi, pi] and spend enough rings that
        # adjacent rings never shear more than one vertex slot
        twist = math.radians(seg.twist) if not tree.is_leaf(sid) else 0.0
        twist = twist - 2.0 * np.pi * round(twist / (2.0 * np.pi))
        count = max(
            2,
            int(math.ceil(span * params.rings_per_unit_length)) + 1,
            int(math.ceil(abs(twist) / (2.0 * np.pi / n))) + 1,
        )
        stations = np.linspace(t0, seg.length, count)
        rings = []
        for t in stations:
            phase = 0.5 * np.pi + twist * (t - t0) / span
            rings.append(b.add_ring(_ring_points(seg.frame, t, seg.radius, phase, n)))
        for lower, upper in zip(rings, rings[1:]):
            b.band(lower, upper)
        ring_ids[sid] = rings

    # junction lofts
    for pid in sorted(tree.bifurcations):
        bif = tree.bifurcations[pid]
        parent = tree.segments[pid]
        parent_ring = ring_ids[pid][-1]
        r_p = parent.radius
        crest = ridge_crest_2d(tree, bif, exit_of[bif.child_a_id], exit_of[bif.child_b_id])

        # shared ridge polyline, poles included as parent-ring vertices
        ridge = np.empty(m + 1, dtype=np.int64)
        ridge[0] = parent_ring[0]
        ridge[m] = parent_ring[m]
        for l in range(1, m):
            lam = l / m
            bump = math.sin(math.pi * lam)
            local = np.array(
                [crest[0] * bump, r_p * math.cos(math.pi * lam), crest[1] * bump]
            )
            ridge[l] = b.add_vertex(bif.frame.apply(local))

        inv = bif.frame.inverse()
        for child_id, phi, r_star, side in (
            (bif.child_a_id, bif.phi_a, bif.r_star_a, +1),
            (bif.child_b_id, bif.phi_b, bif.r_star_b, -1),
        ):
            child = tree.segments[child_id]
            r_d = child.radius
            t_exit = exit_of[child_id]
            exit_ring = ring_ids[child_id][0]
            taper = replace(bif.taper, start_ratio=r_p / r_d)

            # base loop: parent half ring on the outer side, ridge inboard
            base = np.empty(n, dtype=np.int64)
            for i in range(n):
                inner = (0 < i < m) if side > 0 else (m < i < n)
                if inner:
                    base[i] = ridge[i] if side > 0 else ridge[n - i]
                else:
                    base[i] = parent_ring[i]

            base_pts = inv.apply(np.array([b.verts[i] for i in base]))
            exit_pts = inv.apply(np.array([b.verts[i] for i in exit_ring]))
            phase = 0.5 * np.pi + 2.0 * np.pi * np.arange(n) / n
            cosang, sinang = np.cos(phase), np.sin(phase)
            # blend weight: 1 at the outer wall (follows the tapered
            # sweep), 0 on the whole inner half, which instead morphs the
            # ridge into the exit ring; C1 falloff at the poles keeps the
            # sweep from reaching across the sagittal midplane. A swept
            # ring fatter than the arc radius folds over itself around the
            # hinge, so the sweep fades to the straight column loft as
            # r_star approaches the base ring radius.
            gate = min(1.0, max(0.0, (r_star / r_p - 0.95) / 0.25))
            omega = _smoothstep(np.clip(side * cosang, 0.0, 1.0)) * gate
            up = np.array([[0.0, 1.0, 0.0]])

            rows = [base]
            k_rows = params.bifurcation_rings
            for j in range(1, k_rows):
                s = j / k_rows
                center, lateral = _loft_center(r_star, phi, side, t_exit, s)
                rad = taper_radius(taper, r_d, s)
                raw = (
                    center[None, :]
                    + rad * cosang[:, None] * lateral[None, :]
                    + rad * sinang[:, None] * up
                )
                beta = _smoothstep(s)
                morph = (1.0 - beta) * base_pts + beta * exit_pts
                pts = omega[:, None] * raw + (1.0 - omega[:, None]) * morph
                # rows hugging the mouth may not sag below the parent end
                # plane or they would pierce the parent wall; the floor is
                # tiered per row so clamped rows stay in disjoint z slabs,
                # and kept small so it never lifts a row above the exit
                # ring bottom (the gate already bounds the sag to a few
                # percent of the parent radius)
                rho = np.hypot(pts[:, 0], pts[:, 1])
                floor_j = 0.004 * r_p * j
                near_rim = rho < r_p + 0.05 * r_d
                pts[:, 2] = np.where(
                    near_rim, np.maximum(pts[:, 2], floor_j), pts[:, 2]
                )
                rows.append(b.add_ring(bif.frame.apply(pts)))
            rows.append(exit_ring)
            for lower, upper in zip(rows, rows[1:]):
                b.band(lower, upper)

    # caps
    root = tree.root
    b.fan_cap(ring_ids[root.id][0], root.start, lumen_above=True)
    for leaf in tree.leaves:
        seg = tree.segments[leaf]
        b.fan_cap(ring_ids[leaf][-1], seg.end, lumen_above=False)

    vertices = np.array(b.verts)
    triangles = np.array(b.tris, dtype=np.int32)
    return TriangleMesh(vertices, triangles, vertex_normals(vertices, triangles))


# ---------------------------------------------------------------------------
# validation


@dataclass
class MeshValidationReport:
    vertex_count: int
    triangle_count: int
    watertight: bool
    boundary_edges: list[tuple[int, int]]
    non_manifold_edges: list[tuple[int, int]]
    winding_consistent: bool
    inward_normals: bool
    signed_volume: float
    euler_characteristic: int
    degenerate_triangles: list[int]
    self_intersections: int
    self_intersection_pairs: list[tuple[int, int]]

    @property
    def passes(self) -> bool:
        return (
            self.watertight
            and self.winding_consistent
            and self.inward_normals
            and not self.degenerate_triangles
            and self.self_intersections == 0
        )

    def summary(self) -> str:
        status = "PASS" if self.passes else "FAIL"
        return (
            f"{status}: V={self.vertex_count} T={self.triangle_count} "
            f"euler={self.euler_characteristic} "
            f"boundary={len(self.boundary_edges)} "
            f"non_manifold={len(self.non_manifold_edges)} "
            f"winding={'ok' if self.winding_consistent else 'bad'} "
            f"inward={'ok' if self.inward_normals else 'bad'} "
            f"degenerate={len(self.degenerate_triangles)} "
            f"self_intersections={self.self_intersections}"
        )


def _edge_census(triangles: np.ndarray):
    directed: dict[tuple[int, int], int] = {}
    undirected: dict[tuple[int, int], int] = {}
    for a, c, d in triangles:
        for u, v in ((a, c), (c, d), (d, a)):
            directed[(u, v)] = directed.get((u, v), 0) + 1
            key = (u, v) if u < v else (v, u)
            undirected[key] = undirected.get(key, 0) + 1
    return directed, undirected


def _triangle_aabb_pairs(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Candidate triangle pairs whose AABBs overlap, via a uniform grid."""
    tv = vertices[triangles]
    lo = tv.min(axis=1)
    hi = tv.max(axis=1)
    extent = hi - lo
    cell = max(float(np.median(extent.max(axis=1))) * 1.5, 1e-9)
    inv = 1.0 / cell
    lo_cell = np.floor(lo * inv).astype(np.int64)
    hi_cell = np.floor(hi * inv).astype(np.int64)

    buckets: dict[tuple[int, int, int], list[int]] = {}
    for t in range(len(triangles)):
        x0, y0, z0 = lo_cell[t]
        x1, y1, z1 = hi_cell[t]
        for x in range(x0, x1 + 1):
            for y in range(y0, y1 + 1):
                for z in range(z0, z1 + 1):
                    buckets.setdefault((x, y, z), []).append(t)

    pairs = set()
    for ids in buckets.values():
        if len(ids) < 2:
            continue
        for i in range(len(ids)):
            ti = ids[i]
            for j in range(i + 1, len(ids)):
                tj = ids[j]
                pairs.add((ti, tj) if ti < tj else (tj, ti))
    if not pairs:
        return np.empty((0, 2), dtype=np.int64)
    arr = np.array(sorted(pairs), dtype=np.int64)
    # exact AABB overlap filter
    i, j = arr[:, 0], arr[:, 1]
    keep = np.all(lo[i] <= hi[j], axis=1) & np.all(lo[j] <= hi[i], axis=1)
    return arr[keep]


def _tri_tri_intersect_batch(
    vertices: np.ndarray, triangles: np.ndarray, pairs: np.ndarray
) -> np.ndarray:
    """Boolean per pair: do the two triangles properly intersect?

    Interval-overlap test on the line of intersection of the two support
    planes. Pairs that merely touch within 1e-9 are not counted; coplanar
    pairs are tested by 2D separating axes.
    """
    if len(pairs) == 0:
        return np.zeros(0, dtype=bool)
    eps = 1e-9
    va = vertices[triangles[pairs[:, 0]]]  # (P, 3, 3)
    vb = vertices[triangles[pairs[:, 1]]]

    def plane(tri):
        nrm = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        d = -np.einsum("ij,ij->i", nrm, tri[:, 0])
        return nrm, d

    n1, d1 = plane(va)
    n2, d2 = plane(vb)

    db = np.einsum("ij,ikj->ik", n1, vb) + d1[:, None]  # b's verts vs a's plane
    da = np.einsum("ij,ikj->ik", n2, va) + d2[:, None]
    scale1 = np.linalg.norm(n1, axis=1)[:, None] + 1e-300
    scale2 = np.linalg.norm(n2, axis=1)[:, None] + 1e-300
    db_s = db / scale1
    da_s = da / scale2

    out = np.zeros(len(pairs), dtype=bool)
    sep_b = np.all(db_s > eps, axis=1) | np.all(db_s < -eps, axis=1)
    sep_a = np.all(da_s > eps, axis=1) | np.all(da_s < -eps, axis=1)
    coplanar = np.all(np.abs(db_s) <= eps, axis=1)
    active = ~(sep_a | sep_b) & ~coplanar

    if np.any(active):
        idx = np.nonzero(active)[0]
        line = np.cross(n1[idx], n2[idx])
        axis = np.argmax(np.abs(line), axis=1)

        def interval(tri, dist):
            # projection of triangle onto the intersection line, restricted
            # to the segment where the triangle crosses the other plane
            proj = np.take_along_axis(
                tri, axis[:, None, None].repeat(3, axis=1), axis=2
            )[:, :, 0]
            t_lo = np.full(len(idx), np.inf)
            t_hi = np.full(len(idx), -np.inf)
            for i0, i1 in ((0, 1), (1, 2), (2, 0)):
                d0, dd = dist[:, i0], dist[:, i1]
                crosses = (d0 > eps) != (dd > eps)
                denom = d0 - dd
                safe = np.where(np.abs(denom) > 1e-300, denom, 1.0)
                w = d0 / safe
                t = proj[:, i0] + w * (proj[:, i1] - proj[:, i0])
                t_lo = np.where(crosses, np.minimum(t_lo, t), t_lo)
                t_hi = np.where(crosses, np.maximum(t_hi, t), t_hi)
            return t_lo, t_hi

        a_lo, a_hi = interval(va[idx], da_s[idx])
        b_lo, b_hi = interval(vb[idx], db_s[idx])
        overlap = (np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo)) > eps
        overlap &= np.isfinite(a_lo) & np.isfinite(b_lo)
        out[idx] = overlap

    if np.any(coplanar):
        for k in np.nonzero(coplanar)[0]:
            out[k] = _coplanar_overlap(va[k], vb[k], n1[k])
    return out


def _coplanar_overlap(t1: np.ndarray, t2: np.ndarray, nrm: np.ndarray) -> bool:
    drop = int(np.argmax(np.abs(nrm)))
    keep = [i for i in range(3) if i != drop]
    a = t1[:, keep]
    c = t2[:, keep]
    for poly_a, poly_b in ((a, c), (c, a)):
        for i in range(3):
            edge = poly_a[(i + 1) % 3] - poly_a[i]
            ax = np.array([-edge[1], edge[0]])
            pa = poly_a @ ax
            pb = poly_b @ ax
            if pa.max() <= pb.min() + 1e-12 or pb.max() <= pa.min() + 1e-12:
                return False
    return True


def self_intersections(
    mesh: TriangleMesh, max_pairs: int = 20
) -> tuple[int, list[tuple[int, int]]]:
    """Count intersecting non-adjacent triangle pairs."""
    pairs = _triangle_aabb_pairs(mesh.vertices, mesh.triangles)
    if len(pairs):
        ta = mesh.triangles[pairs[:, 0]]
        tb = mesh.triangles[pairs[:, 1]]
        shares = np.zeros(len(pairs), dtype=bool)
        for i in range(3):
            for j in range(3):
                shares |= ta[:, i] == tb[:, j]
        pairs = pairs[~shares]
    hits = _tri_tri_intersect_batch(mesh.vertices, mesh.triangles, pairs)
    bad = pairs[hits]
    return len(bad), [tuple(map(int, p)) for p in bad[:max_pairs]]


def validate_mesh(mesh: TriangleMesh) -> MeshValidationReport:
    """Check manifoldness, orientation, degeneracy, and self-intersections."""
    v, t = mesh.vertices, mesh.triangles
    directed, undirected = _edge_census(t)
    boundary = sorted(e for e, c in undirected.items() if c == 1)
    non_manifold = sorted(e for e, c in undirected.items() if c > 2)
    watertight = not boundary and not non_manifold
    # consistent winding: every directed edge used exactly once
    winding = watertight and all(c == 1 for c in directed.values())

    cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    degenerate = [int(i) for i in np.nonzero(areas <= DEGENERATE_AREA)[0]]

    volume = float(
        np.einsum("ij,ij->i", v[t[:, 0]], np.cross(v[t[:, 1]], v[t[:, 2]])).sum() / 6.0
    )
    inward = bool(watertight and winding and volume < 0.0)

    n_si, si_pairs = self_intersections(mesh)
    euler = len(v) - len(undirected) + len(t)
    report = MeshValidationReport(
        vertex_count=len(v),
        triangle_count=len(t),
        watertight=watertight,
        boundary_edges=[tuple(map(int, e)) for e in boundary[:50]],
        non_manifold_edges=[tuple(map(int, e)) for e in non_manifold[:50]],
        winding_consistent=winding,
        inward_normals=inward,
        signed_volume=volume,
        euler_characteristic=euler,
        degenerate_triangles=degenerate[:50],
        self_intersections=n_si,
        self_intersection_pairs=si_pairs,
    )
    return report


# ---------------------------------------------------------------------------
# OBJ / STL export and import


def write_obj(mesh: TriangleMesh, path) -> None:
    """ASCII OBJ with v/vn/f records; indices are 1-based."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# bronchial surface: {len(mesh.vertices)} vertices, "
                 f"{len(mesh.triangles)} triangles\n")
        for p in mesh.vertices:
            fh.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        for nv in mesh.normals:
            fh.write(f"vn {nv[0]:.9g} {nv[1]:.9g} {nv[2]:.9g}\n")
        for a, c, d in mesh.triangles + 1:
            fh.write(f"f {a}//{a} {c}//{c} {d}//{d}\n")


def read_obj(path) -> TriangleMesh:
    verts, norms, faces = [], [], []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise FormatError(f"OBJ line {lineno}: malformed vertex")
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vn":
                norms.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) < 3:
                    raise FormatError(f"OBJ line {lineno}: face needs 3+ vertices")
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
    if not verts or not faces:
        raise FormatError("OBJ contains no usable geometry")
    vertices = np.array(verts)
    triangles = np.array(faces, dtype=np.int32)
    if len(norms) == len(verts):
        normals = np.asarray(norms, dtype=float)
    else:
        normals = vertex_normals(vertices, triangles)
    return TriangleMesh(vertices, triangles, normals)


def write_stl(mesh: TriangleMesh, path) -> None:
    """Binary little-endian STL: 80-byte header + uint32 count + facets."""
    tri = mesh.vertices[mesh.triangles]
    nrm = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    lens = np.linalg.norm(nrm, axis=1)
    lens[lens == 0.0] = 1.0
    nrm /= lens[:, None]
    with open(path, "wb") as fh:
        fh.write(b"bronchial airway surface".ljust(80, b" "))
        fh.write(struct.pack("<I", len(tri)))
        for i in range(len(tri)):
            fh.write(struct.pack("<3f", *nrm[i].astype(np.float32)))
            for p in tri[i]:
                fh.write(struct.pack("<3f", *p.astype(np.float32)))
            fh.write(struct.pack("<H", 0))


def read_stl(path) -> TriangleMesh:
    """Binary STL reader; identical vertices are merged so manifold checks
    can run on the result."""
    with open(path, "rb") as fh:
        header = fh.read(80)
        if len(header) < 80:
            raise FormatError("STL header truncated", offset=len(header))
        raw = fh.read(4)
        if len(raw) < 4:
            raise FormatError("STL triangle count truncated", offset=80)
        (count,) = struct.unpack("<I", raw)
        payload = fh.read()
    expected = count * 50
    if len(payload) != expected:
        raise FormatError(
            f"STL payload holds {len(payload)} bytes, expected {expected}",
            offset=84 + min(len(payload), expected),
        )
    data = np.frombuffer(payload, dtype=np.uint8).reshape(count, 50)
    floats = np.ascontiguousarray(data[:, :48]).view("<f4").reshape(count, 4, 3)
    corners = floats[:, 1:4, :].astype(np.float64).reshape(-1, 3)
    uniq, inverse = np.unique(corners, axis=0, return_inverse=True)
    triangles = inverse.reshape(count, 3).astype(np.int32)
    return TriangleMesh(uniq, triangles, vertex_normals(uniq, triangles))
