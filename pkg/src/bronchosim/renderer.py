"""Ray-cast rendering of airway meshes with pixel-exact depth.

A bounding-volume hierarchy accelerates closest-hit queries; traversal and
triangle intersection run in compiled kernels. One primary ray is cast per
pixel (no anti-aliasing, so the depth ground truth stays crisp). Depth is
z-depth — the hit distance projected on the optical axis — and disparity
is its reciprocal. Image intensity uses headlight shading: a Lambert term
times an inverse-quadratic distance falloff, which is what makes the lumen
(the deepest region) the darkest, the property the threshold segmentation
relies on.

Fly-through paths march down the tree centerline with bounded pose jitter;
every pose is re-jittered until it sits safely inside the lumen, so all
primary rays are guaranteed to hit the (watertight) surface.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .airway_model import AirwayTree
from .dataset_io import (
    DEFAULT_PNG_DEPTH_SCALE,
    DatasetManifest,
    FrameRecord,
    params_hash,
    write_pfm,
    write_png8,
    write_png16,
)
from .errors import ParameterError, PlacementError, RouteError
from .geometry import RigidTransform, rotation_x, rotation_y, rotation_z
from .mesh_gen import TriangleMesh
from .rng import TAG_POSE, TAG_ROUTE, stream

log = logging.getLogger(__name__)

# barycentric slack: widening both sides of every edge test lets rays on a
# shared edge hit at least one of its triangles instead of slipping through
BARY_EPS = 1e-12
_LEAF_SIZE = 4
_MAX_POSE_RETRIES = 32


# ---------------------------------------------------------------------------
# BVH


@njit(cache=True, nogil=True)
def _closest_hits(
    origins, dirs, t_lows,
    node_min, node_max, node_left, node_right, node_start, node_count,
    order, v0, e1, e2,
    out_t, out_id,
):
    stack = np.empty(64, dtype=np.int64)
    for r in range(origins.shape[0]):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        t_low = t_lows[r]
        best_t = np.inf
        best_id = -1
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            # slab test, exact for axis-parallel rays
            tn = t_low
            tf = best_t
            ok = True
            for ax in range(3):
                o = origins[r, ax]
                d = dirs[r, ax]
                lo = node_min[node, ax]
                hi = node_max[node, ax]
                if d != 0.0:
                    inv = 1.0 / d
                    ta = (lo - o) * inv
                    tb = (hi - o) * inv
                    if ta > tb:
                        ta, tb = tb, ta
                    if ta > tn:
                        tn = ta
                    if tb < tf:
                        tf = tb
                    if tn > tf:
                        ok = False
                        break
                elif o < lo or o > hi:
                    ok = False
                    break
            if not ok:
                continue
            left = node_left[node]
            if left >= 0:
                stack[top] = node_right[node]
                top += 1
                stack[top] = left
                top += 1
                continue
            start = node_start[node]
            for k in range(start, start + node_count[node]):
                tri = order[k]
                e1x, e1y, e1z = e1[tri, 0], e1[tri, 1], e1[tri, 2]
                e2x, e2y, e2z = e2[tri, 0], e2[tri, 1], e2[tri, 2]
                px = dy * e2z - dz * e2y
                py = dz * e2x - dx * e2z
                pz = dx * e2y - dy * e2x
                det = e1x * px + e1y * py + e1z * pz
                if det == 0.0:
                    continue
                inv_det = 1.0 / det
                tx = ox - v0[tri, 0]
                ty = oy - v0[tri, 1]
                tz = oz - v0[tri, 2]
                u = (tx * px + ty * py + tz * pz) * inv_det
                if u < -BARY_EPS or u > 1.0 + BARY_EPS:
                    continue
                qx = ty * e1z - tz * e1y
                qy = tz * e1x - tx * e1z
                qz = tx * e1y - ty * e1x
                v = (dx * qx + dy * qy + dz * qz) * inv_det
                if v < -BARY_EPS or u + v > 1.0 + BARY_EPS:
                    continue
                t = (e2x * qx + e2y * qy + e2z * qz) * inv_det
                if t < t_low:
                    continue
                if t < best_t or (t == best_t and tri < best_id):
                    best_t = t
                    best_id = tri
        out_t[r] = best_t
        out_id[r] = best_id


class RayAccelerator:
    """Immutable BVH over a triangle mesh; shareable across threads.

    Closest-hit queries agree with brute-force all-triangle intersection:
    same triangle id, same distance (ties break toward the lower id).
    """

    def __init__(self, mesh: TriangleMesh):
        tris = mesh.triangles
        if len(tris) == 0:
            raise ParameterError("mesh", "cannot accelerate an empty mesh")
        verts = mesh.vertices.astype(np.float64)
        corners = verts[tris]
        self.v0 = np.ascontiguousarray(corners[:, 0])
        self.e1 = np.ascontiguousarray(corners[:, 1] - corners[:, 0])
        self.e2 = np.ascontiguousarray(corners[:, 2] - corners[:, 0])
        n = np.cross(self.e1, self.e2)
        lens = np.linalg.norm(n, axis=1)
        lens[lens == 0.0] = 1.0
        self.tri_normals = n / lens[:, None]

        lo = corners.min(axis=1)
        hi = corners.max(axis=1)
        centroid = corners.mean(axis=1)

        order = np.arange(len(tris), dtype=np.int64)
        node_min, node_max = [], []
        node_left, node_right, node_start, node_count = [], [], [], []

        def new_node() -> int:
            node_min.append(None)
            node_max.append(None)
            node_left.append(-1)
            node_right.append(-1)
            node_start.append(0)
            node_count.append(0)
            return len(node_min) - 1

        def build(idx: int, start: int, count: int) -> None:
            sel = order[start : start + count]
            node_min[idx] = lo[sel].min(axis=0)
            node_max[idx] = hi[sel].max(axis=0)
            if count <= _LEAF_SIZE:
                node_start[idx] = start
                node_count[idx] = count
                return
            c = centroid[sel]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            half = count // 2
            # median split on the widest centroid axis, stable for ties
            part = np.argsort(c[:, axis], kind="stable")
            order[start : start + count] = sel[part]
            li, ri = new_node(), new_node()
            node_left[idx] = li
            node_right[idx] = ri
            build(li, start, half)
            build(ri, start + half, count - half)

        import sys

        limit = sys.getrecursionlimit()
        sys.setrecursionlimit(max(limit, 64 + 2 * int(np.ceil(np.log2(len(tris) + 1))) * 8))
        root = new_node()
        build(root, 0, len(tris))
        sys.setrecursionlimit(limit)

        self.order = order
        self.node_min = np.ascontiguousarray(np.array(node_min))
        self.node_max = np.ascontiguousarray(np.array(node_max))
        self.node_left = np.array(node_left, dtype=np.int64)
        self.node_right = np.array(node_right, dtype=np.int64)
        self.node_start = np.array(node_start, dtype=np.int64)
        self.node_count = np.array(node_count, dtype=np.int64)
        self.triangle_count = len(tris)

    def closest_hit(
        self, origins: np.ndarray, dirs: np.ndarray, t_min=0.0
    ) -> tuple[np.ndarray, np.ndarray]:
        """Closest intersections for a batch of rays.

        Returns ``(t, triangle_id)`` with ``t`` the ray-length distance
        (inf on miss) and ``triangle_id`` −1 on miss. ``t_min`` is a scalar
        or per-ray lower bound on accepted distances.
        """
        origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
        t_lows = np.broadcast_to(
            np.asarray(t_min, dtype=np.float64), (len(origins),)
        ).copy()
        out_t = np.empty(len(origins))
        out_id = np.empty(len(origins), dtype=np.int64)
        _closest_hits(
            origins, dirs, t_lows,
            self.node_min, self.node_max, self.node_left, self.node_right,
            self.node_start, self.node_count,
            self.order, self.v0, self.e1, self.e2,
            out_t, out_id,
        )
        return out_t, out_id


def build_accelerator(mesh: TriangleMesh) -> RayAccelerator:
    """Build the BVH for ``mesh``; see :class:`RayAccelerator`."""
    return RayAccelerator(mesh)


# ---------------------------------------------------------------------------
# cameras and frames


@dataclass
class Camera:
    """Pinhole camera; the optical axis is the pose's +z, +y is image-up."""

    resolution: tuple[int, int] = (256, 256)  # (width, height)
    vertical_fov: float = 90.0  # degrees
    pose: RigidTransform = field(default_factory=RigidTransform)
    near_clip: float = 0.1  # mm

    def validate(self) -> None:
        w, h = self.resolution
        if w < 16 or h < 16:
            raise ParameterError("resolution", "must be at least 16x16")
        if not (10.0 <= self.vertical_fov <= 170.0):
            raise ParameterError("vertical_fov", "must be in [10, 170] degrees")
        if not self.near_clip > 0:
            raise ParameterError("near_clip", "must be > 0")

    def ray_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space unit ray directions (H*W, 3) through pixel centers,
        row-major from the top-left pixel, and the per-ray factor that
        converts ray length to z-depth."""
        w, h = self.resolution
        tan_v = math.tan(math.radians(self.vertical_fov) / 2.0)
        xs = (2.0 * (np.arange(w) + 0.5) / w - 1.0) * tan_v * (w / h)
        ys = (1.0 - 2.0 * (np.arange(h) + 0.5) / h) * tan_v
        gx, gy = np.meshgrid(xs, ys)
        local = np.stack([gx, gy, np.ones_like(gx)], axis=-1).reshape(-1, 3)
        norms = np.linalg.norm(local, axis=1)
        local /= norms[:, None]
        world = local @ self.pose.rotation.T
        return world, local[:, 2].copy()


@dataclass
class ShadingParams:
    """Headlight shading: Lambert times inverse-quadratic falloff.

    ``intensity = gain * max(n . view, 0) / (1 + (t / falloff_mm)^2)``
    with ``t`` the ray-length distance to the hit, clamped to [0, 1].
    """

    falloff_mm: float = 20.0
    gain: float = 1.0

    def validate(self) -> None:
        if not self.falloff_mm > 0:
            raise ParameterError("falloff_mm", "must be > 0")
        if not self.gain > 0:
            raise ParameterError("gain", "must be > 0")


@dataclass
class FrameSample:
    """One rendered frame: intensities, z-depth (mm), disparity (1/mm)."""

    image: np.ndarray
    depth: np.ndarray
    disparity: np.ndarray
    hit: np.ndarray
    pose: RigidTransform
    frame_index: int = 0


def render_frame(
    accel: RayAccelerator,
    cam: Camera,
    shading: ShadingParams | None = None,
    threads: int = 1,
    frame_index: int = 0,
) -> FrameSample:
    """Cast one primary ray per pixel and shade with the headlight model.

    Raises :class:`PlacementError` when any primary ray escapes — with a
    watertight mesh that can only happen if the camera is outside the
    lumen.
    """
    shading = shading or ShadingParams()
    cam.validate()
    shading.validate()
    w, h = cam.resolution
    dirs, axial = cam.ray_grid()
    origins = np.broadcast_to(cam.pose.translation, dirs.shape)
    t_lows = cam.near_clip / axial

    t = np.empty(len(dirs))
    ids = np.empty(len(dirs), dtype=np.int64)
    if threads <= 1 or h < 2 * threads:
        t, ids = accel.closest_hit(origins, dirs, t_lows)
    else:
        # row bands; every band writes disjoint output slices, so the
        # result is byte-identical for any thread count
        bands = np.array_split(np.arange(h), threads)

        def work(rows: np.ndarray) -> None:
            sel = slice(rows[0] * w, (rows[-1] + 1) * w)
            t[sel], ids[sel] = accel.closest_hit(origins[sel], dirs[sel], t_lows[sel])

        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, [b for b in bands if len(b)]))

    hit = ids >= 0
    if not hit.all():
        raise PlacementError(
            f"{int((~hit).sum())} of {len(dirs)} primary rays escape the "
            "surface; the camera is not inside the lumen"
        )
    depth = (t * axial).reshape(h, w)
    normals = accel.tri_normals[ids]
    lambert = np.maximum(-(normals * dirs).sum(axis=1), 0.0)
    falloff = 1.0 / (1.0 + (t / shading.falloff_mm) ** 2)
    image = np.clip(shading.gain * lambert * falloff, 0.0, 1.0).reshape(h, w)
    return FrameSample(
        image=image,
        depth=depth,
        disparity=1.0 / depth,
        hit=hit.reshape(h, w),
        pose=cam.pose,
        frame_index=frame_index,
    )


# ---------------------------------------------------------------------------
# fly-through paths


@dataclass
class JitterParams:
    """Bounded pose perturbations along a fly-through."""

    max_pitch_deg: float = 5.0
    max_yaw_deg: float = 5.0
    max_roll_deg: float = 10.0
    max_offset_frac: float = 0.15  # of the local radius, lateral

    def validate(self) -> None:
        for name in ("max_pitch_deg", "max_yaw_deg", "max_roll_deg"):
            if getattr(self, name) < 0:
                raise ParameterError(name, "must be >= 0")
        if not (0.0 <= self.max_offset_frac < 1.0):
            raise ParameterError("max_offset_frac", "must be in [0, 1)")

    @property
    def zero(self) -> bool:
        return (
            self.max_pitch_deg == 0.0
            and self.max_yaw_deg == 0.0
            and self.max_roll_deg == 0.0
            and self.max_offset_frac == 0.0
        )


@dataclass
class CameraPath:
    """Ordered poses marching down a branch sequence."""

    poses: list[RigidTransform]
    target_segment_ids: list[int]
    step_mm: float
    seed: int


def _align_rotation(rot: np.ndarray, new_z: np.ndarray) -> np.ndarray:
    """Minimal rotation taking ``rot``'s z column onto ``new_z`` (parallel
    transport: no spurious roll accumulates along the path)."""
    z = rot[:, 2]
    c = float(np.clip(z @ new_z, -1.0, 1.0))
    axis = np.cross(z, new_z)
    s = float(np.linalg.norm(axis))
    if s < 1e-15:
        return rot if c > 0.0 else -rot
    axis = axis / s
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    align = np.eye(3) + s * k + (1.0 - c) * (k @ k)
    return align @ rot


_PROBE_DIRS = np.array(
    [
        [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1],
        [1, 1, 1], [1, 1, -1], [1, -1, 1], [1, -1, -1],
        [-1, 1, 1], [-1, 1, -1], [-1, -1, 1], [-1, -1, -1],
    ],
    dtype=np.float64,
)
_PROBE_DIRS /= np.linalg.norm(_PROBE_DIRS, axis=1)[:, None]


def _clearance(accel: RayAccelerator, point: np.ndarray) -> float:
    """Conservative distance from ``point`` to the surface: the nearest
    probe-ray hit. Returns 0 when any probe escapes (point outside)."""
    origins = np.broadcast_to(point, _PROBE_DIRS.shape)
    t, ids = accel.closest_hit(origins, _PROBE_DIRS, 0.0)
    if (ids < 0).any():
        return 0.0
    return float(t.min())


def resolve_route(tree: AirwayTree, route, max_depth: int | None = None) -> list[int]:
    """Expand a route spec into a root-to-target segment id list.

    ``route`` is a per-bifurcation choice list (0 = first daughter, 1 =
    second) or an integer seed from which choices are drawn; seed-driven
    walks continue to a leaf, or stop after ``max_depth`` choices. Capping
    the depth keeps a runway of unexplored generations ahead of the
    camera, so terminal end caps stay occluded or distant.
    """
    if isinstance(route, (int, np.integer)):
        gen = stream(int(route), TAG_ROUTE)
        ids = [0]
        while tree.children(ids[-1]) is not None and (
            max_depth is None or len(ids) - 1 < max_depth
        ):
            kids = tree.children(ids[-1])
            ids.append(kids[int(gen.integers(0, 2))])
        return ids
    ids = [0]
    for k, choice in enumerate(route):
        kids = tree.children(ids[-1])
        if kids is None:
            raise RouteError(
                f"route step {k}: segment {ids[-1]} is a leaf, nothing to choose"
            )
        if choice not in (0, 1):
            raise RouteError(f"route step {k}: choice must be 0 or 1, got {choice!r}")
        ids.append(kids[choice])
    return ids


def generate_flythrough(
    tree: AirwayTree,
    mesh: TriangleMesh,
    route=None,
    step_mm: float = 2.0,
    jitter: JitterParams | None = None,
    seed: int = 0,
    accel: RayAccelerator | None = None,
    max_depth: int | None = None,
    end_inset_mm: float | None = None,
) -> CameraPath:
    """March a camera down the centerline of a branch sequence.

    Poses are spaced ``step_mm`` apart along the route polyline (segment
    axes bridged across junctions), looking down-lumen, with bounded jitter
    drawn from per-pose streams. A jittered pose whose probe clearance
    drops under a tenth of the local radius is redrawn; clearance is judged
    against the actual mesh surface. Same seed, same path.

    The walk stops ``end_inset_mm`` short of the route end (default: two
    diameters of the final segment) — pressed against the terminal wall
    there is no lumen left to look down.
    """
    jitter = jitter or JitterParams()
    jitter.validate()
    if not step_mm > 0:
        raise ParameterError("step_mm", "must be > 0")
    if route is None:
        route = seed
    chain = resolve_route(tree, route, max_depth)
    accel = accel or build_accelerator(mesh)

    # route polyline: each segment's axis, bridged across junctions
    pts = [tree.segments[chain[0]].start]
    seg_of_piece: list[int] = []
    for sid in chain:
        seg = tree.segments[sid]
        if not np.array_equal(pts[-1], seg.start):
            pts.append(seg.start)
            seg_of_piece.append(sid)
        pts.append(seg.end)
        seg_of_piece.append(sid)
    pts = np.array(pts)
    lens = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    total = float(cum[-1])

    # inset both ends: station 0 would sit on the inlet cap, station L on
    # the outlet cap, where the interiority probes rightly report zero
    if end_inset_mm is None:
        end_inset_mm = 4.0 * tree.segments[chain[-1]].radius
    a = min(0.5 * tree.segments[chain[0]].radius, 0.25 * total)
    b = total - min(max(end_inset_mm, 0.5 * tree.segments[chain[-1]].radius), 0.25 * total)
    count = int(math.ceil((b - a) / step_mm)) + 1
    stations = np.linspace(a, b, count)

    poses: list[RigidTransform] = []
    rot = tree.root.frame.rotation
    for k, s in enumerate(stations):
        piece = min(int(np.searchsorted(cum, s, side="right")) - 1, len(lens) - 1)
        f = (s - cum[piece]) / lens[piece] if lens[piece] > 0 else 0.0
        center = pts[piece] + f * (pts[piece + 1] - pts[piece])
        tangent = (pts[piece + 1] - pts[piece]) / lens[piece]
        rot = _align_rotation(rot, tangent)
        radius = tree.segments[seg_of_piece[piece]].radius

        pose = None
        for retry in range(_MAX_POSE_RETRIES + 1):
            gen = stream(seed, TAG_POSE, k, retry)
            pitch = math.radians(float(gen.uniform(-jitter.max_pitch_deg, jitter.max_pitch_deg)))
            yaw = math.radians(float(gen.uniform(-jitter.max_yaw_deg, jitter.max_yaw_deg)))
            roll = math.radians(float(gen.uniform(-jitter.max_roll_deg, jitter.max_roll_deg)))
            ang = float(gen.uniform(0.0, 2.0 * math.pi))
            mag = float(gen.uniform(0.0, jitter.max_offset_frac)) * radius
            offset = rot @ np.array([mag * math.cos(ang), mag * math.sin(ang), 0.0])
            cand = RigidTransform(
                rot @ rotation_x(pitch) @ rotation_y(yaw) @ rotation_z(roll),
                center + offset,
            )
            if _clearance(accel, cand.translation) >= 0.1 * radius:
                pose = cand
                break
            if jitter.zero:
                break  # redrawing an all-zero perturbation cannot help
        if pose is None:
            cand = RigidTransform(rot, center)
            if _clearance(accel, cand.translation) < 0.1 * radius:
                raise PlacementError(
                    f"pose {k} at route station {s:.2f} mm cannot be "
                    "placed inside the lumen"
                )
            pose = cand
        poses.append(pose)
    return CameraPath(poses=poses, target_segment_ids=chain, step_mm=step_mm, seed=seed)


# ---------------------------------------------------------------------------
# dataset rendering


def render_dataset(
    tree: AirwayTree,
    mesh: TriangleMesh,
    paths: list[CameraPath],
    camera: Camera,
    out_dir,
    shading: ShadingParams | None = None,
    depth_format: str = "pfm",
    png_depth_scale: float = DEFAULT_PNG_DEPTH_SCALE,
    threads: int = 1,
    accel: RayAccelerator | None = None,
) -> DatasetManifest:
    """Render every pose of every path and write the dataset to disk.

    Layout: ``images/frame_%05d.png`` (8-bit), ``depth/frame_%05d.pfm`` (or
    16-bit PNG), ``poses/path_%02d.json`` (4x4 row-major per pose), and
    ``manifest.json``. Frame indices are global and monotone across paths.
    Deterministic: same tree, paths, and parameters give byte-identical
    files.
    """
    shading = shading or ShadingParams()
    if depth_format not in ("pfm", "png16"):
        raise ParameterError("depth_format", "must be 'pfm' or 'png16'")
    accel = accel or build_accelerator(mesh)
    out_dir = str(out_dir)
    for sub in ("images", "depth", "poses"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    from .airway_model import tree_to_json_dict

    manifest = DatasetManifest(
        depth_format=depth_format,
        disparity_convention="depth",
        png_depth_scale=png_depth_scale,
        seed=int(tree.params.seed),
        params_hash=params_hash(tree_to_json_dict(tree)["params"]),
        metadata={
            "resolution": list(camera.resolution),
            "vertical_fov": camera.vertical_fov,
            "near_clip": camera.near_clip,
            "shading_falloff_mm": shading.falloff_mm,
            "shading_gain": shading.gain,
            "path_seeds": [p.seed for p in paths],
            "step_mm": [p.step_mm for p in paths],
        },
    )

    ext = ".pfm" if depth_format == "pfm" else ".png"
    index = 0
    for path_id, path in enumerate(paths):
        mats = []
        for pose in path.poses:
            cam = replace(camera, pose=pose)
            sample = render_frame(accel, cam, shading, threads=threads, frame_index=index)
            image_rel = f"images/frame_{index:05d}.png"
            depth_rel = f"depth/frame_{index:05d}{ext}"
            pose_rel = f"poses/path_{path_id:02d}.json"
            write_png8(os.path.join(out_dir, image_rel), sample.image)
            if depth_format == "pfm":
                write_pfm(os.path.join(out_dir, depth_rel), sample.depth)
            else:
                write_png16(os.path.join(out_dir, depth_rel), sample.depth, png_depth_scale)
            mats.append([float(x) for x in pose.matrix().reshape(-1)])
            manifest.frames.append(
                FrameRecord(
                    index=index,
                    image_path=image_rel,
                    depth_path=depth_rel,
                    pose_path=pose_rel,
                    path_id=path_id,
                )
            )
            index += 1
        pose_doc = {
            "path_id": path_id,
            "step_mm": path.step_mm,
            "seed": path.seed,
            "target_segment_ids": path.target_segment_ids,
            "matrices_row_major_4x4": mats,
        }
        with open(os.path.join(out_dir, f"poses/path_{path_id:02d}.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(pose_doc, fh, indent=1)
    manifest.save(os.path.join(out_dir, "manifest.json"))
    log.info("rendered %d frames into %s", index, out_dir)
    return manifest
