import math

import numpy as np
import pytest
from scipy.spatial import cKDTree

from bronchosim import airway_model as am
from bronchosim import mesh_gen as mg
from bronchosim.errors import FormatError, ParameterError
from bronchosim.geometry import RigidTransform, rotation_y


# --- hand-built trees --------------------------------------------------------


def cylinder_tree(diameter: float = 6.0, length: float = 18.0) -> am.AirwayTree:
    """Single straight segment on the identity frame."""
    seg = am.AirwaySegment(
        id=0, parent_id=None, generation=0, diameter=diameter, length=length,
        twist=0.0, frame=RigidTransform(),
    )
    return am.AirwayTree(
        segments={0: seg}, bifurcations={},
        params=am.default_params(generations=1, seed=0),
    )


def symmetric_bif_tree(
    d_p: float = 8.0, l_p: float = 20.0, h: float = 0.78,
    phi: float = 70.0, l_child: float = 15.0,
) -> am.AirwayTree:
    """Untwisted bifurcation with identical daughters, mirror-symmetric
    about the x = 0 plane."""
    root = am.AirwaySegment(
        id=0, parent_id=None, generation=0, diameter=d_p, length=l_p,
        twist=0.0, frame=RigidTransform(),
    )
    bif_frame = RigidTransform(root.frame.rotation, root.end)
    d = h * d_p

    def child(seg_id: int, side: int) -> am.AirwaySegment:
        start = bif_frame.apply(am.daughter_axis_start(d / 2, phi, side))
        rot = bif_frame.rotation @ rotation_y(side * math.radians(phi))
        return am.AirwaySegment(
            id=seg_id, parent_id=0, generation=1, diameter=d, length=l_child,
            twist=0.0, frame=RigidTransform(rot, start),
        )

    seg_a, seg_b = child(1, +1), child(2, -1)
    bif = am._build_bifurcation_geometry(root, seg_a, seg_b, phi, phi, bif_frame)
    return am.AirwayTree(
        segments={0: root, 1: seg_a, 2: seg_b}, bifurcations={0: bif},
        params=am.default_params(generations=2, seed=0),
    )


# --- tube tessellation -------------------------------------------------------


def test_cylinder_vertex_and_triangle_counts():
    # 18 mm at 0.5 rings/mm -> 10 rings of 16 vertices, plus 2 cap centers;
    # 9 bands of 32 triangles, plus 2 fans of 16
    mesh = mg.tessellate(cylinder_tree(diameter=6.0, length=18.0))
    assert len(mesh.vertices) == 162
    assert len(mesh.triangles) == 320


def test_cylinder_is_watertight_inward_euler_two():
    rep = mg.validate_mesh(mg.tessellate(cylinder_tree()))
    assert rep.passes
    assert rep.euler_characteristic == 2
    assert rep.watertight and rep.winding_consistent and rep.inward_normals
    assert rep.signed_volume < 0.0


def test_cylinder_ring_vertices_lie_on_surface():
    mesh = mg.tessellate(cylinder_tree(diameter=6.0, length=18.0))
    ring_verts = mesh.vertices[:160]  # cap centers come last
    rho = np.hypot(ring_verts[:, 0], ring_verts[:, 1])
    assert np.abs(rho - 3.0).max() < 1e-12
    assert ring_verts[:, 2].min() >= -1e-12
    assert ring_verts[:, 2].max() <= 18.0 + 1e-12


def test_cylinder_volume_matches_inscribed_prism():
    # inscribed n-gon prism: V = n/2 r^2 sin(2 pi / n) L, negative inward
    n, r, length = 16, 3.0, 18.0
    mesh = mg.tessellate(cylinder_tree(diameter=2 * r, length=length))
    rep = mg.validate_mesh(mesh)
    expect = 0.5 * n * r * r * math.sin(2.0 * math.pi / n) * length
    assert rep.signed_volume == pytest.approx(-expect, rel=1e-9)


def test_chord_error_quarters_when_ring_segments_double():
    # mid-edge sag off the true cylinder r (1 - cos(pi/n)) shrinks ~4x per
    # doubling; measured on edge midpoints of the hoop bands
    tree = cylinder_tree(diameter=6.0, length=18.0)
    sags = []
    for n in (8, 16, 32):
        mesh = mg.tessellate(tree, mg.TessellationParams(ring_segments=n))
        tube = mesh.vertices[mesh.vertices[:, 2] <= 18.0]
        tri = mesh.triangles
        mids = 0.5 * (mesh.vertices[tri[:, 0]] + mesh.vertices[tri[:, 1]])
        rho = np.hypot(mids[:, 0], mids[:, 1])
        hoop = rho > 2.0  # skip cap fans near the axis
        sags.append((3.0 - rho[hoop]).max())
        assert len(tube)
    assert sags[0] / sags[1] >= 3.0
    assert sags[1] / sags[2] >= 3.0


# --- junction tessellation ---------------------------------------------------


def test_symmetric_bifurcation_mesh_is_mirror_symmetric():
    mesh = mg.tessellate(symmetric_bif_tree())
    mirrored = mesh.vertices * np.array([-1.0, 1.0, 1.0])
    dist, _ = cKDTree(mesh.vertices).query(mirrored)
    assert dist.max() < 1e-6


def test_symmetric_bifurcation_mesh_is_valid():
    rep = mg.validate_mesh(mg.tessellate(symmetric_bif_tree()))
    assert rep.passes, rep.summary()
    assert rep.euler_characteristic == 2


def test_sampled_trees_tessellate_valid():
    for gens, seed in ((2, 0), (3, 5), (4, 2), (5, 13)):
        tree = am.sample_tree(am.default_params(generations=gens, seed=seed))
        rep = mg.validate_mesh(mg.tessellate(tree))
        assert rep.passes, f"G={gens} seed={seed}: {rep.summary()}"
        assert rep.euler_characteristic == 2


def test_junction_exits_fit_segment_budgets():
    tree = am.sample_tree(am.default_params(generations=4, seed=3))
    for bif in tree.bifurcations.values():
        t_a, t_b = mg.junction_exit_lengths(tree, bif)
        assert 0.0 < t_a < tree.segments[bif.child_a_id].length
        assert 0.0 < t_b < tree.segments[bif.child_b_id].length


# --- defect detection --------------------------------------------------------


def test_validate_flags_missing_triangle():
    mesh = mg.tessellate(cylinder_tree())
    broken = mg.TriangleMesh(mesh.vertices, mesh.triangles[1:], mesh.normals)
    rep = mg.validate_mesh(broken)
    assert not rep.passes
    assert not rep.watertight
    assert len(rep.boundary_edges) == 3


def test_validate_flags_flipped_winding():
    mesh = mg.tessellate(cylinder_tree())
    tris = mesh.triangles.copy()
    tris[0] = tris[0][::-1]
    rep = mg.validate_mesh(mg.TriangleMesh(mesh.vertices, tris, mesh.normals))
    assert rep.watertight
    assert not rep.winding_consistent
    assert not rep.passes


def test_validate_flags_degenerate_triangle():
    mesh = mg.tessellate(cylinder_tree())
    v = len(mesh.vertices)
    collinear = np.array([[50.0, 0.0, 0.0], [51.0, 0.0, 0.0], [52.0, 0.0, 0.0]])
    verts = np.vstack([mesh.vertices, collinear])
    tris = np.vstack([mesh.triangles, [[v, v + 1, v + 2]]]).astype(np.int32)
    rep = mg.validate_mesh(mg.TriangleMesh(verts, tris, mg.vertex_normals(verts, tris)))
    assert rep.degenerate_triangles == [len(tris) - 1]
    assert not rep.passes


def test_validate_counts_crossing_tubes():
    mesh = mg.tessellate(cylinder_tree(diameter=6.0, length=18.0))
    shifted = mesh.vertices + np.array([2.0, 0.0, 4.0])
    verts = np.vstack([mesh.vertices, shifted])
    tris = np.vstack([mesh.triangles, mesh.triangles + len(mesh.vertices)])
    combined = mg.TriangleMesh(
        verts, tris.astype(np.int32), mg.vertex_normals(verts, tris)
    )
    n, pairs = mg.self_intersections(combined)
    assert n > 0
    assert pairs
    assert not mg.validate_mesh(combined).passes


# --- parameters ----------------------------------------------------------------


def test_tessellation_params_rejected():
    with pytest.raises(ParameterError):
        mg.TessellationParams(ring_segments=6).validate()
    with pytest.raises(ParameterError):
        mg.TessellationParams(ring_segments=15).validate()
    with pytest.raises(ParameterError):
        mg.TessellationParams(rings_per_unit_length=0.0).validate()
    with pytest.raises(ParameterError):
        mg.TessellationParams(bifurcation_rings=3).validate()


# --- OBJ / STL round trips -----------------------------------------------------


def test_obj_round_trip(tmp_path):
    mesh = mg.tessellate(cylinder_tree())
    path = tmp_path / "tube.obj"
    mg.write_obj(mesh, path)
    back = mg.read_obj(path)
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.abs(back.vertices - mesh.vertices).max() < 1e-6
    assert np.abs(back.normals - mesh.normals).max() < 1e-6


def test_obj_quad_faces_fan_triangulated(tmp_path):
    path = tmp_path / "quad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\nf -4 -3 -2\n")
    mesh = mg.read_obj(path)
    assert [tuple(t) for t in mesh.triangles] == [(0, 1, 2), (0, 2, 3), (0, 1, 2)]


def test_obj_without_geometry_rejected(tmp_path):
    path = tmp_path / "empty.obj"
    path.write_text("# nothing here\n")
    with pytest.raises(FormatError):
        mg.read_obj(path)


def test_stl_round_trip_stabilizes(tmp_path):
    mesh = mg.tessellate(cylinder_tree())
    f1, f2, f3 = (tmp_path / f"m{i}.stl" for i in (1, 2, 3))
    mg.write_stl(mesh, f1)
    m2 = mg.read_stl(f1)
    assert len(m2.triangles) == len(mesh.triangles)
    # float32 quantization happens once; further trips are byte-stable
    mg.write_stl(m2, f2)
    mg.write_stl(mg.read_stl(f2), f3)
    assert f2.read_bytes() == f3.read_bytes()


def test_stl_truncated_payload_reports_offset(tmp_path):
    mesh = mg.tessellate(cylinder_tree())
    path = tmp_path / "cut.stl"
    mg.write_stl(mesh, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-7])
    with pytest.raises(FormatError) as err:
        mg.read_stl(path)
    assert err.value.offset == len(blob) - 7


def test_stl_truncated_header_reports_offset(tmp_path):
    path = tmp_path / "stub.stl"
    path.write_bytes(b"\x00" * 40)
    with pytest.raises(FormatError) as err:
        mg.read_stl(path)
    assert err.value.offset == 40
